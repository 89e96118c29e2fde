//! Operation recording and the reverse pass.
//!
//! A [`Tape`] owns a list of nodes in creation order, which is by
//! construction a topological order of the forward graph; the backward pass
//! walks it in exact reverse. A node is recorded only when recording is on
//! and at least one input requires a gradient, so inference through an
//! eval-mode tape costs nothing beyond the forward kernels. Constants are
//! held as plain tensors inside the node that consumes them and never
//! receive gradients.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels as k;
use super::{finite_guard, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f32),
    Silu,
    Softmax {
        d: usize,
    },
    LayerNorm {
        d: usize,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BiasAddLast {
        d: usize,
    },
    AddChannelBias,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        arg: Vec<u32>,
    },
    ResizeNearest {
        oh: usize,
        ow: usize,
    },
    ResizeBilinear {
        oh: usize,
        ow: usize,
    },
    Concat {
        axis: usize,
    },
    Reshape,
    Transpose {
        perm: Vec<usize>,
    },
    MeanTrailing {
        n_axes: usize,
    },
    SumAll,
    CrossEntropy {
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    out_shape: Vec<usize>,
    saved_out: Option<Arc<Vec<f32>>>,
}

pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
    param_cache: HashMap<(u64, usize), Tensor>,
}

/// Gradients of one backward pass, addressable by output tensor or by
/// parameter id.
pub struct Gradients {
    tape_id: u64,
    by_node: Vec<Option<Vec<f32>>>,
    param_nodes: HashMap<(u64, usize), usize>,
}

impl Gradients {
    pub fn of(&self, t: &Tensor) -> Option<&[f32]> {
        match t.node {
            Some((tid, idx)) if tid == self.tape_id => {
                self.by_node.get(idx).and_then(|g| g.as_deref())
            }
            _ => None,
        }
    }

    pub fn for_param(&self, store: &ParamStore, id: ParamId) -> Option<&[f32]> {
        let node = *self.param_nodes.get(&(store.store_id(), id.index()))?;
        self.by_node.get(node).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new(recording: bool) -> Tape {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            recording,
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Register an input tensor. With `requires_grad` the backward pass will
    /// produce a gradient for it; without, it merely flows through.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        if !self.recording {
            let mut c = t.clone();
            c.node = None;
            return c;
        }
        let idx = self.nodes.len();
        let mut value = t.clone();
        value.node = None;
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![value],
            out_shape: t.shape().to_vec(),
            saved_out: None,
        });
        t.clone().with_tracking(self.id, idx, requires_grad)
    }

    /// Fetch a parameter as a tape tensor. Trainable parameters become
    /// gradient leaves (cached, so repeated use shares one leaf); frozen
    /// parameters pass through untracked.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        if !self.recording || !store.is_trainable(id) {
            let mut c = store.get(id).clone();
            c.node = None;
            return c;
        }
        let key = (store.store_id(), id.index());
        if let Some(t) = self.param_cache.get(&key) {
            return t.clone();
        }
        let t = self.leaf(store.get(id), true);
        self.param_cache.insert(key, t.clone());
        t
    }

    /// Named handles of the parameters this tape has watched, for gradient
    /// checking.
    pub fn tracked_params(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .param_cache
            .iter()
            .filter(|((sid, _), _)| *sid == store.store_id())
            .map(|((_, idx), t)| {
                (
                    store.name(super::ParamId::from_index(*idx)).to_string(),
                    t.clone(),
                )
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn check_tape(&self, op: &'static str, inputs: &[&Tensor]) -> Result<()> {
        for t in inputs {
            if let Some((tid, _)) = t.node {
                if tid != self.id {
                    return Err(Error::contract(format!(
                        "{op}: tensor belongs to another tape"
                    )));
                }
            }
        }
        Ok(())
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op,
        inputs: Vec<Tensor>,
        shape: Vec<usize>,
        data: Vec<f32>,
        saved_out: Option<Arc<Vec<f32>>>,
    ) -> Result<Tensor> {
        finite_guard(name, &data)?;
        let track = self.recording && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Ok(Tensor::from_parts(shape, data));
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            out_shape: shape.clone(),
            saved_out,
        });
        Ok(Tensor::from_parts(shape, data).with_tracking(self.id, idx, true))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        op: Op,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        self.check_tape(name, &[a, b])?;
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(
            name,
            op,
            vec![a.clone(), b.clone()],
            a.shape().to_vec(),
            data,
            None,
        )
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: &Tensor, c: f32) -> Result<Tensor> {
        self.check_tape("scale", &[a])?;
        let data: Vec<f32> = a.data().iter().map(|&x| c * x).collect();
        self.push(
            "scale",
            Op::Scale(c),
            vec![a.clone()],
            a.shape().to_vec(),
            data,
            None,
        )
    }

    pub fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape("silu", &[a])?;
        let data: Vec<f32> = a.data().iter().map(|&x| x * k::sigmoid(x)).collect();
        self.push(
            "silu",
            Op::Silu,
            vec![a.clone()],
            a.shape().to_vec(),
            data,
            None,
        )
    }

    // ── normalization and attention pieces ──────────────────────────

    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_tape("softmax", &[a])?;
        let d = *a.shape().last().ok_or_else(|| Error::contract("softmax on rank-0"))?;
        let data = k::softmax_fwd(a.data(), d);
        let saved = Arc::new(data.clone());
        self.push(
            "softmax",
            Op::Softmax { d },
            vec![a.clone()],
            a.shape().to_vec(),
            data,
            Some(saved),
        )
    }

    /// Layer norm over the last axis with learnable scale and shift.
    pub fn layer_norm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        self.check_tape("layer_norm", &[x, gamma, beta])?;
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::contract("layer_norm on rank-0"))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![d],
                rhs: gamma.shape().to_vec(),
            });
        }
        let (data, means, rstds) = k::layernorm_fwd(x.data(), gamma.data(), beta.data(), d, eps);
        self.push(
            "layer_norm",
            Op::LayerNorm { d, means, rstds },
            vec![x.clone(), gamma.clone(), beta.clone()],
            x.shape().to_vec(),
            data,
            None,
        )
    }

    /// [m,k]x[k,n] or [b,m,k]x[b,k,n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_tape("matmul", &[a, b])?;
        let (batch, m, kk, n) = match (a.shape(), b.shape()) {
            ([m, ka], [kb, n]) if ka == kb => (1, *m, *ka, *n),
            ([ba, m, ka], [bb, kb, n]) if ba == bb && ka == kb => (*ba, *m, *ka, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let data = k::matmul_fwd(a.data(), b.data(), batch, m, kk, n);
        let shape = if a.shape().len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        self.push(
            "matmul",
            Op::MatMul { batch, m, k: kk, n },
            vec![a.clone(), b.clone()],
            shape,
            data,
            None,
        )
    }

    /// x[..., d] + bias[d].
    pub fn bias_add_last(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check_tape("bias_add_last", &[x, bias])?;
        let d = *x.shape().last().unwrap_or(&0);
        if bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "bias_add_last",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bd = bias.data();
        let data: Vec<f32> = x
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(bd.iter()).map(|(&v, &b)| v + b))
            .collect();
        self.push(
            "bias_add_last",
            Op::BiasAddLast { d },
            vec![x.clone(), bias.clone()],
            x.shape().to_vec(),
            data,
            None,
        )
    }

    /// x[b,c,h,w] + bias[b,c] (per-sample channel bias, used for timestep
    /// conditioning).
    pub fn add_channel_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check_tape("add_channel_bias", &[x, bias])?;
        let (sb, sc) = match *x.shape() {
            [b, c, _, _] => (b, c),
            _ => {
                return Err(Error::contract(format!(
                    "add_channel_bias expects rank-4 input, got {:?}",
                    x.shape()
                )))
            }
        };
        if bias.shape() != [sb, sc] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: x.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let hw = x.numel() / (sb * sc);
        let bd = bias.data();
        let mut data = Vec::with_capacity(x.numel());
        for (p, plane) in x.data().chunks_exact(hw).enumerate() {
            let b = bd[p];
            data.extend(plane.iter().map(|&v| v + b));
        }
        self.push(
            "add_channel_bias",
            Op::AddChannelBias,
            vec![x.clone(), bias.clone()],
            x.shape().to_vec(),
            data,
            None,
        )
    }

    // ── spatial ops ─────────────────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        self.check_tape("conv2d", &[x, w, bias])?;
        let ([b, ci, h, wd], [co, ciw, kh, kw]) = (match *x.shape() {
            [a, b2, c, d] => [a, b2, c, d],
            _ => {
                return Err(Error::contract(format!(
                    "conv2d expects rank-4 input, got {:?}",
                    x.shape()
                )))
            }
        }, match *w.shape() {
            [a, b2, c, d] => [a, b2, c, d],
            _ => {
                return Err(Error::contract(format!(
                    "conv2d expects rank-4 weight, got {:?}",
                    w.shape()
                )))
            }
        });
        if ci != ciw || bias.shape() != [co] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(Error::contract(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} too large for {h}x{wd}"
            )));
        }
        let data = k::conv2d_fwd(
            x.data(),
            w.data(),
            bias.data(),
            b,
            ci,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
        );
        let oh = k::conv_out_extent(h, kh, stride, pad);
        let ow = k::conv_out_extent(wd, kw, stride, pad);
        self.push(
            "conv2d",
            Op::Conv2d { stride, pad },
            vec![x.clone(), w.clone(), bias.clone()],
            vec![b, co, oh, ow],
            data,
            None,
        )
    }

    pub fn maxpool2(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_tape("maxpool2", &[x])?;
        let [b, c, h, w] = match *x.shape() {
            [a, b2, c, d] => [a, b2, c, d],
            _ => {
                return Err(Error::contract(format!(
                    "maxpool2 expects rank-4 input, got {:?}",
                    x.shape()
                )))
            }
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!(
                "maxpool2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let (data, arg) = k::maxpool2_fwd(x.data(), b, c, h, w);
        self.push(
            "maxpool2",
            Op::MaxPool2 { arg },
            vec![x.clone()],
            vec![b, c, h / 2, w / 2],
            data,
            None,
        )
    }

    fn resize(
        &mut self,
        x: &Tensor,
        oh: usize,
        ow: usize,
        bilinear: bool,
    ) -> Result<Tensor> {
        let name: &'static str = if bilinear { "resize_bilinear" } else { "resize_nearest" };
        self.check_tape(name, &[x])?;
        let [b, c, h, w] = match *x.shape() {
            [a, b2, c, d] => [a, b2, c, d],
            _ => {
                return Err(Error::contract(format!(
                    "{name} expects rank-4 input, got {:?}",
                    x.shape()
                )))
            }
        };
        let mut data = vec![0.0f32; b * c * oh * ow];
        if bilinear {
            let rt = k::resize_bilinear_taps(h, oh);
            let ct = k::resize_bilinear_taps(w, ow);
            for p in 0..b * c {
                let plane = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
                for (i, &(rlo, rhi, rw)) in rt.iter().enumerate() {
                    for (j, &(clo, chi, cw)) in ct.iter().enumerate() {
                        let v = (1.0 - rw) * (1.0 - cw) * plane[rlo * w + clo] as f64
                            + (1.0 - rw) * cw * plane[rlo * w + chi] as f64
                            + rw * (1.0 - cw) * plane[rhi * w + clo] as f64
                            + rw * cw * plane[rhi * w + chi] as f64;
                        dst[i * ow + j] = v as f32;
                    }
                }
            }
        } else {
            let rm = k::resize_nearest_map(h, oh);
            let cm = k::resize_nearest_map(w, ow);
            for p in 0..b * c {
                let plane = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
                for (i, &si) in rm.iter().enumerate() {
                    for (j, &sj) in cm.iter().enumerate() {
                        dst[i * ow + j] = plane[si * w + sj];
                    }
                }
            }
        }
        let op = if bilinear {
            Op::ResizeBilinear { oh, ow }
        } else {
            Op::ResizeNearest { oh, ow }
        };
        self.push(name, op, vec![x.clone()], vec![b, c, oh, ow], data, None)
    }

    pub fn resize_nearest(&mut self, x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
        self.resize(x, oh, ow, false)
    }

    pub fn resize_bilinear(&mut self, x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
        self.resize(x, oh, ow, true)
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        self.check_tape("concat", inputs)?;
        let rank = inputs[0].shape().len();
        if axis >= rank {
            return Err(Error::contract(format!("concat axis {axis} out of rank {rank}")));
        }
        let mut out_shape = inputs[0].shape().to_vec();
        for t in &inputs[1..] {
            if t.shape().len() != rank
                || t.shape()[..axis] != out_shape[..axis]
                || t.shape()[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: out_shape,
                    rhs: t.shape().to_vec(),
                });
            }
            out_shape[axis] += t.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for t in inputs {
                let e = t.shape()[axis];
                let block = &t.data()[o * e * inner..(o + 1) * e * inner];
                data.extend_from_slice(block);
            }
        }
        self.push(
            "concat",
            Op::Concat { axis },
            inputs.iter().map(|&t| t.clone()).collect(),
            out_shape,
            data,
            None,
        )
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.check_tape("reshape", &[x])?;
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.push(
            "reshape",
            Op::Reshape,
            vec![x.clone()],
            shape.to_vec(),
            x.data().to_vec(),
            None,
        )
    }

    pub fn transpose(&mut self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        self.check_tape("transpose", &[x])?;
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!(
                "transpose perm {perm:?} invalid for rank {rank}"
            )));
        }
        let (shape, data) = permute(x.data(), x.shape(), perm);
        self.push(
            "transpose",
            Op::Transpose {
                perm: perm.to_vec(),
            },
            vec![x.clone()],
            shape,
            data,
            None,
        )
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_tape("sum_all", &[x])?;
        let s = k::sum_all(x.data()) as f32;
        self.push("sum_all", Op::SumAll, vec![x.clone()], vec![1], vec![s], None)
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.mean_trailing(x, x.shape().len())
    }

    /// Mean over the trailing `n_axes` axes.
    pub fn mean_trailing(&mut self, x: &Tensor, n_axes: usize) -> Result<Tensor> {
        self.check_tape("mean_trailing", &[x])?;
        let rank = x.shape().len();
        if n_axes == 0 || n_axes > rank {
            return Err(Error::contract(format!(
                "mean_trailing over {n_axes} axes of rank {rank}"
            )));
        }
        let keep = rank - n_axes;
        let inner: usize = x.shape()[keep..].iter().product();
        let mut data: Vec<f32> = x
            .data()
            .chunks_exact(inner)
            .map(|c| (k::sum_all(c) / inner as f64) as f32)
            .collect();
        let out_shape: Vec<usize> = if keep == 0 {
            vec![1]
        } else {
            x.shape()[..keep].to_vec()
        };
        if keep == 0 {
            debug_assert_eq!(data.len(), 1);
        }
        if data.is_empty() {
            data.push(0.0);
        }
        self.push(
            "mean_trailing",
            Op::MeanTrailing { n_axes },
            vec![x.clone()],
            out_shape,
            data,
            None,
        )
    }

    /// Mean cross-entropy of logits [b, c] against class indices.
    pub fn cross_entropy_logits(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        self.check_tape("cross_entropy", &[logits])?;
        let [b, c] = match *logits.shape() {
            [b, c] => [b, c],
            _ => {
                return Err(Error::contract(format!(
                    "cross_entropy expects rank-2 logits, got {:?}",
                    logits.shape()
                )))
            }
        };
        if targets.len() != b || targets.iter().any(|&t| t >= c) {
            return Err(Error::contract("cross_entropy targets out of range"));
        }
        let probs = k::softmax_fwd(logits.data(), c);
        let mut loss = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            loss -= (probs[i * c + t].max(1e-12) as f64).ln();
        }
        let loss = (loss / b as f64) as f32;
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            },
            vec![logits.clone()],
            vec![1],
            vec![loss],
            None,
        )
    }

    /// Mean squared error between a prediction and a (usually constant)
    /// target, as a scalar tape value.
    pub fn mse_loss(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(&d, &d)?;
        self.mean_all(&sq)
    }

    // ── backward ────────────────────────────────────────────────────

    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let (tid, loss_idx) = loss
            .node
            .ok_or_else(|| Error::contract("backward: loss is not on the tape"))?;
        if tid != self.id {
            return Err(Error::contract("backward: loss belongs to another tape"));
        }
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss_idx] = Some(vec![1.0]);

        for idx in (0..=loss_idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let input_grads = self.adjoints(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads.into_iter()) {
                let (ig, target) = match (ig, inp.node) {
                    (Some(ig), Some((_, i))) if inp.requires_grad() => (ig, i),
                    _ => continue,
                };
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(ig.iter()) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
            if !matches!(node.op, Op::Leaf) {
                grads[idx] = None;
            } else {
                grads[idx] = Some(g);
            }
        }

        Ok(Gradients {
            tape_id: self.id,
            by_node: grads,
            param_nodes: self
                .param_cache
                .iter()
                .filter_map(|(k2, t)| t.node.map(|(_, n)| (*k2, n)))
                .collect(),
        })
    }

    /// Per-input gradients of one node; `None` for inputs that do not need
    /// them.
    fn adjoints(&self, node: &Node, g: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let need: Vec<bool> = node.inputs.iter().map(|t| t.requires_grad()).collect();
        let out = match &node.op {
            Op::Leaf => vec![None],
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub => vec![
                Some(g.to_vec()),
                Some(g.iter().map(|&v| -v).collect()),
            ],
            Op::Mul => {
                let a = node.inputs[0].data();
                let b = node.inputs[1].data();
                vec![
                    Some(g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect()),
                    Some(g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect()),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|&v| c * v).collect())],
            Op::Silu => {
                let x = node.inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| {
                            let s = k::sigmoid(xv);
                            gv * (s * (1.0 + xv * (1.0 - s)))
                        })
                        .collect(),
                )]
            }
            Op::Softmax { d } => {
                let y = node.saved_out.as_ref().expect("softmax saves output");
                vec![Some(k::softmax_bwd(y, g, *d))]
            }
            Op::LayerNorm { d, means, rstds } => {
                let x = node.inputs[0].data();
                let gamma = node.inputs[1].data();
                let (dx, dgamma, dbeta) = k::layernorm_bwd(x, gamma, g, means, rstds, *d);
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::MatMul { batch, m, k: kk, n } => {
                let (da, db) = k::matmul_bwd(
                    node.inputs[0].data(),
                    node.inputs[1].data(),
                    g,
                    *batch,
                    *m,
                    *kk,
                    *n,
                );
                vec![Some(da), Some(db)]
            }
            Op::BiasAddLast { d } => {
                let mut db = vec![0.0f64; *d];
                for row in g.chunks_exact(*d) {
                    for (acc, &gv) in db.iter_mut().zip(row.iter()) {
                        *acc += gv as f64;
                    }
                }
                vec![
                    Some(g.to_vec()),
                    Some(db.iter().map(|&v| v as f32).collect()),
                ]
            }
            Op::AddChannelBias => {
                let [b, c, h, w] = match *node.inputs[0].shape() {
                    [a, b2, c2, d2] => [a, b2, c2, d2],
                    _ => unreachable!(),
                };
                let hw = h * w;
                let mut db = vec![0.0f32; b * c];
                for (p, plane) in g.chunks_exact(hw).enumerate() {
                    db[p] = k::sum_all(plane) as f32;
                }
                vec![Some(g.to_vec()), Some(db)]
            }
            Op::Conv2d { stride, pad } => {
                let x = &node.inputs[0];
                let w = &node.inputs[1];
                let [b, ci, h, wd] = match *x.shape() {
                    [a, b2, c2, d2] => [a, b2, c2, d2],
                    _ => unreachable!(),
                };
                let [co, _, kh, kw] = match *w.shape() {
                    [a, b2, c2, d2] => [a, b2, c2, d2],
                    _ => unreachable!(),
                };
                let (dx, dw, dbias) = k::conv2d_bwd(
                    x.data(),
                    w.data(),
                    g,
                    b,
                    ci,
                    h,
                    wd,
                    co,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    need[0],
                    need[1],
                );
                vec![dx, dw, Some(dbias)]
            }
            Op::MaxPool2 { arg } => {
                let x = &node.inputs[0];
                let [_, _, h, w] = match *x.shape() {
                    [a, b2, c2, d2] => [a, b2, c2, d2],
                    _ => unreachable!(),
                };
                let plane = h * w;
                let oplane = (h / 2) * (w / 2);
                let mut dx = vec![0.0f32; x.numel()];
                for (p, (gp, ap)) in g
                    .chunks_exact(oplane)
                    .zip(arg.chunks_exact(oplane))
                    .enumerate()
                {
                    let dst = &mut dx[p * plane..(p + 1) * plane];
                    for (&gv, &ai) in gp.iter().zip(ap.iter()) {
                        dst[ai as usize] += gv;
                    }
                }
                vec![Some(dx)]
            }
            Op::ResizeNearest { oh, ow } => {
                let x = &node.inputs[0];
                let [bc, h, w] = flatten_planes(x.shape());
                let rm = k::resize_nearest_map(h, *oh);
                let cm = k::resize_nearest_map(w, *ow);
                let mut dx = vec![0.0f32; x.numel()];
                for p in 0..bc {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (i, &si) in rm.iter().enumerate() {
                        for (j, &sj) in cm.iter().enumerate() {
                            dst[si * w + sj] += gp[i * ow + j];
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::ResizeBilinear { oh, ow } => {
                let x = &node.inputs[0];
                let [bc, h, w] = flatten_planes(x.shape());
                let rt = k::resize_bilinear_taps(h, *oh);
                let ct = k::resize_bilinear_taps(w, *ow);
                let mut dx64 = vec![0.0f64; x.numel()];
                for p in 0..bc {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx64[p * h * w..(p + 1) * h * w];
                    for (i, &(rlo, rhi, rw)) in rt.iter().enumerate() {
                        for (j, &(clo, chi, cw)) in ct.iter().enumerate() {
                            let gv = gp[i * ow + j] as f64;
                            dst[rlo * w + clo] += (1.0 - rw) * (1.0 - cw) * gv;
                            dst[rlo * w + chi] += (1.0 - rw) * cw * gv;
                            dst[rhi * w + clo] += rw * (1.0 - cw) * gv;
                            dst[rhi * w + chi] += rw * cw * gv;
                        }
                    }
                }
                vec![Some(dx64.iter().map(|&v| v as f32).collect())]
            }
            Op::Concat { axis } => {
                let out_shape = &node.out_shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_e = out_shape[*axis];
                let mut grads_out: Vec<Option<Vec<f32>>> = node
                    .inputs
                    .iter()
                    .map(|t| Some(vec![0.0f32; t.numel()]))
                    .collect();
                for o in 0..outer {
                    let mut offset = 0usize;
                    for (t, gslot) in node.inputs.iter().zip(grads_out.iter_mut()) {
                        let e = t.shape()[*axis];
                        let src = &g[(o * total_e + offset) * inner..(o * total_e + offset + e) * inner];
                        let dst = &mut gslot.as_mut().unwrap()[o * e * inner..(o + 1) * e * inner];
                        dst.copy_from_slice(src);
                        offset += e;
                    }
                }
                grads_out
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Transpose { perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, data) = permute(g, &node.out_shape, &inv);
                vec![Some(data)]
            }
            Op::MeanTrailing { n_axes } => {
                let x = &node.inputs[0];
                let rank = x.shape().len();
                let inner: usize = x.shape()[rank - n_axes..].iter().product();
                let scale = 1.0 / inner as f32;
                let mut dx = Vec::with_capacity(x.numel());
                for &gv in g {
                    dx.extend(std::iter::repeat(gv * scale).take(inner));
                }
                vec![Some(dx)]
            }
            Op::SumAll => {
                let x = &node.inputs[0];
                vec![Some(vec![g[0]; x.numel()])]
            }
            Op::CrossEntropy { targets, probs } => {
                let b = targets.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f32;
                let mut dx = probs.iter().map(|&p| p * scale).collect::<Vec<f32>>();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * c + t] -= scale;
                }
                vec![Some(dx)]
            }
        };
        Ok(out)
    }

    /// Plain description of the recorded graph up to `loss`, for independent
    /// re-execution by the verification oracle.
    pub fn export(&self, loss: &Tensor) -> Result<GraphDesc> {
        let (tid, loss_idx) = loss
            .node
            .ok_or_else(|| Error::contract("export: loss is not on the tape"))?;
        if tid != self.id {
            return Err(Error::contract("export: loss belongs to another tape"));
        }
        let nodes = self.nodes[..=loss_idx]
            .iter()
            .map(|n| {
                let inputs = n
                    .inputs
                    .iter()
                    .map(|t| match t.node {
                        Some((_, i)) => ExportedInput::Node(i),
                        None => ExportedInput::Value {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    })
                    .collect();
                ExportedNode {
                    op: export_op(&n.op),
                    inputs,
                    shape: n.out_shape.clone(),
                }
            })
            .collect();
        Ok(GraphDesc {
            nodes,
            loss: loss_idx,
        })
    }
}

fn flatten_planes(shape: &[usize]) -> [usize; 3] {
    let n = shape.len();
    let h = shape[n - 2];
    let w = shape[n - 1];
    [shape[..n - 2].iter().product(), h, w]
}

fn permute(data: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0f32; data.len()];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            src += perm_strides[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            src -= perm_strides[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
    (out_shape, out)
}

// ── exported graph description ──────────────────────────────────────

pub struct GraphDesc {
    pub nodes: Vec<ExportedNode>,
    pub loss: usize,
}

pub struct ExportedNode {
    pub op: ExportedOp,
    pub inputs: Vec<ExportedInput>,
    pub shape: Vec<usize>,
}

pub enum ExportedInput {
    Node(usize),
    Value { shape: Vec<usize>, data: Vec<f32> },
}

#[derive(Clone, Debug)]
pub enum ExportedOp {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f32),
    Silu,
    Softmax,
    LayerNorm { eps_ignored: bool },
    MatMul { batch: usize, m: usize, k: usize, n: usize },
    BiasAddLast { d: usize },
    AddChannelBias,
    Conv2d { stride: usize, pad: usize },
    MaxPool2,
    ResizeNearest { oh: usize, ow: usize },
    ResizeBilinear { oh: usize, ow: usize },
    Concat { axis: usize },
    Reshape,
    Transpose { perm: Vec<usize> },
    MeanTrailing { n_axes: usize },
    SumAll,
    CrossEntropy { targets: Vec<usize> },
}

fn export_op(op: &Op) -> ExportedOp {
    match op {
        Op::Leaf => ExportedOp::Leaf,
        Op::Add => ExportedOp::Add,
        Op::Sub => ExportedOp::Sub,
        Op::Mul => ExportedOp::Mul,
        Op::Scale(c) => ExportedOp::Scale(*c),
        Op::Silu => ExportedOp::Silu,
        Op::Softmax { .. } => ExportedOp::Softmax,
        Op::LayerNorm { .. } => ExportedOp::LayerNorm { eps_ignored: false },
        Op::MatMul { batch, m, k, n } => ExportedOp::MatMul {
            batch: *batch,
            m: *m,
            k: *k,
            n: *n,
        },
        Op::BiasAddLast { d } => ExportedOp::BiasAddLast { d: *d },
        Op::AddChannelBias => ExportedOp::AddChannelBias,
        Op::Conv2d { stride, pad } => ExportedOp::Conv2d {
            stride: *stride,
            pad: *pad,
        },
        Op::MaxPool2 { .. } => ExportedOp::MaxPool2,
        Op::ResizeNearest { oh, ow } => ExportedOp::ResizeNearest { oh: *oh, ow: *ow },
        Op::ResizeBilinear { oh, ow } => ExportedOp::ResizeBilinear { oh: *oh, ow: *ow },
        Op::Concat { axis } => ExportedOp::Concat { axis: *axis },
        Op::Reshape => ExportedOp::Reshape,
        Op::Transpose { perm } => ExportedOp::Transpose { perm: perm.clone() },
        Op::MeanTrailing { n_axes } => ExportedOp::MeanTrailing { n_axes: *n_axes },
        Op::SumAll => ExportedOp::SumAll,
        Op::CrossEntropy { targets, .. } => ExportedOp::CrossEntropy {
            targets: targets.clone(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn add_of_zeros_is_identity() {
        let mut tape = Tape::new(false);
        let a = t(&[2], vec![1.0, 2.0]);
        let z = Tensor::zeros(&[2]);
        let r = tape.add(&a, &z).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_includes_both_shapes() {
        let mut tape = Tape::new(false);
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let err = tape.add(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(&t(&[2, 3], vec![1.0; 6]), true);
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(&t(&[2], vec![1.0, 2.0]), true);
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(&t(&[2], vec![1.0, 2.0]), true);
        let y = tape.mul(&x, &x).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn no_grad_leaf_receives_nothing() {
        let mut tape = Tape::new(true);
        let x = tape.leaf(&t(&[2], vec![1.0, 2.0]), true);
        let c = tape.leaf(&t(&[2], vec![3.0, 4.0]), false);
        let y = tape.mul(&x, &c).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).unwrap(), &[3.0, 4.0]);
        assert!(grads.of(&c).is_none());
    }

    #[test]
    fn eval_mode_records_nothing() {
        let mut tape = Tape::new(false);
        let x = tape.leaf(&t(&[2], vec![1.0, 2.0]), true);
        let y = tape.mul(&x, &x).unwrap();
        assert_eq!(tape.num_nodes(), 0);
        assert!(y.node.is_none());
    }

    #[test]
    fn transpose_roundtrip() {
        let mut tape = Tape::new(false);
        let x = t(&[2, 3, 4], (0..24).map(|v| v as f32).collect());
        let y = tape.transpose(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = tape.transpose(&y, &[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn concat_then_backward_splits_grad() {
        let mut tape = Tape::new(true);
        let a = tape.leaf(&t(&[1, 2, 2, 2], vec![1.0; 8]), true);
        let b = tape.leaf(&t(&[1, 3, 2, 2], vec![2.0; 12]), true);
        let y = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 2, 2]);
        let sq = tape.mul(&y, &y).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&a).unwrap(), &[2.0; 8]);
        assert_eq!(grads.of(&b).unwrap(), &[4.0; 12]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new(false);
        let x = t(&[2, 4], vec![0.1, -2.0, 3.0, 0.5, 1.0, 1.0, 1.0, 1.0]);
        let y = tape.softmax(&x).unwrap();
        for row in y.data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!((y.data()[4] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn nonfinite_output_is_error() {
        let mut tape = Tape::new(false);
        let x = t(&[2], vec![1e30, 1e30]);
        let y = tape.mul(&x, &x);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}
