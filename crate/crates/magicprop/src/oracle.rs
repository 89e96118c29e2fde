//! Independent verification oracles.
//!
//! The gradient oracle re-executes a recorded forward graph in 64-bit
//! arithmetic using its own naive kernels, entirely separate from the f32
//! compute path, and differentiates it by central finite differences. The
//! analytic Gaussian denoiser gives samplers a closed-form target
//! distribution to reproduce. Both run inside `selftest` as well as the
//! test suites.

use crate::error::{Error, Result};
use crate::tensor::{ExportedInput, ExportedOp, GraphDesc, Gradients, Tape, Tensor};

// ── f64 graph replay ─────────────────────────────────────────────────

/// One override: leaf node index -> replacement values.
type Override<'a> = Option<(usize, &'a [f64])>;

fn input_val<'a>(
    vals: &'a [Vec<f64>],
    consts: &'a [Vec<f64>],
    idx: &(usize, bool),
) -> &'a [f64] {
    if idx.1 {
        &consts[idx.0]
    } else {
        &vals[idx.0]
    }
}

/// Evaluate the exported graph in f64, returning the scalar at the loss
/// node. `over` substitutes the values of one leaf node.
pub fn eval_graph_f64(desc: &GraphDesc, over: Override) -> Result<f64> {
    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(desc.nodes.len());
    let mut consts: Vec<Vec<f64>> = Vec::new();
    // (index, is_const) per node input, resolved up front.
    let mut resolved: Vec<Vec<(usize, bool)>> = Vec::with_capacity(desc.nodes.len());
    let mut const_shapes: Vec<Vec<usize>> = Vec::new();
    for node in &desc.nodes {
        let mut slots = Vec::with_capacity(node.inputs.len());
        for inp in &node.inputs {
            match inp {
                ExportedInput::Node(i) => slots.push((*i, false)),
                ExportedInput::Value { shape, data } => {
                    consts.push(data.iter().map(|&v| v as f64).collect());
                    const_shapes.push(shape.clone());
                    slots.push((consts.len() - 1, true));
                }
            }
        }
        resolved.push(slots);
    }

    for (idx, node) in desc.nodes.iter().enumerate() {
        let shape_of = |slot: &(usize, bool)| -> &[usize] {
            if slot.1 {
                &const_shapes[slot.0]
            } else {
                &desc.nodes[slot.0].shape
            }
        };
        let out: Vec<f64> = match &node.op {
            ExportedOp::Leaf => {
                let base = input_val(&vals, &consts, &resolved[idx][0]).to_vec();
                match over {
                    Some((leaf, replacement)) if leaf == idx => replacement.to_vec(),
                    _ => base,
                }
            }
            ExportedOp::Add => binary(&vals, &consts, &resolved[idx], |a, b| a + b),
            ExportedOp::Sub => binary(&vals, &consts, &resolved[idx], |a, b| a - b),
            ExportedOp::Mul => binary(&vals, &consts, &resolved[idx], |a, b| a * b),
            ExportedOp::Scale(c) => input_val(&vals, &consts, &resolved[idx][0])
                .iter()
                .map(|&v| *c as f64 * v)
                .collect(),
            ExportedOp::Silu => input_val(&vals, &consts, &resolved[idx][0])
                .iter()
                .map(|&v| v / (1.0 + (-v).exp()))
                .collect(),
            ExportedOp::Softmax => {
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let d = *node.shape.last().unwrap();
                let mut out = vec![0.0; x.len()];
                for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for (o, &v) in orow.iter_mut().zip(row.iter()) {
                        *o = (v - mx).exp();
                        denom += *o;
                    }
                    for o in orow.iter_mut() {
                        *o /= denom;
                    }
                }
                out
            }
            ExportedOp::LayerNorm { .. } => {
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let gamma = input_val(&vals, &consts, &resolved[idx][1]).to_vec();
                let beta = input_val(&vals, &consts, &resolved[idx][2]).to_vec();
                let d = *node.shape.last().unwrap();
                let mut out = vec![0.0; x.len()];
                for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + 1e-5).sqrt();
                    for i in 0..d {
                        orow[i] = gamma[i] * (row[i] - mean) * rstd + beta[i];
                    }
                }
                out
            }
            ExportedOp::MatMul { batch, m, k, n } => {
                let a = input_val(&vals, &consts, &resolved[idx][0]);
                let b = input_val(&vals, &consts, &resolved[idx][1]);
                let mut out = vec![0.0; batch * m * n];
                for bi in 0..*batch {
                    for i in 0..*m {
                        for j in 0..*n {
                            let mut acc = 0.0;
                            for kk in 0..*k {
                                acc += a[bi * m * k + i * k + kk] * b[bi * k * n + kk * n + j];
                            }
                            out[bi * m * n + i * n + j] = acc;
                        }
                    }
                }
                out
            }
            ExportedOp::BiasAddLast { d } => {
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let b = input_val(&vals, &consts, &resolved[idx][1]).to_vec();
                x.chunks_exact(*d)
                    .flat_map(|row| row.iter().zip(b.iter()).map(|(&v, &bb)| v + bb))
                    .collect()
            }
            ExportedOp::AddChannelBias => {
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let b = input_val(&vals, &consts, &resolved[idx][1]).to_vec();
                let hw = x.len() / b.len();
                let mut out = Vec::with_capacity(x.len());
                for (p, plane) in x.chunks_exact(hw).enumerate() {
                    out.extend(plane.iter().map(|&v| v + b[p]));
                }
                out
            }
            ExportedOp::Conv2d { stride, pad } => {
                let xs = shape_of(&resolved[idx][0]).to_vec();
                let ws = shape_of(&resolved[idx][1]).to_vec();
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let w = input_val(&vals, &consts, &resolved[idx][1]);
                let bias = input_val(&vals, &consts, &resolved[idx][2]).to_vec();
                let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let oh = node.shape[2];
                let ow = node.shape[3];
                let mut out = vec![0.0; b * co * oh * ow];
                for bi in 0..b {
                    for oc in 0..co {
                        for i in 0..oh {
                            for j in 0..ow {
                                let mut acc = bias[oc];
                                for ic in 0..ci {
                                    for r in 0..kh {
                                        for c in 0..kw {
                                            let ih = (i * stride + r) as isize - *pad as isize;
                                            let iw = (j * stride + c) as isize - *pad as isize;
                                            if ih >= 0
                                                && iw >= 0
                                                && (ih as usize) < h
                                                && (iw as usize) < wd
                                            {
                                                acc += x[((bi * ci + ic) * h + ih as usize) * wd
                                                    + iw as usize]
                                                    * w[((oc * ci + ic) * kh + r) * kw + c];
                                            }
                                        }
                                    }
                                }
                                out[((bi * co + oc) * oh + i) * ow + j] = acc;
                            }
                        }
                    }
                }
                out
            }
            ExportedOp::MaxPool2 => {
                let xs = shape_of(&resolved[idx][0]).to_vec();
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = xs[0] * xs[1];
                let mut out = vec![0.0; planes * oh * ow];
                for p in 0..planes {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    best = best.max(x[p * h * w + (2 * i + di) * w + 2 * j + dj]);
                                }
                            }
                            out[p * oh * ow + i * ow + j] = best;
                        }
                    }
                }
                out
            }
            ExportedOp::ResizeNearest { oh, ow } => {
                let xs = shape_of(&resolved[idx][0]).to_vec();
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let (h, w) = (xs[2], xs[3]);
                let planes = xs[0] * xs[1];
                let map = |o: usize, n_in: usize, n_out: usize| {
                    (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
                };
                let mut out = vec![0.0; planes * oh * ow];
                for p in 0..planes {
                    for i in 0..*oh {
                        for j in 0..*ow {
                            out[p * oh * ow + i * ow + j] =
                                x[p * h * w + map(i, h, *oh) * w + map(j, w, *ow)];
                        }
                    }
                }
                out
            }
            ExportedOp::ResizeBilinear { oh, ow } => {
                let xs = shape_of(&resolved[idx][0]).to_vec();
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let (h, w) = (xs[2], xs[3]);
                let planes = xs[0] * xs[1];
                let taps = |o: usize, n_in: usize, n_out: usize| {
                    let f = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                        .max(0.0)
                        .min(n_in as f64 - 1.0);
                    let lo = f.floor() as usize;
                    (lo, (lo + 1).min(n_in - 1), f - lo as f64)
                };
                let mut out = vec![0.0; planes * oh * ow];
                for p in 0..planes {
                    for i in 0..*oh {
                        let (rl, rh, rw) = taps(i, h, *oh);
                        for j in 0..*ow {
                            let (cl, ch, cw) = taps(j, w, *ow);
                            out[p * oh * ow + i * ow + j] = (1.0 - rw) * (1.0 - cw)
                                * x[p * h * w + rl * w + cl]
                                + (1.0 - rw) * cw * x[p * h * w + rl * w + ch]
                                + rw * (1.0 - cw) * x[p * h * w + rh * w + cl]
                                + rw * cw * x[p * h * w + rh * w + ch];
                        }
                    }
                }
                out
            }
            ExportedOp::Concat { axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let mut out = Vec::with_capacity(node.shape.iter().product());
                for o in 0..outer {
                    for slot in &resolved[idx] {
                        let e = shape_of(slot)[*axis];
                        let v = input_val(&vals, &consts, slot);
                        out.extend_from_slice(&v[o * e * inner..(o + 1) * e * inner]);
                    }
                }
                out
            }
            ExportedOp::Reshape => input_val(&vals, &consts, &resolved[idx][0]).to_vec(),
            ExportedOp::Transpose { perm } => {
                let xs = shape_of(&resolved[idx][0]).to_vec();
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                permute_f64(x, &xs, perm)
            }
            ExportedOp::MeanTrailing { n_axes } => {
                let xs = shape_of(&resolved[idx][0]).to_vec();
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let inner: usize = xs[xs.len() - n_axes..].iter().product();
                x.chunks_exact(inner)
                    .map(|c| c.iter().sum::<f64>() / inner as f64)
                    .collect()
            }
            ExportedOp::SumAll => {
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                vec![x.iter().sum()]
            }
            ExportedOp::CrossEntropy { targets } => {
                let xs = shape_of(&resolved[idx][0]).to_vec();
                let x = input_val(&vals, &consts, &resolved[idx][0]);
                let c = xs[1];
                let mut loss = 0.0;
                for (i, &t) in targets.iter().enumerate() {
                    let row = &x[i * c..(i + 1) * c];
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                    loss -= row[t] - mx - denom.ln();
                }
                vec![loss / targets.len() as f64]
            }
        };
        vals.push(out);
    }
    Ok(vals[desc.loss][0])
}

fn binary(
    vals: &[Vec<f64>],
    consts: &[Vec<f64>],
    slots: &[(usize, bool)],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let a = input_val(vals, consts, &slots[0]);
    let b = input_val(vals, consts, &slots[1]);
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn permute_f64(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let perm_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
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
    out
}

// ── finite-difference gradient check ────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_leaf: String,
    /// Coordinates skipped because the finite difference itself was
    /// h-unstable (a nondifferentiable point, e.g. a max-pool tie flip,
    /// inside the probing interval).
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare analytic gradients against central finite differences of the
/// f64-replayed graph, h = 1e-3, over every coordinate of the given leaves.
/// A coordinate that disagrees is re-probed at h/8; if the FD estimate
/// moves materially the coordinate straddles a kink and is skipped — a
/// wrong adjoint produces an h-stable disagreement and is kept.
pub fn gradient_check(
    tape: &Tape,
    loss: &Tensor,
    leaves: &[(&str, &Tensor)],
    grads: &Gradients,
) -> Result<GradCheckReport> {
    let desc = tape.export(loss)?;
    let h = 1e-3f64;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    let mut skipped = 0usize;

    // Comparison floor at a fraction of the gradient scale (per leaf and
    // across the whole graph): coordinates far below that scale carry the
    // f32-vs-f64 function gap as irreducible noise, while genuine adjoint
    // defects (sign, factor, wiring, boundary errors) corrupt coordinates
    // at scale and stay detectable.
    let mut global_gmax = 0.0f64;
    for (name, leaf) in leaves {
        let analytic = grads
            .of(leaf)
            .ok_or_else(|| Error::contract(format!("no gradient for leaf {name}")))?;
        global_gmax = analytic
            .iter()
            .fold(global_gmax, |m, &g| m.max(g.abs() as f64));
    }

    for (name, leaf) in leaves {
        let analytic = grads
            .of(leaf)
            .ok_or_else(|| Error::contract(format!("no gradient for leaf {name}")))?;
        let node_idx = leaf.node.expect("leaf is tracked").1;
        let base: Vec<f64> = leaf.data().iter().map(|&v| v as f64).collect();
        let gmax = analytic.iter().fold(0.0f64, |m, &g| m.max(g.abs() as f64));
        let floor = (0.2 * gmax).max(0.02 * global_gmax).max(1e-4);
        for i in 0..base.len() {
            let fd_at = |step: f64| -> Result<f64> {
                let mut plus = base.clone();
                plus[i] += step;
                let mut minus = base.clone();
                minus[i] -= step;
                let fp = eval_graph_f64(&desc, Some((node_idx, &plus)))?;
                let fm = eval_graph_f64(&desc, Some((node_idx, &minus)))?;
                Ok((fp - fm) / (2.0 * step))
            };
            let fd = fd_at(h)?;
            let a = analytic[i] as f64;
            let rel_of = |fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            let mut rel = rel_of(fd);
            if rel > 1e-3 {
                let fd_small = fd_at(h / 8.0)?;
                if (fd_small - fd).abs() > 0.25 * fd.abs().max(fd_small.abs()).max(floor) {
                    skipped += 1;
                    continue;
                }
                rel = rel.min(rel_of(fd_small));
            }
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{i}] analytic={a:.6e} fd={fd:.6e}");
            }
        }
    }
    Ok(GradCheckReport {
        coords_checked: checked,
        max_rel_err: max_rel,
        worst_leaf: worst,
        skipped_kinks: skipped,
    })
}

// ── analytic Gaussian denoiser ──────────────────────────────────────

/// Optimal v-prediction for scalar data x0 ~ N(mean, var) observed as
/// x_t = a*x0 + s*eps: posterior means in closed form.
pub fn gaussian_optimal_v(x_t: &Tensor, alpha_t: f64, mean: f64, var: f64) -> Tensor {
    let s2 = 1.0 - alpha_t * alpha_t;
    let s = s2.sqrt();
    let denom = alpha_t * alpha_t * var + s2;
    let data: Vec<f32> = x_t
        .data()
        .iter()
        .map(|&xt| {
            let xt = xt as f64;
            let x0_hat = (alpha_t * var * xt + s2 * mean) / denom;
            let eps_hat = if s > 0.0 {
                (xt - alpha_t * x0_hat) / s
            } else {
                0.0
            };
            (alpha_t * eps_hat - s * x0_hat) as f32
        })
        .collect();
    Tensor::from_parts(x_t.shape().to_vec(), data)
}

/// Chi-square statistic for uniformity over `bins`, plus the 0.01 critical
/// value for (bins-1) degrees of freedom when tabulated.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum()
}

/// Upper 0.01 critical values of the chi-square distribution.
pub fn chi_square_crit_001(dof: usize) -> Option<f64> {
    // Standard table values.
    const TABLE: [(usize, f64); 12] = [
        (1, 6.635),
        (2, 9.210),
        (3, 11.345),
        (4, 13.277),
        (5, 15.086),
        (6, 16.812),
        (7, 18.475),
        (8, 20.090),
        (9, 21.666),
        (10, 23.209),
        (14, 29.141),
        (29, 49.588),
    ];
    TABLE.iter().find(|(d, _)| *d == dof).map(|(_, v)| *v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::tensor::Tape;

    #[test]
    fn replay_matches_f32_forward_on_small_graph() {
        let mut rng = StreamRng::new(11, 0);
        let mut tape = Tape::new(true);
        let x = tape.leaf(&Tensor::randn(&[2, 3, 6, 6], &mut rng), true);
        let w = tape.leaf(&Tensor::randn(&[4, 3, 3, 3], &mut rng), true);
        let b = tape.leaf(&Tensor::zeros(&[4]), true);
        let y = tape.conv2d(&x, &w, &b, 1, 1).unwrap();
        let y = tape.silu(&y).unwrap();
        let loss = tape.mean_all(&y).unwrap();
        let desc = tape.export(&loss).unwrap();
        let replayed = eval_graph_f64(&desc, None).unwrap();
        assert!(
            (replayed - loss.item().unwrap() as f64).abs() < 1e-4,
            "replay {} vs f32 {}",
            replayed,
            loss.item().unwrap()
        );
    }

    #[test]
    fn gradcheck_on_conv_silu_pool_net() {
        for seed in 0..3u64 {
            let mut rng = StreamRng::new(100 + seed, 0);
            let mut tape = Tape::new(true);
            let x = tape.leaf(&Tensor::randn(&[1, 2, 6, 6], &mut rng), true);
            let w1 = tape.leaf(&Tensor::randn(&[3, 2, 3, 3], &mut rng).scaled(0.4).unwrap(), true);
            let b1 = tape.leaf(&Tensor::randn(&[3], &mut rng).scaled(0.1).unwrap(), true);
            let h1 = tape.conv2d(&x, &w1, &b1, 1, 1).unwrap();
            let h1 = tape.silu(&h1).unwrap();
            let h1 = tape.maxpool2(&h1).unwrap();
            let w2 = tape.leaf(&Tensor::randn(&[2, 3, 3, 3], &mut rng).scaled(0.4).unwrap(), true);
            let b2 = tape.leaf(&Tensor::zeros(&[2]), true);
            let h2 = tape.conv2d(&h1, &w2, &b2, 1, 0).unwrap();
            let loss = tape.mean_all(&h2).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let report = gradient_check(
                &tape,
                &loss,
                &[("x", &x), ("w1", &w1), ("b1", &b1), ("w2", &w2), ("b2", &b2)],
                &grads,
            )
            .unwrap();
            assert!(
                report.passes(1e-3),
                "seed {seed}: {:?}",
                report
            );
        }
    }

    #[test]
    fn gradcheck_on_attention_pieces() {
        let mut rng = StreamRng::new(42, 1);
        let mut tape = Tape::new(true);
        let q = tape.leaf(&Tensor::randn(&[1, 4, 8], &mut rng), true);
        let kk = tape.leaf(&Tensor::randn(&[1, 5, 8], &mut rng), true);
        let v = tape.leaf(&Tensor::randn(&[1, 5, 8], &mut rng), true);
        let g = tape.leaf(&Tensor::full(&[8], 1.0), true);
        let bb = tape.leaf(&Tensor::zeros(&[8]), true);
        let qn = tape.layer_norm(&q, &g, &bb, 1e-5).unwrap();
        let kt = tape.transpose(&kk, &[0, 2, 1]).unwrap();
        let scores = tape.matmul(&qn, &kt).unwrap();
        let scores = tape.scale(&scores, 1.0 / (8f32).sqrt()).unwrap();
        let attn = tape.softmax(&scores).unwrap();
        let ctx = tape.matmul(&attn, &v).unwrap();
        let loss = tape.mean_all(&ctx).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let report = gradient_check(
            &tape,
            &loss,
            &[("q", &q), ("k", &kk), ("v", &v), ("gamma", &g), ("beta", &bb)],
            &grads,
        )
        .unwrap();
        assert!(report.passes(1e-3), "{:?}", report);
    }

    #[test]
    fn chi_square_of_perfect_uniform_is_zero() {
        assert_eq!(chi_square_uniform(&[10, 10, 10]), 0.0);
        assert_eq!(chi_square_crit_001(8), Some(20.090));
    }
}
