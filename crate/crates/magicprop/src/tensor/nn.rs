//! Named parameter storage and the small layer vocabulary the models share.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{indexed_stream, StreamRng};

static STORE_IDS: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(&self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> ParamId {
        ParamId(i)
    }
}

struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order used by the optimizer and the checkpoint manifest.
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore {
            id: STORE_IDS.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].trainable)
            .map(ParamId)
            .collect()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// In-place data update (the optimizer path). Shape must match.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f32>) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != p.value.numel() {
            return Err(Error::contract(format!(
                "set_data: length {} for parameter {} of {} elements",
                data.len(),
                p.name,
                p.value.numel()
            )));
        }
        super::finite_guard("set_data", &data)?;
        p.value = Tensor::from_parts(p.value.shape().to_vec(), data);
        Ok(())
    }

    /// Replace a parameter tensor wholesale (checkpoint load).
    pub fn load_named(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let id = self
            .by_name(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.params[id.0].value.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?} vs model shape {:?}",
                shape,
                self.params[id.0].value.shape()
            )));
        }
        self.set_data(id, data)
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), &p.value, p.trainable))
    }
}

/// Uniform Kaiming-style init over [-1/sqrt(fan_in), 1/sqrt(fan_in)],
/// streamed per parameter name so init order never matters.
pub fn init_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let mut rng = StreamRng::new(seed, indexed_stream("init", crate::rng::stream_id(name)));
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.fill_uniform(n, -bound, bound))
}

/// 2-D convolution layer: weight [co, ci, k, k], bias [co].
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        ps: &mut ParamStore,
        seed: u64,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        trainable: bool,
    ) -> Conv2dLayer {
        let w_name = format!("{name}.w");
        let w = init_uniform(seed, &w_name, &[co, ci, k, k], ci * k * k);
        let w = ps.add(&w_name, w, trainable);
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[co]), trainable);
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn forward(&self, ps: &ParamStore, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        tape.conv2d(x, &w, &b, self.stride, self.pad)
    }
}

/// Dense layer over the last axis: weight [in, out], bias [out].
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn build(
        ps: &mut ParamStore,
        seed: u64,
        name: &str,
        d_in: usize,
        d_out: usize,
        trainable: bool,
    ) -> LinearLayer {
        let w_name = format!("{name}.w");
        let w = init_uniform(seed, &w_name, &[d_in, d_out], d_in);
        let w = ps.add(&w_name, w, trainable);
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[d_out]), trainable);
        LinearLayer { w, b, d_in, d_out }
    }

    /// Applies to [..., d_in]; preserves leading shape.
    pub fn forward(&self, ps: &ParamStore, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let lead: Vec<usize> = x.shape()[..x.shape().len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let flat = tape.reshape(x, &[rows, self.d_in])?;
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        let y = tape.matmul(&flat, &w)?;
        let y = tape.bias_add_last(&y, &b)?;
        let mut out_shape = lead;
        out_shape.push(self.d_out);
        tape.reshape(&y, &out_shape)
    }
}

/// Layer norm with learnable affine over the last axis.
pub struct NormLayer {
    pub g: ParamId,
    pub b: ParamId,
    pub eps: f64,
}

impl NormLayer {
    pub fn build(ps: &mut ParamStore, name: &str, d: usize, trainable: bool) -> NormLayer {
        let g = ps.add(&format!("{name}.g"), Tensor::full(&[d], 1.0), trainable);
        let b = ps.add(&format!("{name}.b"), Tensor::zeros(&[d]), trainable);
        NormLayer { g, b, eps: 1e-5 }
    }

    pub fn forward(&self, ps: &ParamStore, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let g = tape.param(ps, self.g);
        let b = tape.param(ps, self.b);
        tape.layer_norm(x, &g, &b, self.eps)
    }

    /// Normalizes the channel axis of an NCHW tensor by permuting it last.
    pub fn forward_channels(&self, ps: &ParamStore, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let moved = tape.transpose(x, &[0, 2, 3, 1])?;
        let normed = self.forward(ps, tape, &moved)?;
        tape.transpose(&normed, &[0, 3, 1, 2])
    }
}

/// Hold a tensor alive for tests that need an `Arc` payload.
#[allow(dead_code)]
pub(crate) type Keep = Arc<Vec<f32>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_name() {
        let a = init_uniform(9, "net.w", &[4, 4], 4);
        let b = init_uniform(9, "net.w", &[4, 4], 4);
        let c = init_uniform(9, "net.v", &[4, 4], 4);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn linear_shapes() {
        let mut ps = ParamStore::new();
        let lin = LinearLayer::build(&mut ps, 1, "lin", 8, 3, true);
        let mut tape = Tape::new(false);
        let x = Tensor::zeros(&[2, 5, 8]);
        let y = lin.forward(&ps, &mut tape, &x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3]);
    }

    #[test]
    fn frozen_params_stay_untracked() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::full(&[2], 1.5), false);
        let mut tape = Tape::new(true);
        let t = tape.param(&ps, id);
        assert!(!t.requires_grad());
        assert_eq!(tape.num_nodes(), 0);
    }
}
