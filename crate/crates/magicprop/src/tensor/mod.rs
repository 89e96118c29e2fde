//! Dense f32 tensors with reverse-mode differentiation.
//!
//! The substrate is deliberately small: row-major `Tensor` values, a
//! [`Tape`] that records forward ops and replays their adjoints in reverse
//! order, a parameter store, and an Adam optimizer. Weights and activations
//! are 32-bit; every reduction (dot products, norms, means, softmax
//! denominators) accumulates in 64-bit. There is no broadcasting beyond the
//! documented bias forms and no implicit type promotion.
//!
//! Tensors are immutable after creation; the optimizer's in-place parameter
//! update is the single documented exception. Sharing read-only tensors
//! across threads is safe (`Arc` payloads); a tape is single-threaded.

mod adam;
mod kernels;
mod nn;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use nn::{Conv2dLayer, LinearLayer, NormLayer, ParamId, ParamStore};
pub use tape::{ExportedInput, ExportedNode, ExportedOp, GraphDesc, Gradients, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// A dense row-major f32 tensor. `node` ties the value to a tape when the
/// tensor participates in differentiation.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    /// (tape id, node index) when this value lives on a tape.
    pub(crate) node: Option<(u64, usize)>,
    requires_grad: bool,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "new" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn scalar_value(v: f32) -> Tensor {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn randn(shape: &[usize], rng: &mut StreamRng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), rng.fill_normal(n))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn with_tracking(mut self, tape_id: u64, node: usize, rg: bool) -> Tensor {
        self.node = Some((tape_id, node));
        self.requires_grad = rg;
        self
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on non-scalar shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Untracked view with a new shape of equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshaped",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        })
    }

    /// a*x + b*y, elementwise, untracked.
    pub fn axpy(a: f32, x: &Tensor, b: f32, y: &Tensor) -> Result<Tensor> {
        if x.shape != y.shape {
            return Err(Error::ShapeMismatch {
                op: "axpy",
                lhs: x.shape.clone(),
                rhs: y.shape.clone(),
            });
        }
        let data: Vec<f32> = x
            .data
            .iter()
            .zip(y.data.iter())
            .map(|(&xv, &yv)| a * xv + b * yv)
            .collect();
        finite_guard("axpy", &data)?;
        Ok(Tensor::from_parts(x.shape.clone(), data))
    }

    /// c*x, untracked.
    pub fn scaled(&self, c: f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&v| c * v).collect();
        finite_guard("scaled", &data)?;
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    /// Elementwise clamp, untracked.
    pub fn clamped(&self, lo: f32, hi: f32) -> Tensor {
        let data: Vec<f32> = self.data.iter().map(|&v| v.clamp(lo, hi)).collect();
        Tensor::from_parts(self.shape.clone(), data)
    }

    /// Stack equal-shaped tensors along a new leading axis, untracked.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        if items.is_empty() {
            return Err(Error::contract("stack of zero tensors"));
        }
        let base = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            if t.shape != base {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: base,
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&base);
        Ok(Tensor::from_parts(shape, data))
    }

    /// The i-th slice along the leading axis, untracked.
    pub fn select0(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return Err(Error::contract("select0 needs rank >= 2"));
        }
        if i >= self.shape[0] {
            return Err(Error::contract(format!(
                "select0 index {i} out of range {}",
                self.shape[0]
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[i * inner..(i + 1) * inner].to_vec();
        Ok(Tensor::from_parts(self.shape[1..].to_vec(), data))
    }

    /// Mean of squared differences, in f64, untracked. Handy for metrics.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut acc = 0.0f64;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            let d = a as f64 - b as f64;
            acc += d * d;
        }
        Ok(acc / self.numel() as f64)
    }

    /// Max |a-b| over all elements.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max))
    }
}

pub(crate) fn finite_guard(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(&[2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn stack_and_select_roundtrip() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.select0(1).unwrap().data(), b.data());
    }

    #[test]
    fn axpy_matches_manual() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = Tensor::new(&[3], vec![4.0, 5.0, 6.0]).unwrap();
        let z = Tensor::axpy(2.0, &x, -1.0, &y).unwrap();
        assert_eq!(z.data(), &[-2.0, -1.0, 0.0]);
    }
}
