//! Adam with bias correction, over the trainable subset of a parameter
//! store.

use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates aligned with a fixed list of parameter ids.
pub struct AdamState {
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let ids = store.trainable_ids();
        let m = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
        AdamState { step: 0, ids, m, v }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Moments by the name of the parameter they track, for checkpointing.
    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &[f32], &[f32])> {
        self.ids
            .iter()
            .zip(self.m.iter().zip(self.v.iter()))
            .map(|(&id, (m, v))| (id, m.as_slice(), v.as_slice()))
    }

    pub fn load_slot(&mut self, idx: usize, m: Vec<f32>, v: Vec<f32>) -> Result<()> {
        if idx >= self.ids.len() || m.len() != self.m[idx].len() || v.len() != self.v[idx].len() {
            return Err(Error::Checkpoint("optimizer slot mismatch".into()));
        }
        self.m[idx] = m;
        self.v[idx] = v;
        Ok(())
    }
}

/// One optimizer step. Parameters whose gradient is absent from `grads`
/// (unused in this step's graph) are left untouched, as are their moments.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - (hp.beta1 as f64).powf(t);
    let bc2 = 1.0 - (hp.beta2 as f64).powf(t);

    for (slot, &id) in state.ids.clone().iter().enumerate() {
        let g = match grads.for_param(store, id) {
            Some(g) => g.to_vec(),
            None => continue,
        };
        let cur = store.get(id);
        if g.len() != cur.numel() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: cur.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        let mut new = cur.data().to_vec();
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..new.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            new[i] -= (hp.lr as f64 * mhat / (vhat.sqrt() + hp.eps as f64)) as f32;
        }
        store.set_data(id, new)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::full(&[3], 2.0), true);
        let mut state = AdamState::new(&ps);
        let hp = AdamHyper::default();

        let mut tape = Tape::new(true);
        let w = tape.param(&ps, id);
        let z = tape.scale(&w, 0.0).unwrap();
        let loss = tape.sum_all(&z).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.for_param(&ps, id).unwrap(), &[0.0; 3]);

        adam_step(&mut ps, &grads, &mut state, &hp).unwrap();
        assert_eq!(ps.get(id).data(), &[2.0; 3]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_is_signlike() {
        // From zero state, one step with gradient g moves by
        // -lr * g / (|g| + eps) elementwise.
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::zeros(&[2]), true);
        let mut state = AdamState::new(&ps);
        let hp = AdamHyper {
            lr: 0.1,
            ..Default::default()
        };

        let mut tape = Tape::new(true);
        let w = tape.param(&ps, id);
        let c = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        let prod = tape.mul(&w, &c).unwrap();
        let loss = tape.sum_all(&prod).unwrap(); // grad = c
        let grads = tape.backward(&loss).unwrap();
        adam_step(&mut ps, &grads, &mut state, &hp).unwrap();

        let got = ps.get(id).data();
        for (i, &g) in [3.0f32, -0.5].iter().enumerate() {
            let expect = -hp.lr * g / (g.abs() + hp.eps);
            assert!((got[i] - expect).abs() < 1e-6, "{} vs {}", got[i], expect);
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // 200 steps on f(w) = (w-3)^2 from w=0 with lr=0.1, compared against
        // an independent scalar recurrence in f64.
        let hp = AdamHyper {
            lr: 0.1,
            ..Default::default()
        };

        // Oracle recurrence, f64.
        let (mut w_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200u32 {
            let g = 2.0 * (w_ref - 3.0);
            m = hp.beta1 as f64 * m + (1.0 - hp.beta1 as f64) * g;
            v = hp.beta2 as f64 * v + (1.0 - hp.beta2 as f64) * g * g;
            let mhat = m / (1.0 - (hp.beta1 as f64).powi(t as i32));
            let vhat = v / (1.0 - (hp.beta2 as f64).powi(t as i32));
            w_ref -= hp.lr as f64 * mhat / (vhat.sqrt() + hp.eps as f64);
        }
        assert!((w_ref - 3.0).abs() < 0.05, "oracle endpoint {w_ref}");

        // Implementation path.
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::zeros(&[1]), true);
        let mut state = AdamState::new(&ps);
        for _ in 0..200 {
            let mut tape = Tape::new(true);
            let w = tape.param(&ps, id);
            let c = Tensor::full(&[1], 3.0);
            let d = tape.sub(&w, &c).unwrap();
            let sq = tape.mul(&d, &d).unwrap();
            let loss = tape.sum_all(&sq).unwrap();
            let grads = tape.backward(&loss).unwrap();
            adam_step(&mut ps, &grads, &mut state, &AdamHyper { lr: 0.1, ..Default::default() })
                .unwrap();
        }
        let w = ps.get(id).data()[0] as f64;
        assert!((w - 3.0).abs() < 0.05, "implementation endpoint {w}");
        assert!((w - w_ref).abs() < 1e-3, "paths diverged: {w} vs {w_ref}");
    }
}
