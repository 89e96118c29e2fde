//! Discrete diffusion schedule: signal/noise series, transition
//! coefficients, SNR, the zero-terminal rescale, forward sampling, and the
//! v-parameterization.
//!
//! Conventions: `alpha[t]` is the signal coefficient with
//! `alpha[t]^2 + sigma2[t] = 1`, `alpha[0] = 1`, and `alpha` strictly
//! decreasing. The series are kept in f64; they are applied to f32 tensors
//! at use sites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Standard,
    ZeroTerminalSnr,
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha: Vec<f64>,
    sigma2: Vec<f64>,
    mode: ScheduleMode,
    beta_bounds: (f64, f64),
}

/// Coefficients of q(x_t | x_s) for t > s: mean scale and added variance.
#[derive(Clone, Copy, Debug)]
pub struct TransitionCoeffs {
    pub t: usize,
    pub s: usize,
    pub alpha_ts: f64,
    pub sigma2_ts: f64,
}

impl NoiseSchedule {
    /// Linear-beta schedule over `t_max` steps: beta runs from `beta_min`
    /// at t=1 to `beta_max` at t=T, alpha_t = sqrt(prod (1 - beta_i)).
    pub fn linear(t_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
        if t_max < 2 {
            return Err(Error::contract(format!("schedule needs T >= 2, got {t_max}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::contract(format!(
                "beta bounds must satisfy 0 < min <= max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let mut alpha = Vec::with_capacity(t_max + 1);
        let mut sigma2 = Vec::with_capacity(t_max + 1);
        alpha.push(1.0);
        sigma2.push(0.0);
        let mut prod = 1.0f64;
        for t in 1..=t_max {
            let beta = beta_min + (beta_max - beta_min) * (t - 1) as f64 / (t_max - 1) as f64;
            prod *= 1.0 - beta;
            let a = prod.sqrt();
            alpha.push(a);
            sigma2.push(1.0 - a * a);
        }
        Ok(NoiseSchedule {
            t_max,
            alpha,
            sigma2,
            mode: ScheduleMode::Standard,
            beta_bounds: (beta_min, beta_max),
        })
    }

    /// Shift-and-scale of the alpha series so that alpha_T becomes exactly
    /// zero while alpha_1 is preserved.
    pub fn rescale_zero_terminal_snr(&self) -> Result<NoiseSchedule> {
        if self.mode != ScheduleMode::Standard {
            return Err(Error::contract(
                "rescale_zero_terminal_snr expects a standard-mode schedule",
            ));
        }
        let a1 = self.alpha[1];
        let at = self.alpha[self.t_max];
        if at <= 0.0 {
            return Err(Error::contract("terminal alpha already zero"));
        }
        if (a1 - at).abs() < 1e-15 {
            return Err(Error::contract(
                "degenerate schedule: alpha_1 equals alpha_T",
            ));
        }
        let scale = a1 / (a1 - at);
        let mut alpha = vec![1.0f64];
        let mut sigma2 = vec![0.0f64];
        for t in 1..=self.t_max {
            let a = ((self.alpha[t] - at) * scale).max(0.0);
            alpha.push(a);
            sigma2.push(1.0 - a * a);
        }
        // Pin the endpoint exactly.
        alpha[self.t_max] = 0.0;
        sigma2[self.t_max] = 1.0;
        Ok(NoiseSchedule {
            t_max: self.t_max,
            alpha,
            sigma2,
            mode: ScheduleMode::ZeroTerminalSnr,
            beta_bounds: self.beta_bounds,
        })
    }

    /// Convenience: linear schedule with the zero-terminal rescale applied.
    pub fn linear_zero_terminal(t_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(t_max, beta_min, beta_max)?.rescale_zero_terminal_snr()
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn beta_bounds(&self) -> (f64, f64) {
        self.beta_bounds
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma2[t].sqrt()
    }

    fn check_t(&self, op: &str, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::contract(format!(
                "{op}: step {t} out of range 0..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// Signal-to-noise ratio alpha_t^2 / (1 - alpha_t^2). Undefined at t=0.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_t("snr", t)?;
        if t == 0 {
            return Err(Error::contract("snr: t=0 is a documented singularity"));
        }
        let a2 = self.alpha[t] * self.alpha[t];
        Ok(a2 / (1.0 - a2))
    }

    /// Forward sample x_t = alpha_t * x0 + sqrt(1 - alpha_t^2) * noise.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t("q_sample", t)?;
        if x0.shape() != noise.shape() {
            return Err(Error::ShapeMismatch {
                op: "q_sample",
                lhs: x0.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        Tensor::axpy(self.alpha[t] as f32, x0, self.sigma(t) as f32, noise)
    }

    /// Coefficients of q(x_t | x_s) for t > s >= 0.
    pub fn transition(&self, t: usize, s: usize) -> Result<TransitionCoeffs> {
        self.check_t("transition", t)?;
        if t <= s {
            return Err(Error::contract(format!("transition requires t > s, got t={t}, s={s}")));
        }
        let alpha_ts = self.alpha[t] / self.alpha[s];
        let sigma2_ts = self.sigma2[t] - alpha_ts * alpha_ts * self.sigma2[s];
        Ok(TransitionCoeffs {
            t,
            s,
            alpha_ts,
            sigma2_ts: sigma2_ts.max(0.0),
        })
    }

    /// v_t = alpha_t * eps - sqrt(1 - alpha_t^2) * x0.
    pub fn v_from(&self, t: usize, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
        self.check_t("v_from", t)?;
        Tensor::axpy(self.alpha[t] as f32, eps, -(self.sigma(t) as f32), x0)
    }

    /// eps = alpha_t * v + sqrt(1 - alpha_t^2) * x_t.
    pub fn eps_from_v(&self, t: usize, x_t: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.check_t("eps_from_v", t)?;
        Tensor::axpy(self.alpha[t] as f32, v, self.sigma(t) as f32, x_t)
    }

    /// x0 = alpha_t * x_t - sqrt(1 - alpha_t^2) * v.
    pub fn x0_from_v(&self, t: usize, x_t: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.check_t("x0_from_v", t)?;
        Tensor::axpy(self.alpha[t] as f32, x_t, -(self.sigma(t) as f32), v)
    }

    /// Summary persisted in checkpoints; the series are recomputed on load
    /// and verified against the stored terminal alpha.
    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            t_max: self.t_max,
            beta_min: self.beta_bounds.0,
            beta_max: self.beta_bounds.1,
            mode: self.mode,
            alpha_terminal: self.alpha[self.t_max],
        }
    }
}

/// Serialized form of a schedule: parameters plus the terminal alpha used
/// as an integrity check on load.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub t_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub mode: ScheduleMode,
    pub alpha_terminal: f64,
}

impl ScheduleDescriptor {
    pub fn rebuild(&self) -> Result<NoiseSchedule> {
        let sched = match self.mode {
            ScheduleMode::Standard => NoiseSchedule::linear(self.t_max, self.beta_min, self.beta_max)?,
            ScheduleMode::ZeroTerminalSnr => {
                NoiseSchedule::linear_zero_terminal(self.t_max, self.beta_min, self.beta_max)?
            }
        };
        let got = sched.alpha(self.t_max);
        if (got - self.alpha_terminal).abs() > 1e-12 {
            return Err(Error::Checkpoint(format!(
                "schedule mismatch: recomputed alpha_T {got} vs stored {}",
                self.alpha_terminal
            )));
        }
        Ok(sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn default_1000() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn endpoints_and_monotonicity() {
        let s = default_1000();
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma2(0), 0.0);
        for t in 1..=s.t_max() {
            assert!(s.alpha(t) < s.alpha(t - 1), "alpha not decreasing at {t}");
            assert!(s.sigma2(t) > s.sigma2(t - 1), "sigma2 not increasing at {t}");
            let unit = s.alpha(t) * s.alpha(t) + s.sigma2(t);
            assert!((unit - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn snr_of_first_step_matches_beta_min() {
        // Direct cumulative-product evaluation: alpha_1^2 = 1 - beta_min.
        let s = default_1000();
        let snr1 = s.snr(1).unwrap();
        assert!((snr1 - (1.0 - 1e-4) / 1e-4).abs() / snr1 < 1e-10, "snr(1) = {snr1}");
    }

    #[test]
    fn standard_terminal_snr_is_small_but_nonzero() {
        let s = default_1000();
        let at2 = s.alpha(1000) * s.alpha(1000);
        assert!(at2 < 1e-4, "alpha_T^2 = {at2}");
        assert!(at2 > 0.0);
        assert!(s.snr(1000).unwrap() > 0.0);
    }

    #[test]
    fn snr_at_half_signal_is_one() {
        // alpha_t^2 = 0.5 -> SNR exactly 1; find the crossing and check the
        // formula algebraically on both series values.
        let s = default_1000();
        for t in 1..=s.t_max() {
            let a2 = s.alpha(t) * s.alpha(t);
            let snr = s.snr(t).unwrap();
            assert!((snr - a2 / (1.0 - a2)).abs() <= 1e-12 * snr.max(1.0));
        }
    }

    #[test]
    fn snr_rejects_t0() {
        let s = default_1000();
        assert!(s.snr(0).is_err());
    }

    #[test]
    fn zero_terminal_rescale_pins_endpoints() {
        let s = default_1000();
        let z = s.rescale_zero_terminal_snr().unwrap();
        assert_eq!(z.mode(), ScheduleMode::ZeroTerminalSnr);
        assert_eq!(z.alpha(1000), 0.0);
        assert_eq!(z.snr(1000).unwrap(), 0.0);
        assert!((z.alpha(1) - s.alpha(1)).abs() < 1e-12, "alpha_1 not preserved");
        assert_eq!(z.alpha(0), 1.0);
        for t in 1..=z.t_max() {
            assert!(z.alpha(t) < z.alpha(t - 1), "alpha' not decreasing at {t}");
        }
        // Spot-check interior values against a direct evaluation of the
        // affine map.
        let a1 = s.alpha(1);
        let at = s.alpha(1000);
        for t in [137usize, 512, 901] {
            let direct = (s.alpha(t) - at) * a1 / (a1 - at);
            assert!((z.alpha(t) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn rescale_rejects_degenerate_and_wrong_mode() {
        let s = default_1000();
        let z = s.rescale_zero_terminal_snr().unwrap();
        assert!(z.rescale_zero_terminal_snr().is_err());
    }

    #[test]
    fn snr_strictly_decreasing_both_modes() {
        for sched in [default_1000(), default_1000().rescale_zero_terminal_snr().unwrap()] {
            let mut prev = f64::INFINITY;
            for t in 1..=sched.t_max() {
                let snr = sched.snr(t).unwrap();
                assert!(snr < prev, "snr not strictly decreasing at t={t}");
                prev = snr;
            }
        }
    }

    #[test]
    fn transition_identities_exhaustive_t50() {
        let s = NoiseSchedule::linear(50, 1e-4, 2e-2).unwrap();
        for t in 1..=50usize {
            for ss in 0..t {
                let tr = s.transition(t, ss).unwrap();
                let comp = tr.alpha_ts * s.alpha(ss);
                assert!(
                    (comp - s.alpha(t)).abs() < 1e-12,
                    "composition identity failed at ({t},{ss})"
                );
                let var = tr.sigma2_ts + tr.alpha_ts * tr.alpha_ts * s.sigma2(ss);
                assert!(
                    (var - s.sigma2(t)).abs() < 1e-12,
                    "variance identity failed at ({t},{ss})"
                );
                assert!(tr.sigma2_ts >= 0.0);
            }
        }
    }

    #[test]
    fn transition_of_equal_alphas_degenerates() {
        // Hypothetical equal entries: alpha ratio 1, variance difference.
        let s = default_1000();
        let tr = s.transition(5, 4).unwrap();
        let manual_sigma = s.sigma2(5) - tr.alpha_ts * tr.alpha_ts * s.sigma2(4);
        assert!((tr.sigma2_ts - manual_sigma).abs() < 1e-15);
        assert!(s.transition(4, 4).is_err());
        assert!(s.transition(3, 4).is_err());
    }

    #[test]
    fn q_sample_endpoints() {
        let s = default_1000().rescale_zero_terminal_snr().unwrap();
        let mut rng = StreamRng::new(5, 0);
        let x0 = Tensor::randn(&[4, 4], &mut rng);
        let noise = Tensor::randn(&[4, 4], &mut rng);
        let at0 = s.q_sample(&x0, 0, &noise).unwrap();
        assert_eq!(at0.data(), x0.data());
        let at_t = s.q_sample(&x0, s.t_max(), &noise).unwrap();
        assert_eq!(at_t.data(), noise.data());
    }

    #[test]
    fn q_sample_shape_mismatch_errors() {
        let s = default_1000();
        let x0 = Tensor::zeros(&[2, 2]);
        let noise = Tensor::zeros(&[4]);
        assert!(s.q_sample(&x0, 3, &noise).is_err());
    }

    #[test]
    fn q_sample_moments_match_monte_carlo() {
        // Fixed x0 and t: over many draws the per-element mean approaches
        // alpha_t * x0 and the variance approaches 1 - alpha_t^2.
        let s = default_1000();
        let t = 600usize;
        let x0 = Tensor::new(&[4], vec![0.8, -0.3, 1.2, 0.0]).unwrap();
        let n = 100_000usize;
        let mut rng = StreamRng::new(99, 7);
        let mut sum = [0.0f64; 4];
        let mut sumsq = [0.0f64; 4];
        for _ in 0..n {
            let noise = Tensor::randn(&[4], &mut rng);
            let xt = s.q_sample(&x0, t, &noise).unwrap();
            for (i, &v) in xt.data().iter().enumerate() {
                sum[i] += v as f64;
                sumsq[i] += (v as f64) * (v as f64);
            }
        }
        let var_expect = 1.0 - s.alpha(t) * s.alpha(t);
        let se_mean = (var_expect / n as f64).sqrt();
        let se_var = var_expect * (2.0f64 / n as f64).sqrt();
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sumsq[i] / n as f64 - mean * mean;
            let expect = s.alpha(t) * x0.data()[i] as f64;
            assert!(
                (mean - expect).abs() < 3.0 * se_mean,
                "mean[{i}] {mean} vs {expect}"
            );
            assert!(
                (var - var_expect).abs() < 3.0 * se_var,
                "var[{i}] {var} vs {var_expect}"
            );
        }
    }

    #[test]
    fn v_conversions_roundtrip() {
        let s = NoiseSchedule::linear(50, 1e-4, 2e-2)
            .unwrap()
            .rescale_zero_terminal_snr()
            .unwrap();
        let mut rng = StreamRng::new(3, 2);
        for t in 0..=50usize {
            let x0 = Tensor::randn(&[3, 5], &mut rng);
            let eps = Tensor::randn(&[3, 5], &mut rng);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let v = s.v_from(t, &x0, &eps).unwrap();
            let eps_back = s.eps_from_v(t, &xt, &v).unwrap();
            let x0_back = s.x0_from_v(t, &xt, &v).unwrap();
            assert!(eps_back.max_abs_diff(&eps).unwrap() < 1e-6, "eps roundtrip at {t}");
            assert!(x0_back.max_abs_diff(&x0).unwrap() < 1e-6, "x0 roundtrip at {t}");
        }
    }

    #[test]
    fn v_endpoint_identities() {
        let s = default_1000().rescale_zero_terminal_snr().unwrap();
        let mut rng = StreamRng::new(8, 0);
        let x0 = Tensor::randn(&[6], &mut rng);
        let eps = Tensor::randn(&[6], &mut rng);
        // alpha = 1 at t=0 -> v = eps.
        let v0 = s.v_from(0, &x0, &eps).unwrap();
        assert_eq!(v0.data(), eps.data());
        // alpha = 0 at t=T -> v = -x0.
        let vt = s.v_from(s.t_max(), &x0, &eps).unwrap();
        let neg: Vec<f32> = x0.data().iter().map(|&v| -v).collect();
        assert_eq!(vt.data(), neg.as_slice());
    }

    #[test]
    fn descriptor_roundtrip_verifies_alpha() {
        let s = NoiseSchedule::linear_zero_terminal(256, 1e-4, 2e-2).unwrap();
        let d = s.descriptor();
        let r = d.rebuild().unwrap();
        assert_eq!(r.t_max(), 256);
        assert_eq!(r.mode(), ScheduleMode::ZeroTerminalSnr);
        let mut bad = d;
        bad.alpha_terminal = 0.5;
        assert!(bad.rebuild().is_err());
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(NoiseSchedule::linear(1, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(100, 0.0, 2e-2).is_err());
        assert!(NoiseSchedule::linear(100, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(100, 0.5, 1.0).is_err());
    }
}
