//! In-process property suites: schedule algebra, conversion round-trips,
//! sampler oracles, gradient checks, adaptor shape law, determinism. The
//! CLI `selftest` subcommand runs these and fails on any red entry.

use crate::adaptor::Adaptor;
use crate::codec::{Codec, CodecDims};
use crate::diffusion::{sample, DenoiserFn, SamplerConfig, SamplerKind};
use crate::error::Result;
use crate::oracle::{gaussian_optimal_v, gradient_check};
use crate::propnet::{PropNet, PropNetDims, SpatialCond};
use crate::rng::StreamRng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ParamStore, Tape, Tensor};

pub struct SelftestEntry {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub struct SelftestReport {
    pub entries: Vec<SelftestEntry>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

fn check(entries: &mut Vec<SelftestEntry>, name: &str, run: impl FnOnce() -> Result<String>) {
    match run() {
        Ok(detail) => entries.push(SelftestEntry {
            name: name.to_string(),
            passed: true,
            detail,
        }),
        Err(e) => entries.push(SelftestEntry {
            name: name.to_string(),
            passed: false,
            detail: e.to_string(),
        }),
    }
}

fn ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(crate::error::Error::contract(msg.to_string()))
    }
}

struct UnitGaussianDenoiser {
    sched: NoiseSchedule,
}

impl DenoiserFn<()> for UnitGaussianDenoiser {
    fn predict_v(&self, x_t: &Tensor, t: usize, _c: &()) -> Result<Tensor> {
        Ok(gaussian_optimal_v(x_t, self.sched.alpha(t), 0.0, 1.0))
    }
}

fn moments(x: &Tensor) -> (f64, f64) {
    let n = x.numel() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x
        .data()
        .iter()
        .map(|&v| (v as f64 - mean) * (v as f64 - mean))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

pub fn run_selftest(seed: u64) -> SelftestReport {
    let mut entries = Vec::new();

    check(&mut entries, "schedule endpoints and monotonicity", || {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2)?;
        ensure(s.alpha(0) == 1.0 && s.sigma2(0) == 0.0, "alpha_0/sigma2_0 endpoints")?;
        for t in 1..=1000usize {
            ensure(s.alpha(t) < s.alpha(t - 1), "alpha strictly decreasing")?;
            ensure(
                (s.alpha(t) * s.alpha(t) + s.sigma2(t) - 1.0).abs() < 1e-6,
                "unit identity",
            )?;
        }
        let snr1 = s.snr(1)?;
        ensure(
            (snr1 - (1.0 - 1e-4) / 1e-4).abs() / snr1 < 1e-9,
            "snr(1) against direct evaluation",
        )?;
        Ok(format!("snr(1) = {snr1:.1}"))
    });

    check(&mut entries, "zero-terminal rescale exactness", || {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2)?;
        let z = s.rescale_zero_terminal_snr()?;
        ensure(z.snr(1000)? <= 1e-12, "snr(T) = 0")?;
        ensure((z.alpha(1) - s.alpha(1)).abs() <= 1e-12, "alpha_1 preserved")?;
        let mut prev = f64::INFINITY;
        for t in 1..=1000usize {
            let snr = z.snr(t)?;
            ensure(snr < prev, "snr strictly decreasing")?;
            prev = snr;
        }
        Ok("snr(T) = 0, alpha_1 preserved".to_string())
    });

    check(&mut entries, "transition identities (T=50, exhaustive)", || {
        let s = NoiseSchedule::linear(50, 1e-4, 2e-2)?;
        let mut worst = 0.0f64;
        for t in 1..=50usize {
            for ss in 0..t {
                let tr = s.transition(t, ss)?;
                let e1 = (tr.alpha_ts * s.alpha(ss) - s.alpha(t)).abs();
                let e2 =
                    (tr.sigma2_ts + tr.alpha_ts * tr.alpha_ts * s.sigma2(ss) - s.sigma2(t)).abs();
                worst = worst.max(e1).max(e2);
            }
        }
        ensure(worst < 1e-12, "pairwise identities within 1e-12")?;
        Ok(format!("worst residual {worst:.2e}"))
    });

    check(&mut entries, "v conversions round-trip (100 tensors x all t)", || {
        let s = NoiseSchedule::linear_zero_terminal(50, 1e-4, 2e-2)?;
        let mut rng = StreamRng::new(seed, 100);
        let mut worst = 0.0f32;
        for i in 0..100usize {
            let t = i % 51;
            let x0 = Tensor::randn(&[16], &mut rng);
            let eps = Tensor::randn(&[16], &mut rng);
            let xt = s.q_sample(&x0, t, &eps)?;
            let v = s.v_from(t, &x0, &eps)?;
            worst = worst
                .max(s.eps_from_v(t, &xt, &v)?.max_abs_diff(&eps)?)
                .max(s.x0_from_v(t, &xt, &v)?.max_abs_diff(&x0)?);
        }
        ensure(worst < 1e-6, "round-trips within 1e-6")?;
        Ok(format!("worst deviation {worst:.2e}"))
    });

    check(&mut entries, "forward-sample moments (monte carlo)", || {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2)?;
        let t = 500usize;
        let x0 = Tensor::full(&[1], 0.7);
        let n = 20_000usize;
        let mut rng = StreamRng::new(seed, 101);
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let xt = s.q_sample(&x0, t, &Tensor::randn(&[1], &mut rng))?;
            let v = xt.data()[0] as f64;
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let m_expect = s.alpha(t) * 0.7;
        let v_expect = 1.0 - s.alpha(t) * s.alpha(t);
        let se_m = (v_expect / n as f64).sqrt();
        let se_v = v_expect * (2.0 / n as f64).sqrt();
        ensure((mean - m_expect).abs() < 3.0 * se_m, "mean within 3 SE")?;
        ensure((var - v_expect).abs() < 3.0 * se_v, "variance within 3 SE")?;
        Ok(format!("mean {mean:.4} (expect {m_expect:.4})"))
    });

    check(&mut entries, "gaussian oracle, ancestral sampler (T=100)", || {
        let sched = NoiseSchedule::linear_zero_terminal(100, 1e-4, 2e-2)?;
        let denoiser = UnitGaussianDenoiser { sched: sched.clone() };
        let cfg = SamplerConfig::uniform(SamplerKind::Ancestral, 100, 100)?;
        let out = sample(&denoiser, &sched, &cfg, &[10_000], &(), &mut StreamRng::new(seed, 102))?;
        let (mean, std) = moments(&out);
        ensure(mean.abs() < 0.05, "|mean| < 0.05")?;
        ensure((std - 1.0).abs() < 0.05, "|std - 1| < 0.05")?;
        Ok(format!("mean {mean:.4}, std {std:.4}"))
    });

    check(&mut entries, "gaussian oracle, ddim sampler (50 and 20 steps)", || {
        let sched = NoiseSchedule::linear_zero_terminal(100, 1e-4, 2e-2)?;
        let denoiser = UnitGaussianDenoiser { sched: sched.clone() };
        let mut errs = Vec::new();
        for steps in [20usize, 50] {
            let cfg = SamplerConfig::uniform(SamplerKind::Ddim, steps, 100)?;
            let out =
                sample(&denoiser, &sched, &cfg, &[10_000], &(), &mut StreamRng::new(seed, 103))?;
            let (mean, std) = moments(&out);
            if steps == 50 {
                ensure(mean.abs() < 0.05, "|mean| < 0.05 at 50 steps")?;
                ensure((std - 1.0).abs() < 0.05, "|std - 1| < 0.05 at 50 steps")?;
            }
            errs.push(mean.abs().max((std - 1.0).abs()));
        }
        ensure(errs[1] <= errs[0] + 1e-3, "more steps no worse")?;
        Ok(format!("20-step err {:.4}, 50-step err {:.4}", errs[0], errs[1]))
    });

    check(&mut entries, "gradient check: codec blocks", || {
        let report = gradcheck_codec(seed, 3)?;
        Ok(report)
    });

    check(&mut entries, "gradient check: adaptor fusion", || {
        let report = gradcheck_adaptor(seed, 3)?;
        Ok(report)
    });

    check(&mut entries, "gradient check: denoiser block", || {
        let report = gradcheck_denoiser(seed, 3)?;
        Ok(report)
    });

    check(&mut entries, "adaptor shape law and passthrough", || {
        let mut ps = ParamStore::new();
        let adaptor = Adaptor::build(&mut ps, 64, seed, false)?;
        let mut rng = StreamRng::new(seed, 104);
        for h in [4usize, 8, 16, 32] {
            let mut tape = Tape::new(false);
            let class = Tensor::randn(&[1, 64], &mut rng);
            let patches = Tensor::randn(&[1, 64, 8, 8], &mut rng);
            let latent = Tensor::randn(&[1, 4, h, h], &mut rng);
            let out = adaptor.fuse_batch(&ps, &mut tape, &class, &patches, &latent)?;
            ensure(
                out.shape() == [1, 1 + (h / 2) * (h / 2), 64],
                "token count 1 + hw/4",
            )?;
            ensure(
                out.data()[..64] == *class.data(),
                "class token bit-exact passthrough",
            )?;
        }
        Ok("h in {4,8,16,32}".to_string())
    });

    check(&mut entries, "determinism under fixed seeds", || {
        let sched = NoiseSchedule::linear_zero_terminal(64, 1e-4, 2e-2)?;
        let denoiser = UnitGaussianDenoiser { sched: sched.clone() };
        let cfg = SamplerConfig::uniform(SamplerKind::Ddim, 8, 64)?;
        let a = sample(&denoiser, &sched, &cfg, &[64], &(), &mut StreamRng::new(seed, 105))?;
        let b = sample(&denoiser, &sched, &cfg, &[64], &(), &mut StreamRng::new(seed, 105))?;
        ensure(a.data() == b.data(), "sampler bit-identical")?;
        let x = Tensor::randn(&[32], &mut StreamRng::new(seed, 106));
        let y = Tensor::randn(&[32], &mut StreamRng::new(seed, 106));
        ensure(x.data() == y.data(), "draws bit-identical")?;
        Ok("bit-identical reruns".to_string())
    });

    SelftestReport { entries }
}

// ── gradient-check harnesses over the real blocks at reduced dims ────

pub fn gradcheck_codec(seed: u64, seeds: u64) -> Result<String> {
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let mut ps = ParamStore::new();
        let codec = Codec::build(&mut ps, CodecDims { widths: [4, 6, 8] }, seed + s, true);
        let mut rng = StreamRng::new(seed + s, 200);
        let mut tape = Tape::new(true);
        let x = tape.leaf(&Tensor::randn(&[1, 3, 16, 16], &mut rng).scaled(0.5)?, true);
        let z = codec.encode_batch(&ps, &mut tape, &x)?;
        let y = codec.decode_batch(&ps, &mut tape, &z, true)?;
        let loss = tape.mse_loss(&y, &x)?;
        let grads = tape.backward(&loss)?;
        let mut leaves = vec![("input".to_string(), x)];
        leaves.extend(tape.tracked_params(&ps));
        let refs: Vec<(&str, &Tensor)> =
            leaves.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let report = gradient_check(&tape, &loss, &refs, &grads)?;
        ensure(report.passes(1e-3), &format!("codec gradcheck seed {s}: {report:?}"))?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(format!("{seeds} seeds, worst rel err {worst:.2e}"))
}

pub fn gradcheck_adaptor(seed: u64, seeds: u64) -> Result<String> {
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let mut ps = ParamStore::new();
        let adaptor = Adaptor::build(&mut ps, 8, seed + s, true)?;
        let mut rng = StreamRng::new(seed + s, 201);
        let mut tape = Tape::new(true);
        let class = tape.leaf(&Tensor::randn(&[1, 8], &mut rng), true);
        let patches = tape.leaf(&Tensor::randn(&[1, 8, 4, 4], &mut rng), true);
        let latent = tape.leaf(&Tensor::randn(&[1, 4, 4, 4], &mut rng), true);
        let tokens = adaptor.fuse_batch(&ps, &mut tape, &class, &patches, &latent)?;
        let sq = tape.mul(&tokens, &tokens)?;
        let loss = tape.mean_all(&sq)?;
        let grads = tape.backward(&loss)?;
        let mut leaves = vec![
            ("class".to_string(), class),
            ("patches".to_string(), patches),
            ("latent".to_string(), latent),
        ];
        leaves.extend(tape.tracked_params(&ps));
        let refs: Vec<(&str, &Tensor)> =
            leaves.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let report = gradient_check(&tape, &loss, &refs, &grads)?;
        ensure(report.passes(1e-3), &format!("adaptor gradcheck seed {s}: {report:?}"))?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(format!("{seeds} seeds, worst rel err {worst:.2e}"))
}

pub fn gradcheck_denoiser(seed: u64, seeds: u64) -> Result<String> {
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let mut ps = ParamStore::new();
        let dims = PropNetDims {
            base: 6,
            mid: 8,
            token_dim: 8,
            attn_dim: 8,
            time_dim: 8,
        };
        let net = PropNet::build(&mut ps, dims, seed + s, true);
        let mut rng = StreamRng::new(seed + s, 202);
        let mut tape = Tape::new(true);
        let z_t = tape.leaf(&Tensor::randn(&[1, 4, 4, 4], &mut rng), true);
        let spatial = SpatialCond {
            target_depth: Tensor::from_parts(vec![1, 1, 4, 4], {
                let mut r2 = StreamRng::new(seed + s, 203);
                r2.fill_uniform(16, 0.0, 1.0)
            }),
            prev_latent: Tensor::randn(&[1, 4, 4, 4], &mut rng),
            prev_depth: Tensor::from_parts(vec![1, 1, 4, 4], {
                let mut r2 = StreamRng::new(seed + s, 204);
                r2.fill_uniform(16, 0.0, 1.0)
            }),
        };
        let tokens = tape.leaf(&Tensor::randn(&[1, 5, 8], &mut rng), true);
        let v = net.denoise(&ps, &mut tape, &z_t, &[7], &spatial, &tokens)?;
        let sq = tape.mul(&v, &v)?;
        let loss = tape.mean_all(&sq)?;
        let grads = tape.backward(&loss)?;
        let mut leaves = vec![("z_t".to_string(), z_t), ("tokens".to_string(), tokens)];
        leaves.extend(tape.tracked_params(&ps));
        let refs: Vec<(&str, &Tensor)> =
            leaves.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let report = gradient_check(&tape, &loss, &refs, &grads)?;
        ensure(report.passes(1e-3), &format!("denoiser gradcheck seed {s}: {report:?}"))?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(format!("{seeds} seeds, worst rel err {worst:.2e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_is_green() {
        let report = run_selftest(7);
        for e in &report.entries {
            assert!(e.passed, "{}: {}", e.name, e.detail);
        }
    }
}
