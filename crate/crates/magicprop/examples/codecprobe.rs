//! Scratch probe: codec training speed and PSNR trajectory.
use magicprop::codec::{psnr, train_codec, CodecDims, CodecTrainOptions};
use magicprop::rng::StreamRng;
use magicprop::synthdata::{random_spec, render_clip, restyle_clip, CorpusConfig, StyleId};
use std::time::Instant;

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "main".into());
    let cfg = CorpusConfig { num_clips: 60, frames_per_clip: 8, height: 64, width: 64 };
    if mode == "overfit" {
        // Capacity probe: memorize 8 frames.
        let clip = render_clip(&random_spec(&cfg, 321, 0).unwrap()).unwrap();
        let frames: Vec<_> = clip.frames.clone();
        let opts = CodecTrainOptions { epochs: 6, steps_per_epoch: 150, batch_size: 8, lr: 2e-3, seed: 7 };
        let t0 = Instant::now();
        let (ps, codec, hist) = train_codec(&frames, CodecDims::default(), &opts).unwrap();
        let mut worst = f64::INFINITY;
        for f in &frames {
            let r = codec.decode(&ps, &codec.encode(&ps, f).unwrap()).unwrap();
            worst = worst.min(psnr(f, &r).unwrap());
        }
        println!("overfit: {:.0}s, last-loss {:.5}, worst PSNR {:.2} dB", t0.elapsed().as_secs_f64(), hist.epoch_loss.last().unwrap(), worst);
        return;
    }
    let mut frames = Vec::new();
    let mut rng = StreamRng::new(5, 1);
    for i in 0..cfg.num_clips {
        let clip = render_clip(&random_spec(&cfg, 11, i as u64).unwrap()).unwrap();
        for style in StyleId::ALL {
            if style == StyleId::Identity || rng.uniform(0.0, 1.0) < 0.4 {
                let styled = restyle_clip(&clip, style).unwrap();
                frames.extend(styled.frames.into_iter());
            }
        }
    }
    let holdout: Vec<_> = (0..6).map(|i| {
        let c = render_clip(&random_spec(&cfg, 999, i).unwrap()).unwrap();
        c.frames[0].clone()
    }).collect();
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(325);
    let opts = CodecTrainOptions { epochs: 4, steps_per_epoch: steps, batch_size: 16, lr: 2e-3, seed: 3 };
    let t0 = Instant::now();
    let (ps, codec, hist) = train_codec(&frames, CodecDims::default(), &opts).unwrap();
    println!("{} steps in {:.0}s, losses {:?}", 4*steps, t0.elapsed().as_secs_f64(), hist.epoch_loss);
    let mut ps_mean = 0.0;
    let mut ps_min = f64::INFINITY;
    for f in &holdout {
        let p = psnr(f, &codec.decode(&ps, &codec.encode(&ps, f).unwrap()).unwrap()).unwrap();
        ps_mean += p;
        ps_min = ps_min.min(p);
    }
    println!("holdout PSNR mean {:.2} dB min {:.2} dB, latent_scale {:.3}", ps_mean / holdout.len() as f64, ps_min, codec.latent_scale);
}
