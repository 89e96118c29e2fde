//! Training entry points over an on-disk corpus: codec, reference encoder,
//! and the joint adaptor + denoiser propagation training with teacher
//! forcing.
//!
//! Every random choice derives from (config seed, purpose tag, step), so
//! any run — and any resumed run — replays bit-identically.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::{
    load_group, load_optimizer, read_checkpoint, save_checkpoint, TrainedFlags,
};
use super::config::TrainConfig;
use crate::adaptor::{train_reference_encoder, EncoderTrainOptions, RefEncoderDims};
use crate::codec::{train_codec, CodecDims, CodecTrainOptions, Frame};
use crate::diffusion::training_loss;
use crate::error::{Error, Result};
use crate::propnet::{depth_to_latent_size, SpatialCond};
use crate::rng::{indexed_stream, StreamRng};
use crate::synthdata::{
    list_clips, load_clip, random_spec, render_clip, restyle_frame, sample_triplet_indices,
    restyle_clip, CorpusConfig, StyleId, VideoClip,
};
use crate::tensor::{adam_step, AdamHyper, AdamState, Tape, Tensor};

/// Stream offset separating evaluation/validation scenes from corpus
/// scenes that share a seed.
pub const HOLDOUT_SCENE_OFFSET: u64 = 1 << 40;

pub fn load_corpus(dir: &Path) -> Result<Vec<VideoClip>> {
    let dirs = list_clips(dir)?;
    if dirs.is_empty() {
        return Err(Error::contract(format!(
            "no clips under {}; run gen-data first",
            dir.display()
        )));
    }
    dirs.iter().map(|d| load_clip(d)).collect()
}

/// Fresh clips disjoint from the corpus (offset seed streams).
pub fn holdout_clips(cfg: &TrainConfig, count: usize, frames: usize, tag: u64) -> Result<Vec<VideoClip>> {
    let data = CorpusConfig {
        frames_per_clip: frames,
        ..cfg.data.clone()
    };
    (0..count)
        .map(|i| {
            let spec = random_spec(
                &data,
                cfg.seed,
                HOLDOUT_SCENE_OFFSET + tag * 0x10000 + i as u64,
            )?;
            render_clip(&spec)
        })
        .collect()
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{r}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

// ── codec ────────────────────────────────────────────────────────────

/// Assemble codec training frames: every corpus frame under identity plus
/// a seeded fraction of each restyle variant, so the latent space covers
/// restyled appearances too.
pub fn codec_training_frames(cfg: &TrainConfig, clips: &[VideoClip]) -> Result<Vec<Frame>> {
    let mut rng = StreamRng::new(cfg.seed, indexed_stream("codec-data", 0));
    let mut frames = Vec::new();
    for clip in clips {
        for style in StyleId::ALL {
            if style == StyleId::Identity {
                frames.extend(clip.frames.iter().cloned());
            } else if rng.uniform(0.0, 1.0) < cfg.codec.style_fraction {
                let styled = restyle_clip(clip, style)?;
                frames.extend(styled.frames);
            }
        }
    }
    Ok(frames)
}

pub fn run_train_codec(cfg: &TrainConfig) -> Result<(PathBuf, Vec<f64>)> {
    let clips = load_corpus(&cfg.corpus_dir)?;
    let frames = codec_training_frames(cfg, &clips)?;
    let opts = CodecTrainOptions {
        epochs: cfg.codec.epochs,
        steps_per_epoch: cfg.codec.steps_per_epoch,
        batch_size: cfg.codec.batch_size,
        lr: cfg.codec.lr,
        seed: cfg.seed,
    };
    let (store, codec, history) = train_codec(
        &frames,
        CodecDims {
            widths: cfg.codec.widths,
        },
        &opts,
    )?;
    let path = cfg.codec_checkpoint();
    save_checkpoint(
        &path,
        &store,
        cfg,
        None,
        codec.latent_scale,
        TrainedFlags {
            codec: true,
            ..Default::default()
        },
        None,
    )?;
    let rows: Vec<String> = history
        .epoch_loss
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{e},{l}"))
        .collect();
    write_csv(&cfg.artifacts_dir.join("codec_train_log.csv"), "epoch,loss", &rows)?;
    Ok((path, history.epoch_loss))
}

// ── reference encoder ───────────────────────────────────────────────

pub fn run_train_encoder(cfg: &TrainConfig) -> Result<(PathBuf, f64)> {
    let clips = load_corpus(&cfg.corpus_dir)?;
    let opts = EncoderTrainOptions {
        steps: cfg.encoder.steps,
        batch_size: cfg.encoder.batch_size,
        lr: cfg.encoder.lr,
        seed: cfg.seed,
    };
    let (store, enc, history) = train_reference_encoder(
        &clips,
        RefEncoderDims {
            embed: cfg.encoder.embed,
            widths: cfg.encoder.widths,
        },
        &opts,
    )?;
    debug_assert!(enc.trained);
    let path = cfg.encoder_checkpoint();
    save_checkpoint(
        &path,
        &store,
        cfg,
        None,
        1.0,
        TrainedFlags {
            encoder: true,
            ..Default::default()
        },
        None,
    )?;
    let rows: Vec<String> = history
        .loss
        .iter()
        .enumerate()
        .map(|(s, l)| format!("{s},{l}"))
        .collect();
    write_csv(&cfg.artifacts_dir.join("encoder_train_log.csv"), "step,loss", &rows)?;
    Ok((path, history.final_accuracy))
}

// ── propagation training ────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct PropTrainHistory {
    /// (step, batch loss)
    pub steps: Vec<(u64, f64)>,
    /// (step, validation v-loss)
    pub val: Vec<(u64, f64)>,
}

impl PropTrainHistory {
    pub fn initial_val(&self) -> Option<f64> {
        self.val.first().map(|&(_, v)| v)
    }

    pub fn final_val(&self) -> Option<f64> {
        self.val.last().map(|&(_, v)| v)
    }

    /// Moving average of the step losses over a window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if self.steps.len() < window {
            return vec![];
        }
        (0..=self.steps.len() - window)
            .map(|i| {
                self.steps[i..i + window]
                    .iter()
                    .map(|&(_, l)| l)
                    .sum::<f64>()
                    / window as f64
            })
            .collect()
    }
}

pub struct PropTrainOutput {
    pub checkpoint: PathBuf,
    pub history: PropTrainHistory,
}

type LatentKey = (usize, StyleId, usize);

struct LatentCache {
    map: HashMap<LatentKey, Tensor>,
}

/// One sampled training example before tensor assembly.
struct DrawnSample {
    clip: usize,
    style: StyleId,
    reference: usize,
    previous: usize,
    target: usize,
    t: usize,
}

/// Fixed validation example with frozen noise.
struct ValSample {
    drawn: DrawnSample,
    noise: Tensor,
}

pub fn train_prop(cfg: &TrainConfig, resume: bool) -> Result<PropTrainOutput> {
    // Prerequisites, named explicitly.
    let codec_path = cfg.codec_checkpoint();
    if !codec_path.exists() {
        return Err(Error::contract(format!(
            "missing codec checkpoint {}; run train-codec first",
            codec_path.display()
        )));
    }
    let encoder_path = cfg.encoder_checkpoint();
    if !encoder_path.exists() {
        return Err(Error::contract(format!(
            "missing encoder checkpoint {}; run train-encoder first",
            encoder_path.display()
        )));
    }
    let clips = load_corpus(&cfg.corpus_dir)?;

    let (mut store, mut codec, mut encoder, adaptor, denoiser) =
        super::checkpoint::build_joint_store(cfg, true)?;
    let codec_raw = read_checkpoint(&codec_path)?;
    if !codec_raw.header.trained.codec {
        return Err(Error::contract("codec checkpoint is untrained"));
    }
    load_group(&codec_raw, &mut store, "codec.")?;
    codec.latent_scale = codec_raw.header.latent_scale;
    let enc_raw = read_checkpoint(&encoder_path)?;
    if !enc_raw.header.trained.encoder {
        return Err(Error::contract("encoder checkpoint is untrained"));
    }
    load_group(&enc_raw, &mut store, "refenc.")?;
    encoder.trained = true;

    let sched = cfg.schedule.build()?;
    let mut state = AdamState::new(&store);
    let mut start_step = 0u64;
    let out_path = cfg.prop_checkpoint();
    if resume {
        if !out_path.exists() {
            return Err(Error::contract(format!(
                "cannot resume: {} does not exist",
                out_path.display()
            )));
        }
        let raw = read_checkpoint(&out_path)?;
        load_group(&raw, &mut store, "adaptor.")?;
        load_group(&raw, &mut store, "denoiser.")?;
        load_optimizer(&raw, &store, &mut state)?;
        start_step = state.step;
    }

    let mut cache = LatentCache {
        map: HashMap::new(),
    };
    let mut depth_cache: HashMap<(usize, usize), Tensor> = HashMap::new();

    // Fixed validation set from fresh scenes.
    let val_clips = holdout_clips(cfg, cfg.prop.val_clips.max(1), cfg.data.frames_per_clip, 1)?;
    let mut val_rng = StreamRng::new(cfg.seed, indexed_stream("prop-val", 0));
    let mut val_set = Vec::new();
    for (ci, clip) in val_clips.iter().enumerate() {
        for style in [StyleId::Identity, StyleId::SwapRb, StyleId::Hue180] {
            for _ in 0..3 {
                let idx = sample_triplet_indices(clip.len(), &mut val_rng)?;
                let t = 1 + val_rng.uniform_usize(sched.t_max());
                val_set.push(ValSample {
                    drawn: DrawnSample {
                        clip: ci,
                        style,
                        reference: idx.reference,
                        previous: idx.previous,
                        target: idx.target,
                        t,
                    },
                    noise: Tensor::randn(&[4, 8, 8], &mut val_rng),
                });
            }
        }
    }

    let mut history = PropTrainHistory::default();

    // Assemble a batch of drawn samples into tensors, filling caches with
    // one batched encode per step. `clip_set` selects corpus vs val clips.
    let assemble = |samples: &[DrawnSample],
                    clip_set: &[VideoClip],
                    cache: &mut LatentCache,
                    depth_cache: &mut HashMap<(usize, usize), Tensor>,
                    store: &crate::tensor::ParamStore,
                    val: bool|
     -> Result<(Tensor, SpatialCond, Tensor, Tensor)> {
        // Latent cache misses, batched through the codec. Validation clips
        // use a disjoint key space (clip index offset).
        let key_of = |s: &DrawnSample, frame: usize| -> LatentKey {
            let base = if val { 1 << 32 } else { 0 };
            (base + s.clip, s.style, frame)
        };
        let mut miss_keys: Vec<LatentKey> = Vec::new();
        let mut miss_frames: Vec<Frame> = Vec::new();
        for s in samples {
            for frame in [s.reference, s.previous, s.target] {
                let key = key_of(s, frame);
                if !cache.map.contains_key(&key) && !miss_keys.contains(&key) {
                    let styled = restyle_frame(&clip_set[s.clip].frames[frame], s.style)?;
                    miss_keys.push(key);
                    miss_frames.push(styled);
                }
            }
        }
        if !miss_keys.is_empty() {
            let mut tape = Tape::new(false);
            let stacked =
                Tensor::stack(&miss_frames.iter().map(|f| f.tensor()).collect::<Vec<_>>())?;
            let encoded = codec.encode_batch(store, &mut tape, &stacked)?;
            for (i, key) in miss_keys.iter().enumerate() {
                cache.map.insert(*key, encoded.select0(i)?);
            }
        }
        let latent = |s: &DrawnSample, frame: usize| cache.map[&key_of(s, frame)].clone();
        let depth = |s: &DrawnSample,
                     frame: usize,
                     depth_cache: &mut HashMap<(usize, usize), Tensor>|
         -> Result<Tensor> {
            let base = if val { 1 << 32 } else { 0 };
            if let Some(d) = depth_cache.get(&(base + s.clip, frame)) {
                return Ok(d.clone());
            }
            let d = depth_to_latent_size(&clip_set[s.clip].depths[frame])?;
            depth_cache.insert((base + s.clip, frame), d.clone());
            Ok(d)
        };

        let mut x0_rows = Vec::new();
        let mut prev_lat = Vec::new();
        let mut t_depth = Vec::new();
        let mut p_depth = Vec::new();
        let mut ref_frames = Vec::new();
        for s in samples {
            x0_rows.push(latent(s, s.target));
            prev_lat.push(latent(s, s.previous));
            let td = depth(s, s.target, depth_cache)?;
            let pd = depth(s, s.previous, depth_cache)?;
            t_depth.push(td);
            p_depth.push(pd);
            ref_frames.push(restyle_frame(&clip_set[s.clip].frames[s.reference], s.style)?);
        }
        let x0 = Tensor::stack(&x0_rows.iter().collect::<Vec<_>>())?;
        let spatial = SpatialCond {
            target_depth: Tensor::stack(&t_depth.iter().collect::<Vec<_>>())?,
            prev_latent: Tensor::stack(&prev_lat.iter().collect::<Vec<_>>())?,
            prev_depth: Tensor::stack(&p_depth.iter().collect::<Vec<_>>())?,
        };
        let refs = Tensor::stack(&ref_frames.iter().map(|f| f.tensor()).collect::<Vec<_>>())?;
        let ref_latents = Tensor::stack(
            &samples
                .iter()
                .map(|s| cache.map[&key_of(s, s.reference)].clone())
                .collect::<Vec<_>>()
                .iter()
                .collect::<Vec<_>>(),
        )?;
        Ok((x0, spatial, refs, ref_latents))
    };

    // Validation v-loss with frozen noise/t, eval mode.
    let run_val = |cache: &mut LatentCache,
                   depth_cache: &mut HashMap<(usize, usize), Tensor>,
                   store: &crate::tensor::ParamStore|
     -> Result<f64> {
        let samples: Vec<&DrawnSample> = val_set.iter().map(|v| &v.drawn).collect();
        let drawn: Vec<DrawnSample> = samples
            .iter()
            .map(|s| DrawnSample {
                clip: s.clip,
                style: s.style,
                reference: s.reference,
                previous: s.previous,
                target: s.target,
                t: s.t,
            })
            .collect();
        let (x0, spatial, refs, ref_latents) =
            assemble(&drawn, &val_clips, cache, depth_cache, store, true)?;
        let noise = Tensor::stack(&val_set.iter().map(|v| &v.noise).collect::<Vec<_>>())?;
        let t: Vec<usize> = val_set.iter().map(|v| v.drawn.t).collect();
        let mut tape = Tape::new(false);
        let (class, patches) = encoder.embed_batch(store, &mut tape, &refs)?;
        let tokens = adaptor.fuse_batch(store, &mut tape, &class, &patches, &ref_latents)?;
        let loss = training_loss(&mut tape, &sched, &x0, &noise, &t, |tape, x_t, ts| {
            denoiser.denoise(store, tape, x_t, ts, &spatial, &tokens)
        })?;
        Ok(loss.item()? as f64)
    };

    if start_step == 0 {
        let v = run_val(&mut cache, &mut depth_cache, &store)?;
        history.val.push((0, v));
    }

    let total = cfg.prop.steps as u64;
    for step in start_step..total {
        let mut rng = StreamRng::new(cfg.seed, indexed_stream("prop-step", step));
        let mut drawn = Vec::with_capacity(cfg.prop.batch_size);
        for _ in 0..cfg.prop.batch_size {
            let clip = rng.uniform_usize(clips.len());
            let style = StyleId::ALL[rng.uniform_usize(StyleId::ALL.len())];
            let idx = sample_triplet_indices(clips[clip].len(), &mut rng)?;
            let t = 1 + rng.uniform_usize(sched.t_max());
            drawn.push(DrawnSample {
                clip,
                style,
                reference: idx.reference,
                previous: idx.previous,
                target: idx.target,
                t,
            });
        }
        let (x0, spatial, refs, ref_latents) =
            assemble(&drawn, &clips, &mut cache, &mut depth_cache, &store, false)?;
        let noise = Tensor::randn(x0.shape(), &mut rng);
        let t: Vec<usize> = drawn.iter().map(|s| s.t).collect();

        let mut tape = Tape::new(true);
        let (class, patches) = encoder.embed_batch(&store, &mut tape, &refs)?;
        let tokens = adaptor.fuse_batch(&store, &mut tape, &class, &patches, &ref_latents)?;
        let loss = training_loss(&mut tape, &sched, &x0, &noise, &t, |tape, x_t, ts| {
            denoiser.denoise(&store, tape, x_t, ts, &spatial, &tokens)
        })?;
        let loss_val = loss.item()? as f64;
        let grads = tape.backward(&loss)?;
        let frac = step as f64 / total.max(1) as f64;
        let lr = if frac >= 0.8 { cfg.prop.lr * 0.3 } else { cfg.prop.lr };
        adam_step(
            &mut store,
            &grads,
            &mut state,
            &AdamHyper {
                lr,
                ..Default::default()
            },
        )?;
        history.steps.push((step, loss_val));

        if (step + 1) % cfg.prop.val_interval as u64 == 0 && step + 1 != total {
            let v = run_val(&mut cache, &mut depth_cache, &store)?;
            history.val.push((step + 1, v));
        }
    }
    let v = run_val(&mut cache, &mut depth_cache, &store)?;
    history.val.push((total, v));

    save_checkpoint(
        &out_path,
        &store,
        cfg,
        Some(sched.descriptor()),
        codec.latent_scale,
        TrainedFlags {
            codec: true,
            encoder: true,
            prop: true,
        },
        Some(&state),
    )?;

    let rows: Vec<String> = history
        .steps
        .iter()
        .map(|&(s, l)| format!("{s},{l}"))
        .collect();
    write_csv(&cfg.artifacts_dir.join("prop_train_log.csv"), "step,loss", &rows)?;
    let rows: Vec<String> = history.val.iter().map(|&(s, l)| format!("{s},{l}")).collect();
    write_csv(&cfg.artifacts_dir.join("prop_val_log.csv"), "step,val_loss", &rows)?;

    Ok(PropTrainOutput {
        checkpoint: out_path,
        history,
    })
}
