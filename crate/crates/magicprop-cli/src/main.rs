//! Command-line front end: data generation, the three trainings, editing,
//! propagation, evaluation, the schedule ablation, and the selftest
//! property suites. Every subcommand accepts --config (JSON, partial
//! overrides of the built-in defaults) and --seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use magicprop::digest::dir_digest;
use magicprop::harness::ablate::ablate_ztsnr;
use magicprop::harness::checkpoint::load_prop_bundle;
use magicprop::harness::config::TrainConfig;
use magicprop::harness::eval::{evaluate, load_frames, save_frames, RunMeta};
use magicprop::harness::selftest::run_selftest;
use magicprop::harness::train::{run_train_codec, run_train_encoder, train_prop};
use magicprop::pipeline::{
    apply_instruction_to_clip, edit_reference, propagate, EditInstruction, EditTarget,
    PropagateOptions,
};
use magicprop::synthdata::{
    build_corpus, load_clip, save_frame_png, ClipMeta, StyleId, VideoClip, CORPUS_FORMAT_VERSION,
};
use magicprop::{Error, Result};

#[derive(Parser)]
#[command(name = "magicprop", version, about = "Motion-aware appearance propagation for synthetic videos")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; absent fields fall back to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        /// Corpus directory (defaults to the config's corpus_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the frame autoencoder.
    TrainCodec,
    /// Train the reference encoder (classification auxiliary task).
    TrainEncoder,
    /// Train the propagation denoiser and adaptor jointly.
    TrainProp {
        /// Continue from the existing propagation checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Apply a restyle edit to one frame of a clip.
    Edit {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        style: String,
        #[arg(long, default_value_t = 0)]
        ref_index: usize,
        #[arg(long, default_value = "global")]
        target: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Edit a reference frame and propagate it through the clip.
    Propagate {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        style: String,
        #[arg(long, default_value_t = 0)]
        ref_index: usize,
        #[arg(long, default_value = "global")]
        target: String,
        /// Use only the first N frames of the clip.
        #[arg(long)]
        frames: Option<usize>,
        /// Propagation checkpoint (defaults to the config's artifact path).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the evaluation report from emitted artifacts.
    Eval {
        #[arg(long)]
        clip: PathBuf,
        /// Directory of propagated frames (propagate --out).
        #[arg(long)]
        frames_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired standard vs zero-terminal-SNR runs.
    AblateZtsnr {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the schedule / conversion / oracle property suites.
    Selftest,
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_instruction(style: &str, target: &str) -> Result<EditInstruction> {
    Ok(EditInstruction {
        style: StyleId::parse(style)?,
        mask: None,
        target: EditTarget::parse(target)?,
    })
}

fn truncate_clip(clip: &VideoClip, frames: Option<usize>) -> Result<VideoClip> {
    let Some(n) = frames else {
        return Ok(clip.clone());
    };
    if n == 0 || n > clip.len() {
        return Err(Error::contract(format!(
            "--frames {n} out of range for a {}-frame clip",
            clip.len()
        )));
    }
    let mut spec = clip.spec.clone();
    spec.frames = n;
    Ok(VideoClip {
        frames: clip.frames[..n].to_vec(),
        depths: clip.depths[..n].to_vec(),
        masks: clip.masks[..n].to_vec(),
        correspondence: clip.correspondence[..n.saturating_sub(1)].to_vec(),
        spec,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { out } => {
            let dir = out.unwrap_or_else(|| cfg.corpus_dir.clone());
            let summary = build_corpus(&dir, &cfg.data, cfg.seed)?;
            let digest = dir_digest(&dir)?;
            println!(
                "wrote {} clips ({} files) to {}",
                summary.num_clips,
                summary.files_written,
                dir.display()
            );
            println!("corpus digest: {digest}");
        }
        Command::TrainCodec => {
            let (path, losses) = run_train_codec(&cfg)?;
            println!("codec checkpoint: {}", path.display());
            println!("epoch losses: {losses:?}");
        }
        Command::TrainEncoder => {
            let (path, acc) = run_train_encoder(&cfg)?;
            println!("encoder checkpoint: {}", path.display());
            println!("held-back classification accuracy: {acc:.3}");
        }
        Command::TrainProp { resume } => {
            let out = train_prop(&cfg, resume)?;
            println!("propagation checkpoint: {}", out.checkpoint.display());
            if let (Some(a), Some(b)) = (out.history.initial_val(), out.history.final_val()) {
                println!("validation v-loss: {a:.4} -> {b:.4}");
            }
        }
        Command::Edit {
            clip,
            style,
            ref_index,
            target,
            out,
        } => {
            let clip = load_clip(&clip)?;
            let instr = parse_instruction(&style, &target)?;
            let edited = edit_reference(&clip, ref_index, &instr)?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_frame_png(&out, &edited)?;
            println!("edited frame written to {}", out.display());
        }
        Command::Propagate {
            clip,
            style,
            ref_index,
            target,
            frames,
            ckpt,
            out,
        } => {
            let full = load_clip(&clip)?;
            let clip = truncate_clip(&full, frames)?;
            let instr = parse_instruction(&style, &target)?;
            let bundle = load_prop_bundle(&ckpt.unwrap_or_else(|| cfg.prop_checkpoint()))?;
            let opts = PropagateOptions {
                sampler: cfg.sampler.build(bundle.sched.t_max())?,
                seed: cfg.seed,
            };
            let edited = edit_reference(&clip, ref_index, &instr)?;
            let output = propagate(&clip, &edited, ref_index, &bundle, &opts, None)?;
            save_frames(&out, &output)?;
            let meta = RunMeta {
                format_version: CORPUS_FORMAT_VERSION,
                style: instr.style.name().to_string(),
                target,
                ref_index,
                seed: cfg.seed,
                frames: clip.len(),
                source_clip: ClipMeta {
                    format_version: CORPUS_FORMAT_VERSION,
                    spec: clip.spec.clone(),
                    correspondence: clip.correspondence.clone(),
                },
            };
            meta.write(&out)?;
            // The report is computed from the saved frames so that a later
            // recompute from artifacts reproduces it exactly.
            let reloaded = load_frames(&out, clip.len())?;
            let gt = apply_instruction_to_clip(&clip, &instr)?;
            let report = evaluate(&clip, &reloaded, &gt, &instr, ref_index)?;
            report.write(&out.join("report.json"), &out.join("report.csv"))?;
            println!(
                "{} frames + report.json written to {}",
                clip.len(),
                out.display()
            );
            println!("mean IoU {:.3}", report.mean_iou());
        }
        Command::Eval {
            clip,
            frames_dir,
            out,
        } => {
            let meta = RunMeta::read(&frames_dir)?;
            let full = load_clip(&clip)?;
            let clip = truncate_clip(&full, Some(meta.frames))?;
            let instr = parse_instruction(&meta.style, &meta.target)?;
            let output = load_frames(&frames_dir, meta.frames)?;
            let gt = apply_instruction_to_clip(&clip, &instr)?;
            let report = evaluate(&clip, &output, &gt, &instr, meta.ref_index)?;
            let out = out.unwrap_or_else(|| frames_dir.join("report_recomputed.json"));
            let csv = out.with_extension("csv");
            report.write(&out, &csv)?;
            println!("report written to {}", out.display());
        }
        Command::AblateZtsnr { out } => {
            let out_root = out.unwrap_or_else(|| cfg.artifacts_dir.join("ablate"));
            let result = ablate_ztsnr(&cfg, &out_root)?;
            println!("standard arm SNR(T) = {:.6}", result.summary.standard_snr_terminal);
            println!(
                "zero-terminal arm SNR(T) = {:.6}",
                result.summary.zero_terminal_snr_terminal
            );
            println!(
                "terminal color drift: standard {:.4}, zero-terminal {:.4}",
                result.summary.standard_terminal_drift,
                result.summary.zero_terminal_terminal_drift
            );
            println!("observed: {}", result.summary.observed_direction);
            println!("curves and summary under {}", out_root.display());
        }
        Command::Selftest => {
            let report = run_selftest(cfg.seed);
            for e in &report.entries {
                println!(
                    "[{}] {} — {}",
                    if e.passed { "PASS" } else { "FAIL" },
                    e.name,
                    e.detail
                );
            }
            if !report.all_passed() {
                return Err(Error::contract("selftest failed"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Clap handles usage errors itself with exit code 2.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
