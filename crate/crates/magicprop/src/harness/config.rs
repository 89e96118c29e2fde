//! Run configuration: one JSON document covering data generation, the
//! three trainings, the schedule, and evaluation sampling. Every field has
//! a default, so a config file may override any subset. The full config is
//! serialized verbatim into every checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{SamplerConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::synthdata::CorpusConfig;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub zero_terminal: bool,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            t_steps: 256,
            beta_min: 1e-4,
            beta_max: 2e-2,
            zero_terminal: true,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if self.zero_terminal {
            NoiseSchedule::linear_zero_terminal(self.t_steps, self.beta_min, self.beta_max)
        } else {
            NoiseSchedule::linear(self.t_steps, self.beta_min, self.beta_max)
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecSection {
    pub widths: [usize; 3],
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Fraction of corpus frames drawn per restyle variant when building
    /// the codec training set (identity is always included).
    pub style_fraction: f32,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            widths: [32, 64, 128],
            epochs: 4,
            steps_per_epoch: 160,
            batch_size: 16,
            lr: 2e-3,
            style_fraction: 0.35,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub embed: usize,
    pub widths: [usize; 3],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            embed: 64,
            widths: [16, 32, 64],
            steps: 600,
            batch_size: 32,
            lr: 1.5e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PropSection {
    pub base: usize,
    pub mid: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Number of fresh clips held out for validation v-loss.
    pub val_clips: usize,
    pub val_interval: usize,
}

impl Default for PropSection {
    fn default() -> Self {
        PropSection {
            base: 64,
            mid: 128,
            attn_dim: 64,
            time_dim: 64,
            steps: 2600,
            batch_size: 16,
            lr: 1e-3,
            val_clips: 4,
            val_interval: 400,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub num_steps: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::Ddim,
            num_steps: 20,
        }
    }
}

impl SamplerSection {
    pub fn build(&self, t_max: usize) -> Result<SamplerConfig> {
        SamplerConfig::uniform(self.kind, self.num_steps, t_max)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub artifacts_dir: PathBuf,
    pub schedule: ScheduleSection,
    pub data: CorpusConfig,
    pub codec: CodecSection,
    pub encoder: EncoderSection,
    pub prop: PropSection,
    pub sampler: SamplerSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            corpus_dir: PathBuf::from("data/corpus"),
            artifacts_dir: PathBuf::from("artifacts"),
            schedule: ScheduleSection::default(),
            data: CorpusConfig::default(),
            codec: CodecSection::default(),
            encoder: EncoderSection::default(),
            prop: PropSection::default(),
            sampler: SamplerSection::default(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn codec_checkpoint(&self) -> PathBuf {
        self.artifacts_dir.join("codec.mprp")
    }

    pub fn encoder_checkpoint(&self) -> PathBuf {
        self.artifacts_dir.join("encoder.mprp")
    }

    pub fn prop_checkpoint(&self) -> PathBuf {
        self.artifacts_dir.join("prop.mprp")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_overrides_defaults() {
        let json = r#"{ "seed": 9, "prop": { "steps": 5 } }"#;
        let cfg: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.prop.steps, 5);
        assert_eq!(cfg.prop.batch_size, PropSection::default().batch_size);
        assert_eq!(cfg.schedule.t_steps, 256);
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = TrainConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }
}
