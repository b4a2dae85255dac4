//! Run configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use engage_core::corpus::SyntheticConfig;
use engage_core::model::{DecodeParams, ModelConfig};
use engage_core::training::{MleConfig, PpoConfig, RewardTrainConfig};
use engage_core::uniqueness::{SamplingSchedule, DEFAULT_K, DEFAULT_M};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Existing corpus files to use instead of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub videos: PathBuf,
    pub comments: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of videos held out for generation, evaluation and agreement.
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairsConfig {
    /// `None` keeps every candidate pair.
    pub max_pairs_per_video: Option<usize>,
    /// Drop the "strictly later" condition (likes-only pairs).
    pub biased: bool,
    /// Fraction of training videos whose pairs validate the reward model.
    pub val_fraction: f64,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self { max_pairs_per_video: Some(10), biased: false, val_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniquenessConfig {
    pub k: usize,
    pub m: usize,
}

impl Default for UniquenessConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K, m: DEFAULT_M }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeConfig {
    pub n_probe: usize,
    pub max_len: usize,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self { n_probe: 512, max_len: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// Train on at most this many training videos (`None`: all of them).
    pub max_videos: Option<usize>,
    pub ppo: PpoConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self { max_videos: Some(200), ppo: PpoConfig { epochs: 3, max_len: 12, ..PpoConfig::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub decode: DecodeParams,
    pub n_references: usize,
    pub agreement_videos: usize,
    pub agreement_pairs_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeParams::sampling(12, 5),
            n_references: engage_core::metrics::DEFAULT_N_REFERENCES,
            agreement_videos: 100,
            agreement_pairs_per_video: 5,
        }
    }
}

/// Every knob of a run. Section `seed` fields are overwritten by seeds derived
/// from the global `seed` (see [`stage_seed`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub synth: SyntheticConfig,
    pub ingest: Option<IngestConfig>,
    pub split: SplitConfig,
    pub pairs: PairsConfig,
    pub uniqueness: UniquenessConfig,
    pub model: ModelConfig,
    pub mle: MleConfig,
    pub reward: RewardTrainConfig,
    pub normalize: NormalizeConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk scale: 1000 synthetic videos and a small model.
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            synth: SyntheticConfig::default(),
            ingest: None,
            split: SplitConfig::default(),
            pairs: PairsConfig::default(),
            uniqueness: UniquenessConfig::default(),
            model: ModelConfig {
                n_queries: 4,
                perceiver_layers: 1,
                d_model: 32,
                decoder_layers: 2,
                n_heads: 2,
                max_comment_len: 12,
                ..ModelConfig::default()
            },
            mle: MleConfig {
                epochs: 40,
                batch_size: 32,
                learning_rate: 2e-3,
                warmup_epochs: 2,
                schedule: SamplingSchedule { epochs_per_level: 8, ..SamplingSchedule::default() },
                ..MleConfig::default()
            },
            reward: RewardTrainConfig { epochs: 3, pairs_per_batch: 64, learning_rate: 1e-3, ..Default::default() },
            normalize: NormalizeConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// 20 videos and a tiny model; the whole pipeline runs in seconds.
    pub fn smoke() -> Self {
        let base = Self::default();
        Self {
            synth: SyntheticConfig {
                n_videos: 20,
                n_categories: 3,
                comments_per_video: (6, 10),
                vocab_size: 80,
                frames: 2,
                patches: 2,
                feature_dim: 8,
                ..SyntheticConfig::default()
            },
            split: SplitConfig { test_fraction: 0.25 },
            pairs: PairsConfig { val_fraction: 0.25, ..base.pairs },
            uniqueness: UniquenessConfig { k: 3, m: 5 },
            model: ModelConfig {
                n_queries: 2,
                perceiver_layers: 1,
                d_model: 16,
                decoder_layers: 1,
                n_heads: 2,
                ff_mult: 2,
                max_comment_len: 10,
                max_frames: 2,
                max_patches: 2,
                feature_dim: 8,
                ..ModelConfig::default()
            },
            mle: MleConfig {
                epochs: 150,
                batch_size: 8,
                learning_rate: 5e-3,
                warmup_epochs: 5,
                schedule: SamplingSchedule { epochs_per_level: 30, ..SamplingSchedule::default() },
                ..MleConfig::default()
            },
            reward: RewardTrainConfig { epochs: 5, pairs_per_batch: 16, learning_rate: 1e-3, warmup_steps: 2, ..Default::default() },
            normalize: NormalizeConfig { n_probe: 16, max_len: 10 },
            rl: RlConfig {
                max_videos: None,
                ppo: PpoConfig {
                    epochs: 4,
                    batch_size: 16,
                    learning_rate: 1e-4,
                    n_samples: 2,
                    minibatch_size: 8,
                    ppo_epochs: 2,
                    max_len: 10,
                    ..PpoConfig::default()
                },
            },
            eval: EvalConfig {
                decode: DecodeParams::sampling(10, 3),
                agreement_videos: 5,
                ..EvalConfig::default()
            },
            ..base
        }
    }

    /// `preset` overlaid with the keys present in `file` (objects merge
    /// recursively, everything else replaces).
    pub fn load(preset: RunConfig, file: Option<&Path>) -> Result<Self> {
        let Some(path) = file else {
            return Ok(preset);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let overlay: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut merged = serde_json::to_value(&preset).expect("config serializes");
        merge(&mut merged, overlay);
        serde_json::from_value(merged).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ingest.is_none() {
            self.synth.validate()?;
        }
        let open_unit = |name: &str, x: f64| {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                Err(anyhow::anyhow!("{name} must lie in (0, 1), got {x}"))
            }
        };
        open_unit("split.test_fraction", self.split.test_fraction)?;
        open_unit("pairs.val_fraction", self.pairs.val_fraction)?;
        if self.pairs.max_pairs_per_video == Some(0) {
            bail!("pairs.max_pairs_per_video must be positive");
        }
        self.model.validate()?;
        self.mle.validate()?;
        self.reward.validate()?;
        self.rl.ppo.validate()?;
        if self.rl.max_videos == Some(0) {
            bail!("rl.max_videos must be positive");
        }
        if self.normalize.max_len == 0 {
            bail!("normalize.max_len must be positive");
        }
        self.eval.decode.validate()?;
        if self.eval.n_references == 0 {
            bail!("eval.n_references must be positive");
        }
        Ok(())
    }

    /// Hash of the canonical JSON form (output directory excluded).
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out");
        sha256_hex(v.to_string().as_bytes())
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seed of one stage: the first 8 bytes (little-endian) of
/// `sha256("<global seed>/<stage>")`.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let d = Sha256::digest(format!("{global}/{stage}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
