//! The three training stages: likelihood training of the generator under the
//! uniqueness curriculum, pairwise reward-model training, and PPO against the
//! frozen reward model.

mod mle;
mod reward;
mod rl;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::model::{Model, ModelError};
use crate::uniqueness::UniquenessError;

pub use mle::{train_generator, MleConfig};
pub use reward::{pairwise_accuracy, ranking_batch_loss, ranking_loss, train_reward, RewardTrainConfig};
pub use rl::{normalize_rewards, ppo_loss, probe_rewards, train_rl, PpoConfig, PpoLoss, PpoMinibatch};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uniqueness(#[from] UniquenessError),
    #[error("invalid {stage} config: {reason}")]
    InvalidConfig { stage: &'static str, reason: String },
    #[error("video {0} has no comments to train on")]
    NoComments(String),
    #[error("comment {0} has no uniqueness record")]
    MissingUniqueness(String),
    #[error("pair refers to unknown comment or video {0}")]
    UnknownId(String),
    #[error("{stage} training diverged at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize, last_good: Box<Model> },
    #[error("mean KL {kl:.4} exceeded the ceiling {ceiling} at epoch {epoch}")]
    KlExceeded { epoch: usize, kl: f64, ceiling: f64 },
    #[error("nothing to train on: {0}")]
    Empty(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_kl: Option<f64>,
}

impl MetricRecord {
    fn new(stage: &str, epoch: usize, loss: f64) -> Self {
        Self { stage: stage.into(), epoch, loss, val_accuracy: None, mean_reward: None, mean_kl: None }
    }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord], append: bool) -> Result<(), TrainError> {
    let io = |source| TrainError::Io { path: path.display().to_string(), source };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(io)?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("metric record serializes");
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(io)
}

/// Decoder token ids of every comment in `corpus`, keyed by comment id.
pub fn encode_comments<'c>(model: &Model, corpus: &'c Corpus) -> HashMap<&'c str, Vec<u32>> {
    corpus.comments().iter().map(|c| (c.id.as_str(), model.encode_comment(&c.text))).collect()
}

fn check_positive(stage: &'static str, fields: &[(&str, f64)]) -> Result<(), TrainError> {
    for (name, v) in fields {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(TrainError::InvalidConfig { stage, reason: format!("{name} must be positive") });
        }
    }
    Ok(())
}
