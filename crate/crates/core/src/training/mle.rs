use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_positive, encode_comments, MetricRecord, TrainError};
use crate::corpus::Corpus;
use crate::model::Model;
use crate::nn::{AdamConfig, AdamW, Graph};
use crate::uniqueness::{sample_training_comment, SamplingSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub schedule: SamplingSchedule,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 3e-4,
            warmup_epochs: 10,
            schedule: SamplingSchedule::default(),
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl MleConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_positive(
            "mle",
            &[
                ("epochs", self.epochs as f64),
                ("batch_size", self.batch_size as f64),
                ("learning_rate", self.learning_rate),
                ("clip_norm", self.clip_norm),
            ],
        )?;
        self.schedule.validate()?;
        Ok(())
    }
}

/// Likelihood training: each epoch every video contributes one comment drawn
/// from the curriculum density, and the loss is the mean per-token negative
/// log-likelihood (end token included).
pub fn train_generator(
    corpus: &Corpus,
    uniqueness: &HashMap<String, f64>,
    init: Model,
    config: &MleConfig,
) -> Result<(Model, Vec<MetricRecord>), TrainError> {
    config.validate()?;
    init.expect_token_head()?;
    let videos: Vec<&str> = corpus.videos().iter().map(|v| v.id.as_str()).collect();
    if videos.is_empty() {
        return Err(TrainError::Empty("corpus has no videos".into()));
    }
    for v in &videos {
        let comments = corpus.comments_of(v);
        if comments.is_empty() {
            return Err(TrainError::NoComments(v.to_string()));
        }
        if let Some(c) = comments.iter().find(|c| !uniqueness.contains_key(&c.id)) {
            return Err(TrainError::MissingUniqueness(c.id.clone()));
        }
    }
    let tokens = encode_comments(&init, corpus);
    let steps_per_epoch = videos.len().div_ceil(config.batch_size);
    let mut opt = AdamW::new(AdamConfig {
        lr: config.learning_rate,
        warmup_steps: config.warmup_epochs * steps_per_epoch,
        clip_norm: Some(config.clip_norm),
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init;
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut batch: Vec<(&str, &str)> = Vec::with_capacity(videos.len());
        for v in &videos {
            let c = sample_training_comment(&corpus.comments_of(v), uniqueness, epoch, &config.schedule, &mut rng)?;
            batch.push((v, c.id.as_str()));
        }
        batch.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n_tokens = 0usize;
        for chunk in batch.chunks(config.batch_size) {
            let feats: Vec<_> = chunk.iter().map(|(v, _)| &corpus.video(v).expect("video").features).collect();
            let seqs: Vec<(usize, &[u32])> =
                chunk.iter().enumerate().map(|(i, (_, c))| (i, tokens[c].as_slice())).collect();
            let mut g = Graph::new(&model.params);
            let prompts = model.perceive_graph(&mut g, &feats)?;
            let fwd = model.decode_graph(&mut g, prompts, &seqs)?;
            let lp = model.sequence_log_probs(&mut g, &fwd, &seqs)?;
            let mean = g.mean(lp);
            let loss = g.scale(mean, -1.0);
            let value = g.value(loss).item();
            let count = g.shape(lp).0;
            if !value.is_finite() {
                return Err(TrainError::Diverged { stage: "mle", epoch, last_good: Box::new(model) });
            }
            let grads = g.backward(loss);
            drop(g);
            if !grads.is_finite() {
                return Err(TrainError::Diverged { stage: "mle", epoch, last_good: Box::new(model) });
            }
            opt.step(&mut model.params, &grads);
            total += value * count as f64;
            n_tokens += count;
        }
        trace.push(MetricRecord::new("mle", epoch, total / n_tokens.max(1) as f64));
    }
    Ok((model, trace))
}
