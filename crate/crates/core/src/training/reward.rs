use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_positive, encode_comments, MetricRecord, TrainError};
use crate::corpus::{Corpus, FeatureTensor};
use crate::model::{Model, SCALAR_HEAD};
use crate::nn::{AdamConfig, AdamW, Graph, Var};
use crate::pairs::{ComparisonPair, PairSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub pairs_per_batch: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, pairs_per_batch: 128, learning_rate: 3e-4, warmup_steps: 20, clip_norm: 1.0, seed: 0 }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_positive(
            "reward",
            &[
                ("epochs", self.epochs as f64),
                ("pairs_per_batch", self.pairs_per_batch as f64),
                ("learning_rate", self.learning_rate),
                ("clip_norm", self.clip_norm),
            ],
        )
    }
}

/// `−log σ(pos − neg)`, computed as `softplus(neg − pos)`.
pub fn ranking_loss(pos_score: f64, neg_score: f64) -> f64 {
    let x = neg_score - pos_score;
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Scores every distinct comment of `pairs` once and returns a column of
/// `pos − neg` margins, one per pair.
fn pair_margins(
    g: &mut Graph,
    model: &Model,
    corpus: &Corpus,
    tokens: &HashMap<&str, Vec<u32>>,
    pairs: &[&ComparisonPair],
) -> Result<Var, TrainError> {
    let mut video_slot: HashMap<&str, usize> = HashMap::new();
    let mut feats: Vec<&FeatureTensor> = Vec::new();
    let mut comment_slot: HashMap<&str, usize> = HashMap::new();
    let mut seqs: Vec<(usize, &[u32])> = Vec::new();
    for p in pairs {
        let video = corpus.video(&p.video_id).ok_or_else(|| TrainError::UnknownId(p.video_id.clone()))?;
        let vs = *video_slot.entry(&p.video_id).or_insert_with(|| {
            feats.push(&video.features);
            feats.len() - 1
        });
        for id in [&p.pos_id, &p.neg_id] {
            if !comment_slot.contains_key(id.as_str()) {
                let t = tokens.get(id.as_str()).ok_or_else(|| TrainError::UnknownId(id.clone()))?;
                comment_slot.insert(id, seqs.len());
                seqs.push((vs, t));
            }
        }
    }
    let prompts = model.perceive_graph(g, &feats)?;
    let fwd = model.decode_graph(g, prompts, &seqs)?;
    let rows = (0..seqs.len()).map(|i| fwd.last_row(i)).collect();
    let scores = model.scalar_at(g, fwd.hidden, rows, SCALAR_HEAD);
    let pos = g.gather_rows(&[scores], pairs.iter().map(|p| (0, comment_slot[p.pos_id.as_str()] as u32)).collect());
    let neg = g.gather_rows(&[scores], pairs.iter().map(|p| (0, comment_slot[p.neg_id.as_str()] as u32)).collect());
    Ok(g.sub(pos, neg))
}

/// Mean ranking loss over `pairs`.
pub fn ranking_batch_loss(
    g: &mut Graph,
    model: &Model,
    corpus: &Corpus,
    tokens: &HashMap<&str, Vec<u32>>,
    pairs: &[&ComparisonPair],
) -> Result<Var, TrainError> {
    let margin = pair_margins(g, model, corpus, tokens, pairs)?;
    let neg = g.scale(margin, -1.0);
    let losses = g.softplus(neg);
    Ok(g.mean(losses))
}

/// Fraction of pairs whose positive side scores higher; exact ties count ½.
pub fn pairwise_accuracy(model: &Model, corpus: &Corpus, pairs: &PairSet) -> Result<f64, TrainError> {
    model.expect_scalar_head()?;
    if pairs.is_empty() {
        return Err(TrainError::Empty("no pairs to evaluate".into()));
    }
    let tokens = encode_comments(model, corpus);
    let refs: Vec<&ComparisonPair> = pairs.pairs.iter().collect();
    let mut correct = 0.0;
    for chunk in refs.chunks(128) {
        let mut g = Graph::inference(&model.params);
        let m = pair_margins(&mut g, model, corpus, &tokens, chunk)?;
        correct += g.value(m).data.iter().map(|&d| if d > 0.0 { 1.0 } else if d == 0.0 { 0.5 } else { 0.0 }).sum::<f64>();
    }
    Ok(correct / refs.len() as f64)
}

/// Minimizes the mean ranking loss over `train`; returns the parameters with
/// the best validation accuracy (earliest on ties) and the per-epoch trace.
pub fn train_reward(
    corpus: &Corpus,
    train: &PairSet,
    val: &PairSet,
    init: Model,
    config: &RewardTrainConfig,
) -> Result<(Model, Vec<MetricRecord>), TrainError> {
    config.validate()?;
    init.expect_scalar_head()?;
    if train.is_empty() {
        return Err(TrainError::Empty("no training pairs".into()));
    }
    let tokens = encode_comments(&init, corpus);
    let mut opt = AdamW::new(AdamConfig {
        lr: config.learning_rate,
        warmup_steps: config.warmup_steps,
        clip_norm: Some(config.clip_norm),
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init;
    let mut best: Option<(f64, Model)> = None;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<&ComparisonPair> = train.pairs.iter().collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.pairs_per_batch) {
            let mut g = Graph::new(&model.params);
            let loss = ranking_batch_loss(&mut g, &model, corpus, &tokens, chunk)?;
            let value = g.value(loss).item();
            let grads = g.backward(loss);
            drop(g);
            if !value.is_finite() || !grads.is_finite() {
                let last_good = best.map_or(model, |(_, m)| m);
                return Err(TrainError::Diverged { stage: "reward", epoch, last_good: Box::new(last_good) });
            }
            opt.step(&mut model.params, &grads);
            total += value * chunk.len() as f64;
        }
        let mut record = MetricRecord::new("reward", epoch, total / order.len() as f64);
        let acc = if val.is_empty() { None } else { Some(pairwise_accuracy(&model, corpus, val)?) };
        record.val_accuracy = acc;
        trace.push(record);
        let score = acc.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.clone()));
        }
    }
    let (_, model) = best.expect("at least one epoch");
    Ok((model, trace))
}
