use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_positive, MetricRecord, TrainError};
use crate::corpus::{Corpus, FeatureTensor};
use crate::model::{DecodeParams, Model, VALUE_HEAD};
use crate::nn::{AdamConfig, AdamW, Graph, Tensor, Var};
use crate::text::EOS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub epochs: usize,
    /// Sequences per rollout batch; each video in it gets `n_samples`.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Optimizer steps of linear learning-rate warmup.
    pub warmup_steps: usize,
    pub kl_coeff: f64,
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub n_samples: usize,
    /// Optimisation passes over each rollout batch.
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub max_len: usize,
    /// Abort when the epoch's mean sequence KL exceeds this.
    pub kl_ceiling: f64,
    /// Normalized reward given to a generation with no words.
    pub empty_reward: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            learning_rate: 1.4e-5,
            warmup_steps: 0,
            kl_coeff: 1.0,
            clip_eps: 0.2,
            gae_lambda: 0.95,
            discount: 1.0,
            n_samples: 4,
            ppo_epochs: 4,
            minibatch_size: 32,
            max_len: 16,
            kl_ceiling: 20.0,
            empty_reward: -1.0,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_positive(
            "ppo",
            &[
                ("epochs", self.epochs as f64),
                ("batch_size", self.batch_size as f64),
                ("learning_rate", self.learning_rate),
                ("n_samples", self.n_samples as f64),
                ("ppo_epochs", self.ppo_epochs as f64),
                ("minibatch_size", self.minibatch_size as f64),
                ("max_len", self.max_len as f64),
                ("kl_ceiling", self.kl_ceiling),
                ("clip_norm", self.clip_norm),
            ],
        )?;
        let bad = |reason: &str| Err(TrainError::InvalidConfig { stage: "ppo", reason: reason.into() });
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return bad("kl_coeff must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.discount) {
            return bad("gae_lambda and discount must lie in [0, 1]");
        }
        if !self.empty_reward.is_finite() {
            return bad("empty_reward must be finite");
        }
        Ok(())
    }
}

fn has_words(tokens: &[u32]) -> bool {
    tokens.first().is_some_and(|&t| t != EOS)
}

/// Raw reward scores of one sampled generation for each of `n_probe` videos
/// (cycling through a seeded shuffle of the corpus). Generations without
/// words are skipped.
pub fn probe_rewards(
    reward: &Model,
    corpus: &Corpus,
    generator: &Model,
    n_probe: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<f64>, TrainError> {
    reward.expect_scalar_head()?;
    generator.expect_token_head()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut videos: Vec<&FeatureTensor> = corpus.videos().iter().map(|v| &v.features).collect();
    if videos.is_empty() || n_probe == 0 {
        return Ok(Vec::new());
    }
    videos.shuffle(&mut rng);
    let probe: Vec<&FeatureTensor> = videos.iter().cycle().take(n_probe).copied().collect();
    let gens = generator.generate_batch(&probe, &DecodeParams::sampling(max_len, 1), &mut rng)?;
    let items: Vec<(&FeatureTensor, &[u32])> = probe
        .iter()
        .zip(&gens)
        .filter(|(_, g)| has_words(&g[0].tokens))
        .map(|(v, g)| (*v, g[0].tokens.as_slice()))
        .collect();
    Ok(reward.reward_scores(&items)?)
}

/// Mean raw reward over the probe set; subtracted from every later reward.
pub fn normalize_rewards(
    reward: &Model,
    corpus: &Corpus,
    generator: &Model,
    n_probe: usize,
    seed: u64,
    max_len: usize,
) -> Result<f64, TrainError> {
    let scores = probe_rewards(reward, corpus, generator, n_probe, seed, max_len)?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Sequences and targets of one PPO optimisation step.
#[derive(Debug, Clone, Default)]
pub struct PpoMinibatch {
    /// `(index into the video list, generated tokens)`.
    pub seqs: Vec<(usize, Vec<u32>)>,
    /// Flattened over every token of every sequence, in order.
    pub old_log_probs: Vec<f64>,
    /// Reference log-distribution over the vocabulary at each of those tokens.
    pub ref_log_dists: Tensor,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Terms of the PPO objective for one minibatch.
pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    /// Mean per-token KL(π ‖ π_ref) over the full vocabulary.
    pub kl: Var,
    pub value: Var,
}

/// Clipped surrogate, `kl_coeff` times the exact per-token KL to the
/// reference, and squared value error. The value head reads detached hidden
/// states, so the value term only trains the head.
pub fn ppo_loss(
    g: &mut Graph,
    policy: &Model,
    videos: &[&FeatureTensor],
    batch: &PpoMinibatch,
    clip_eps: f64,
    kl_coeff: f64,
) -> Result<PpoLoss, TrainError> {
    let seqs: Vec<(usize, &[u32])> = batch.seqs.iter().map(|(v, t)| (*v, t.as_slice())).collect();
    let prompts = policy.perceive_graph(g, videos)?;
    let fwd = policy.decode_graph(g, prompts, &seqs)?;
    let mut rows = Vec::new();
    let mut picks = Vec::new();
    for (i, (_, t)) in seqs.iter().enumerate() {
        for (j, &tok) in t.iter().enumerate() {
            picks.push((rows.len() as u32, tok));
            rows.push(fwd.predict_row(i, j));
        }
    }
    let ls = policy.token_log_softmax(g, &fwd, rows.clone())?;
    let new_lp = g.pick(ls, picks);
    let n = batch.old_log_probs.len();
    assert_eq!(batch.ref_log_dists.shape(), g.shape(ls), "reference distributions do not match the batch");
    let reference = g.input(batch.ref_log_dists.clone());
    let probs = g.exp(ls);
    let log_ratio = g.sub(ls, reference);
    let weighted = g.mul(probs, log_ratio);
    let kl_sum = g.sum(weighted);
    let kl = g.scale(kl_sum, 1.0 / n.max(1) as f64);
    let old = g.input(Tensor::from_vec(n, 1, batch.old_log_probs.clone()));
    let diff = g.sub(new_lp, old);
    let ratio = g.exp(diff);
    let surr1 = g.mul_const(ratio, batch.advantages.clone());
    let clipped = g.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    let surr2 = g.mul_const(clipped, batch.advantages.clone());
    let surr = g.minimum(surr1, surr2);
    let mean = g.mean(surr);
    let policy_loss = g.scale(mean, -1.0);

    let hidden = g.detach(fwd.hidden);
    let values = policy.scalar_at(g, hidden, rows, VALUE_HEAD);
    let ret = g.input(Tensor::from_vec(n, 1, batch.returns.clone()));
    let err = g.sub(values, ret);
    let sq = g.square(err);
    let mse = g.mean(sq);
    let value_loss = g.scale(mse, 0.5);
    let kl_term = g.scale(kl, kl_coeff);
    let total = g.add(policy_loss, kl_term);
    let total = g.add(total, value_loss);
    Ok(PpoLoss { total, policy: policy_loss, kl, value: value_loss })
}

/// Generalized advantage estimates for one episode whose per-step rewards are
/// `rewards` and value estimates `values`; the state after the last token is terminal.
pub(crate) fn gae(rewards: &[f64], values: &[f64], discount: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = 0.0;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + discount * next_value - values[t];
        running = delta + discount * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

struct Rollout {
    video: usize,
    tokens: Vec<u32>,
    old_lp: Vec<f64>,
    ref_dists: Vec<Vec<f64>>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    kl: f64,
    reward: f64,
}

fn token_rows(fwd: &crate::model::Forward, seqs: &[(usize, &[u32])]) -> Vec<u32> {
    let rows = seqs.iter().enumerate().flat_map(|(i, (_, t))| (0..t.len()).map(move |j| (i, j)));
    rows.map(|(i, j)| fwd.predict_row(i, j)).collect()
}

/// Log-distributions over the vocabulary at every token of `seqs` under `model`.
fn reference_dists(model: &Model, videos: &[&FeatureTensor], seqs: &[(usize, &[u32])]) -> Result<Tensor, TrainError> {
    let mut g = Graph::inference(&model.params);
    let prompts = model.perceive_graph(&mut g, videos)?;
    let fwd = model.decode_graph(&mut g, prompts, seqs)?;
    let ls = model.token_log_softmax(&mut g, &fwd, token_rows(&fwd, seqs))?;
    Ok(g.value(ls).clone())
}

/// Value-head estimate at every token of `seqs`.
fn values(policy: &Model, videos: &[&FeatureTensor], seqs: &[(usize, &[u32])]) -> Result<Vec<f64>, TrainError> {
    let mut g = Graph::inference(&policy.params);
    let prompts = policy.perceive_graph(&mut g, videos)?;
    let fwd = policy.decode_graph(&mut g, prompts, seqs)?;
    let v = policy.scalar_at(&mut g, fwd.hidden, token_rows(&fwd, seqs), VALUE_HEAD);
    Ok(g.value(v).data.clone())
}

#[allow(clippy::too_many_arguments)]
fn collect_rollouts(
    policy: &Model,
    reference: &Model,
    reward: &Model,
    offset: f64,
    videos: &[&FeatureTensor],
    config: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Rollout>, TrainError> {
    let decode = DecodeParams::sampling(config.max_len, config.n_samples);
    let gens = policy.generate_batch(videos, &decode, rng)?;
    let flat: Vec<(usize, &crate::model::Generation)> =
        gens.iter().enumerate().flat_map(|(v, gs)| gs.iter().map(move |g| (v, g))).collect();
    let seqs: Vec<(usize, &[u32])> = flat.iter().map(|(v, g)| (*v, g.tokens.as_slice())).collect();
    let ref_dists = reference_dists(reference, videos, &seqs)?;
    let values = values(policy, videos, &seqs)?;
    let scored: Vec<usize> = (0..flat.len()).filter(|&i| has_words(&flat[i].1.tokens)).collect();
    let items: Vec<(&FeatureTensor, &[u32])> = scored.iter().map(|&i| (videos[flat[i].0], seqs[i].1)).collect();
    let scores = reward.reward_scores(&items)?;
    let mut seq_reward = vec![config.empty_reward; flat.len()];
    for (&i, s) in scored.iter().zip(scores) {
        seq_reward[i] = s - offset;
    }
    let mut out = Vec::with_capacity(flat.len());
    let mut at = 0;
    for (i, (v, gen)) in flat.iter().enumerate() {
        let n = gen.tokens.len();
        let old = &gen.log_probs;
        let dists: Vec<Vec<f64>> = (at..at + n).map(|r| ref_dists.row(r).to_vec()).collect();
        let vals = &values[at..at + n];
        at += n;
        let kl_t: Vec<f64> =
            old.iter().zip(&gen.tokens).zip(&dists).map(|((a, &t), d)| a - d[t as usize]).collect();
        let mut rewards: Vec<f64> = kl_t.iter().map(|k| -config.kl_coeff * k).collect();
        rewards[n - 1] += seq_reward[i];
        let (advantages, returns) = gae(&rewards, vals, config.discount, config.gae_lambda);
        out.push(Rollout {
            video: *v,
            tokens: gen.tokens.clone(),
            old_lp: old.clone(),
            ref_dists: dists,
            advantages,
            returns,
            kl: kl_t.iter().sum(),
            reward: seq_reward[i],
        });
    }
    Ok(out)
}

fn whiten(rollouts: &mut [Rollout]) {
    let all: Vec<f64> = rollouts.iter().flat_map(|r| r.advantages.iter().copied()).collect();
    if all.is_empty() {
        return;
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / all.len() as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for r in rollouts {
        r.advantages.iter_mut().for_each(|a| *a = (*a - mean) * scale);
    }
}

/// PPO from `generator` against the frozen `reward` model. Rewards are the
/// reward score minus `offset` at the final token and `−β·(log π − log π_ref)`
/// at every token. Returns the policy (generator weights plus value head).
pub fn train_rl(
    corpus: &Corpus,
    generator: &Model,
    reward: &Model,
    offset: f64,
    config: &PpoConfig,
) -> Result<(Model, Vec<MetricRecord>), TrainError> {
    config.validate()?;
    reward.expect_scalar_head()?;
    let mut policy = generator.to_policy(reward)?;
    let reference = generator;
    let mut videos: Vec<&FeatureTensor> = corpus.videos().iter().map(|v| &v.features).collect();
    if videos.is_empty() {
        return Err(TrainError::Empty("corpus has no videos".into()));
    }
    let adam = AdamConfig {
        lr: config.learning_rate,
        warmup_steps: config.warmup_steps,
        clip_norm: Some(config.clip_norm),
        ..AdamConfig::default()
    };
    // separate optimisers so that value errors (which scale with β) never
    // rescale the policy's clipped gradient
    let mut opt = AdamW::new(adam.clone());
    let mut value_opt = AdamW::new(adam);
    let value_params: Vec<usize> =
        ["w", "b"].iter().map(|p| policy.params.index_of(&format!("{VALUE_HEAD}.{p}")).expect("value head")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_batch = (config.batch_size / config.n_samples).max(1);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        videos.shuffle(&mut rng);
        let (mut loss_sum, mut n_steps) = (0.0, 0usize);
        let (mut reward_sum, mut kl_sum, mut n_seqs) = (0.0, 0.0, 0usize);
        for chunk in videos.chunks(per_batch) {
            let mut rollouts = collect_rollouts(&policy, reference, reward, offset, chunk, config, &mut rng)?;
            reward_sum += rollouts.iter().map(|r| r.reward).sum::<f64>();
            kl_sum += rollouts.iter().map(|r| r.kl).sum::<f64>();
            n_seqs += rollouts.len();
            whiten(&mut rollouts);
            let mut order: Vec<usize> = (0..rollouts.len()).collect();
            for _ in 0..config.ppo_epochs {
                order.shuffle(&mut rng);
                for mb in order.chunks(config.minibatch_size) {
                    let mut batch = PpoMinibatch::default();
                    let mut dists = Vec::new();
                    for &i in mb {
                        let r = &rollouts[i];
                        batch.seqs.push((r.video, r.tokens.clone()));
                        batch.old_log_probs.extend_from_slice(&r.old_lp);
                        dists.extend(r.ref_dists.iter().flatten().copied());
                        batch.advantages.extend_from_slice(&r.advantages);
                        batch.returns.extend_from_slice(&r.returns);
                    }
                    let vocab = policy.config.vocab_size;
                    batch.ref_log_dists = Tensor::from_vec(dists.len() / vocab, vocab, dists);
                    let mut g = Graph::new(&policy.params);
                    let loss = ppo_loss(&mut g, &policy, chunk, &batch, config.clip_eps, config.kl_coeff)?;
                    let value = g.value(loss.total).item();
                    let mut grads = g.backward(loss.total);
                    drop(g);
                    if !value.is_finite() || !grads.is_finite() {
                        return Err(TrainError::Diverged { stage: "ppo", epoch, last_good: Box::new(policy) });
                    }
                    let value_grads = grads.split_off(&value_params);
                    opt.step(&mut policy.params, &grads);
                    value_opt.step(&mut policy.params, &value_grads);
                    loss_sum += value;
                    n_steps += 1;
                }
            }
        }
        let mean_kl = kl_sum / n_seqs as f64;
        let mut record = MetricRecord::new("ppo", epoch, loss_sum / n_steps.max(1) as f64);
        record.mean_reward = Some(reward_sum / n_seqs as f64);
        record.mean_kl = Some(mean_kl);
        trace.push(record);
        if mean_kl > config.kl_ceiling {
            return Err(TrainError::KlExceeded { epoch, kl: mean_kl, ceiling: config.kl_ceiling });
        }
    }
    Ok((policy, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_with_unit_lambda_is_return_minus_value() {
        let (adv, ret) = gae(&[0.0, 0.0, 1.0], &[0.2, 0.4, 0.5], 1.0, 1.0);
        assert_eq!(ret, vec![1.0, 1.0, 1.0]);
        assert!((adv[0] - 0.8).abs() < 1e-12 && (adv[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gae_with_zero_lambda_is_td_error() {
        let (adv, _) = gae(&[0.1, 0.2], &[0.5, 0.3], 0.9, 0.0);
        assert!((adv[0] - (0.1 + 0.9 * 0.3 - 0.5)).abs() < 1e-12);
        assert!((adv[1] - (0.2 - 0.3)).abs() < 1e-12);
    }

    #[test]
    fn config_bounds() {
        assert!(PpoConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { kl_coeff: -1.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig::default().validate().is_ok());
    }
}
