use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelError};
use crate::corpus::FeatureTensor;
use crate::nn::{Graph, Tensor};
use crate::text::{EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    Temperature,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub strategy: Strategy,
    pub temperature: f64,
    pub top_k: usize,
    /// Upper bound on generated tokens, end token included.
    pub max_len: usize,
    pub n_samples: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { strategy: Strategy::Greedy, temperature: 1.0, top_k: 10, max_len: 16, n_samples: 1 }
    }
}

impl DecodeParams {
    pub fn greedy(max_len: usize) -> Self {
        Self { max_len, ..Self::default() }
    }

    pub fn sampling(max_len: usize, n_samples: usize) -> Self {
        Self { strategy: Strategy::Temperature, max_len, n_samples, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if self.strategy == Strategy::TopK && self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.max_len == 0 || self.n_samples == 0 {
            return bad("max_len and n_samples must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated ids, ending with the end token when `finished`.
    pub tokens: Vec<u32>,
    /// Model log-probability of each generated token (temperature not applied).
    pub log_probs: Vec<f64>,
    /// False when generation stopped at `max_len` without an end token.
    pub finished: bool,
}

impl Generation {
    /// Tokens before the end token.
    pub fn words(&self) -> &[u32] {
        match self.tokens.iter().position(|&t| t == EOS) {
            Some(i) => &self.tokens[..i],
            None => &self.tokens,
        }
    }
}

fn pick<R: Rng + ?Sized>(log_probs: &[f64], decode: &DecodeParams, rng: &mut R) -> u32 {
    let argmax = || {
        let mut best = 0;
        for (i, &v) in log_probs.iter().enumerate() {
            if v > log_probs[best] {
                best = i;
            }
        }
        best as u32
    };
    let candidates: Vec<usize> = match decode.strategy {
        Strategy::Greedy => return argmax(),
        Strategy::Temperature => (0..log_probs.len()).collect(),
        Strategy::TopK => {
            let mut idx: Vec<usize> = (0..log_probs.len()).collect();
            idx.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
            idx.truncate(decode.top_k.min(idx.len()));
            idx
        }
    };
    let max = candidates.iter().map(|&i| log_probs[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates.iter().map(|&i| ((log_probs[i] - max) / decode.temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in candidates.iter().zip(&weights) {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    *candidates.last().expect("non-empty vocabulary") as u32
}

impl Model {
    pub fn generate<R: Rng + ?Sized>(
        &self,
        video: &FeatureTensor,
        decode: &DecodeParams,
        rng: &mut R,
    ) -> Result<Vec<Generation>, ModelError> {
        Ok(self.generate_batch(&[video], decode, rng)?.pop().unwrap_or_default())
    }

    /// `decode.n_samples` generations per video, sampled in video order.
    pub fn generate_batch<R: Rng + ?Sized>(
        &self,
        videos: &[&FeatureTensor],
        decode: &DecodeParams,
        rng: &mut R,
    ) -> Result<Vec<Vec<Generation>>, ModelError> {
        self.expect_token_head()?;
        decode.validate()?;
        let max_len = decode.max_len.min(self.config.max_comment_len);
        let mut out = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(32) {
            let mut g = Graph::inference(&self.params);
            let prompts = self.perceive_graph(&mut g, chunk)?;
            let prompts = g.value(prompts).clone();
            let n = chunk.len() * decode.n_samples;
            let mut gens = vec![Generation { tokens: Vec::new(), log_probs: Vec::new(), finished: false }; n];
            for step in 0..max_len {
                if gens.iter().all(|s| s.finished) {
                    break;
                }
                let mut g = Graph::inference(&self.params);
                let pv = g.input(prompts.clone());
                let padded: Vec<Vec<u32>> = gens
                    .iter()
                    .map(|s| {
                        let mut t = s.tokens.clone();
                        t.resize(step, PAD);
                        t
                    })
                    .collect();
                let seqs: Vec<(usize, &[u32])> =
                    padded.iter().enumerate().map(|(i, t)| (i / decode.n_samples, t.as_slice())).collect();
                let fwd = self.decode_graph(&mut g, pv, &seqs)?;
                let rows = (0..n).map(|i| fwd.predict_row(i, step)).collect();
                let ls = self.token_log_softmax(&mut g, &fwd, rows)?;
                let ls: &Tensor = g.value(ls);
                for (i, s) in gens.iter_mut().enumerate() {
                    if s.finished {
                        continue;
                    }
                    let row = ls.row(i);
                    let tok = pick(row, decode, rng);
                    s.tokens.push(tok);
                    s.log_probs.push(row[tok as usize]);
                    s.finished = tok == EOS;
                }
            }
            let mut it = gens.into_iter();
            for _ in chunk {
                out.push(it.by_ref().take(decode.n_samples).collect());
            }
        }
        Ok(out)
    }
}
