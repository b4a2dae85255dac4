//! Comment uniqueness scoring and the uniqueness-guided curriculum sampler.
//!
//! Uniqueness of a comment is one minus the mean cosine similarity to its
//! `m` most similar comments among the comments of the `k` most similar videos
//! (plus the video's own other comments). Training comments are then drawn
//! from the uniqueness-sorted list through the linear density
//! `P(x) = a + 2(1 − a)x` on `[0, 1]`, whose CDF is `F(x) = ax + (1 − a)x²`.
//! `a = 1` is uniform; `a > 1` favours the head of the list (most unique).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Comment, Corpus, Video};
use crate::text::tokenize;

pub const DEFAULT_TEXT_DIM: usize = 256;
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_M: usize = 20;

#[derive(Debug, Error)]
pub enum UniquenessError {
    #[error("density parameter a = {0} outside [0, 2]")]
    BadDensity(f64),
    #[error("J must be at least 1")]
    EmptyList,
    #[error("unknown video {0}")]
    UnknownVideo(String),
    #[error("video {0} has no comments")]
    NoComments(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
}

/// Maps comments and videos to L2-normalized vectors.
pub trait EmbeddingProvider {
    fn embed_text(&self, text: &str) -> Vec<f64>;
    fn embed_video(&self, video: &Video) -> Vec<f64>;
}

/// Signed feature hashing of word unigrams and bigrams, plus mean-pooled video patches.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    pub text_dim: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self { text_dim: DEFAULT_TEXT_DIM }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

impl EmbeddingProvider for HashedEmbedder {
    fn embed_text(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut v = vec![0.0; self.text_dim];
        let mut add = |feature: &str| {
            let h = fnv1a(feature.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.text_dim as u64) as usize] += sign;
        };
        for t in &tokens {
            add(t);
        }
        for w in tokens.windows(2) {
            add(&format!("{} {}", w[0], w[1]));
        }
        normalize(v)
    }

    fn embed_video(&self, video: &Video) -> Vec<f64> {
        let f = &video.features;
        let mut v = vec![0.0; f.dim()];
        for chunk in f.data().chunks_exact(f.dim()) {
            for (acc, x) in v.iter_mut().zip(chunk) {
                *acc += *x as f64;
            }
        }
        let n = (f.frames() * f.patches()) as f64;
        normalize(v.into_iter().map(|x| x / n).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sorts `(score, id)` descending by score, ascending by id on ties.
fn sort_desc_by_score<T>(items: &mut [(f64, &str, T)]) {
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
}

/// Precomputed text and video embeddings for a whole corpus.
pub struct EmbeddingIndex<'c> {
    corpus: &'c Corpus,
    videos: Vec<Vec<f64>>,
    comments: HashMap<&'c str, Vec<f64>>,
}

impl<'c> EmbeddingIndex<'c> {
    pub fn new(corpus: &'c Corpus, provider: &dyn EmbeddingProvider) -> Self {
        let videos = corpus.videos().iter().map(|v| provider.embed_video(v)).collect();
        let comments = corpus
            .comments()
            .iter()
            .map(|c| (c.id.as_str(), provider.embed_text(&c.text)))
            .collect();
        Self { corpus, videos, comments }
    }

    pub fn neighbors(&self, video_id: &str, k: usize) -> Result<Vec<String>, UniquenessError> {
        let qi = self
            .corpus
            .video_position(video_id)
            .ok_or_else(|| UniquenessError::UnknownVideo(video_id.into()))?;
        let q = &self.videos[qi];
        let mut scored: Vec<(f64, &str, ())> = self
            .corpus
            .videos()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != qi)
            .map(|(i, v)| (dot(q, &self.videos[i]), v.id.as_str(), ()))
            .collect();
        sort_desc_by_score(&mut scored);
        Ok(scored.into_iter().take(k).map(|(_, id, _)| id.to_string()).collect())
    }

    pub fn scores(&self, video_id: &str, k: usize, m: usize) -> Result<Vec<UniquenessRecord>, UniquenessError> {
        let own = self.corpus.comments_of(video_id);
        if self.corpus.video(video_id).is_none() {
            return Err(UniquenessError::UnknownVideo(video_id.into()));
        }
        if own.is_empty() {
            return Err(UniquenessError::NoComments(video_id.into()));
        }
        let mut pool: Vec<&Comment> = own.clone();
        for n in self.neighbors(video_id, k)? {
            pool.extend(self.corpus.comments_of(&n));
        }
        Ok(own
            .iter()
            .map(|c| {
                let e = &self.comments[c.id.as_str()];
                let mut sims: Vec<f64> = pool
                    .iter()
                    .filter(|p| p.id != c.id)
                    .map(|p| dot(e, &self.comments[p.id.as_str()]))
                    .collect();
                UniquenessRecord::from_similarities(&c.id, &mut sims, m)
            })
            .collect())
    }

    /// Scores for every commented video, in corpus order.
    pub fn score_all(&self, k: usize, m: usize) -> Vec<UniquenessRecord> {
        self.corpus
            .videos()
            .iter()
            .filter(|v| !self.corpus.comments_of(&v.id).is_empty())
            .flat_map(|v| self.scores(&v.id, k, m).expect("video exists and has comments"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessRecord {
    pub comment_id: String,
    pub mean_similarity: f64,
    pub uniqueness: f64,
}

impl UniquenessRecord {
    /// Mean of the top-`m` similarities; an empty pool counts as maximally unique.
    fn from_similarities(comment_id: &str, sims: &mut [f64], m: usize) -> Self {
        if sims.is_empty() || m == 0 {
            return Self { comment_id: comment_id.into(), mean_similarity: 0.0, uniqueness: 1.0 };
        }
        sims.sort_by(|a, b| b.total_cmp(a));
        let top = &sims[..m.min(sims.len())];
        let mean = top.iter().sum::<f64>() / top.len() as f64;
        Self { comment_id: comment_id.into(), mean_similarity: mean, uniqueness: 1.0 - mean }
    }
}

pub fn video_neighbors(
    corpus: &Corpus,
    video_id: &str,
    k: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<String>, UniquenessError> {
    EmbeddingIndex::new(corpus, provider).neighbors(video_id, k)
}

pub fn uniqueness_scores(
    corpus: &Corpus,
    video_id: &str,
    k: usize,
    m: usize,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<UniquenessRecord>, UniquenessError> {
    EmbeddingIndex::new(corpus, provider).scores(video_id, k, m)
}

pub fn write_records(path: &Path, records: &[UniquenessRecord]) -> Result<(), UniquenessError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|source| UniquenessError::Io { path: path.display().to_string(), source })
}

pub fn read_records(path: &Path) -> Result<Vec<UniquenessRecord>, UniquenessError> {
    let text = fs::read_to_string(path)
        .map_err(|source| UniquenessError::Io { path: path.display().to_string(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| UniquenessError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Inverse-CDF draw of the normalized position `x ∈ [0, 1)` under `P(x) = a + 2(1 − a)x`.
pub fn sample_position(a: f64, u: f64) -> Result<f64, UniquenessError> {
    if !(0.0..=2.0).contains(&a) {
        return Err(UniquenessError::BadDensity(a));
    }
    if a == 1.0 {
        return Ok(u);
    }
    // (−a + √(a² + 4(1−a)u)) / (2(1−a)), rationalized so it stays stable as a → 1.
    let denom = a + (a * a + 4.0 * (1.0 - a) * u).sqrt();
    Ok(if denom > 0.0 { 2.0 * u / denom } else { 0.0 })
}

/// Maps `u ∈ [0, 1)` to an index into a uniqueness-sorted list of length `j`.
pub fn sample_index(j: usize, a: f64, u: f64) -> Result<usize, UniquenessError> {
    if j == 0 {
        return Err(UniquenessError::EmptyList);
    }
    let x = sample_position(a, u)?;
    Ok(((x * j as f64).floor() as usize).min(j - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSchedule {
    pub a0: f64,
    pub step: f64,
    pub epochs_per_level: usize,
    pub n_levels: usize,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        Self { a0: 0.6, step: 0.2, epochs_per_level: 20, n_levels: 5 }
    }
}

impl SamplingSchedule {
    /// Constant `a = 1`: plain random sampling.
    pub fn uniform() -> Self {
        Self { a0: 1.0, step: 0.0, epochs_per_level: 1, n_levels: 1 }
    }

    pub fn validate(&self) -> Result<(), UniquenessError> {
        let last = self.a0 + self.step * self.n_levels.saturating_sub(1) as f64;
        for a in [self.a0, last] {
            if !(0.0..=2.0).contains(&a) {
                return Err(UniquenessError::BadDensity(a));
            }
        }
        if self.epochs_per_level == 0 || self.n_levels == 0 {
            return Err(UniquenessError::BadDensity(f64::NAN));
        }
        Ok(())
    }
}

pub fn schedule_a(epoch: usize, s: &SamplingSchedule) -> f64 {
    let level = (epoch / s.epochs_per_level).min(s.n_levels.saturating_sub(1));
    s.a0 + s.step * level as f64
}

/// Orders comments most-unique first (ties by ascending id). Comments without
/// a record sort as uniqueness 0.
pub fn sort_by_uniqueness<'a>(
    comments: &[&'a Comment],
    records: &HashMap<String, f64>,
) -> Vec<&'a Comment> {
    let mut scored: Vec<(f64, &str, &Comment)> = comments
        .iter()
        .map(|c| (records.get(&c.id).copied().unwrap_or(0.0), c.id.as_str(), *c))
        .collect();
    sort_desc_by_score(&mut scored);
    scored.into_iter().map(|(_, _, c)| c).collect()
}

pub fn sample_training_comment<'a, R: Rng + ?Sized>(
    comments: &[&'a Comment],
    records: &HashMap<String, f64>,
    epoch: usize,
    schedule: &SamplingSchedule,
    rng: &mut R,
) -> Result<&'a Comment, UniquenessError> {
    let sorted = sort_by_uniqueness(comments, records);
    let a = schedule_a(epoch, schedule);
    let i = sample_index(sorted.len(), a, rng.random::<f64>())?;
    Ok(sorted[i])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn index_edge_cases() {
        for a in [0.0, 0.6, 1.0, 1.4, 2.0] {
            assert_eq!(sample_index(10, a, 0.0).unwrap(), 0);
        }
        assert_eq!(sample_index(100, 1.0, 0.73).unwrap(), 73);
        assert_eq!(sample_index(1000, 2.0, 0.25).unwrap(), 133);
        assert_eq!(sample_index(5, 1.0, 1.0).unwrap(), 4);
        assert!(matches!(sample_index(3, 2.5, 0.1), Err(UniquenessError::BadDensity(_))));
        assert!(matches!(sample_index(0, 1.0, 0.1), Err(UniquenessError::EmptyList)));
    }

    #[test]
    fn schedule_levels() {
        let s = SamplingSchedule::default();
        assert_eq!(schedule_a(0, &s), 0.6);
        assert!((schedule_a(45, &s) - 1.0).abs() < 1e-12);
        assert!((schedule_a(999, &s) - 1.4).abs() < 1e-12);
        assert!((schedule_a(19, &s) - 0.6).abs() < 1e-12);
        assert!((schedule_a(20, &s) - 0.8).abs() < 1e-12);
        s.validate().unwrap();
        let bad = SamplingSchedule { a0: 1.5, step: 0.2, epochs_per_level: 1, n_levels: 5 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn text_embedding_is_unit_and_deterministic() {
        let e = HashedEmbedder::default();
        let a = e.embed_text("so cute wow");
        assert_eq!(a, e.embed_text("So cute, wow!"));
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        assert!(e.embed_text("").iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_comment_always_sampled() {
        let c = Comment {
            id: "a".into(),
            video_id: "v".into(),
            text: "x".into(),
            likes: 0,
            publish_time: 0,
            true_engagement: None,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for epoch in 0..50 {
            let got = sample_training_comment(&[&c], &HashMap::new(), epoch, &SamplingSchedule::default(), &mut rng);
            assert_eq!(got.unwrap().id, "a");
        }
    }
}
