//! Objective evaluation of generated comments: relevance (BLEU, ROUGE-L),
//! diversity (distinct bigrams, self-CIDEr), engagement (mean normalized
//! reward) and reward-vs-ground-truth agreement.
//!
//! Every text metric tokenizes with [`crate::text::tokenize`]: lowercase,
//! punctuation stripped, whitespace split.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, FeatureTensor};
use crate::model::{Model, ModelError};
use crate::pairs::ComparisonPair;
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
    #[error("hypothesis {0} has no references")]
    NoReferences(usize),
    #[error("unknown video or comment {0}")]
    UnknownId(String),
    #[error("comment {0} has no ground-truth engagement")]
    MissingTruth(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Tokens = Vec<String>;

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in [0, 100].
///
/// Clipped n-gram precisions for n = 1..=max_n are pooled over the corpus and
/// combined by geometric mean, times the brevity penalty `exp(1 − r/c)` when
/// the total hypothesis length `c` is below the total closest-reference
/// length `r` (ties go to the shorter reference). A zero precision for n ≥ 2
/// is replaced by `1 / (total + 1)`.
pub fn bleu(hypotheses: &[Tokens], references: &[Vec<Tokens>], max_n: usize) -> Result<f64, MetricError> {
    if hypotheses.is_empty() || max_n == 0 {
        return Err(MetricError::Empty("no hypotheses"));
    }
    if hypotheses.len() != references.len() {
        return Err(MetricError::NoReferences(references.len().min(hypotheses.len())));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (i, (hyp, refs)) in hypotheses.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(MetricError::NoReferences(i));
        }
        c += hyp.len();
        r += refs
            .iter()
            .map(|x| x.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("non-empty references");
        for n in 1..=max_n {
            let counts = ngrams(hyp, n);
            let ref_counts: Vec<_> = refs.iter().map(|x| ngrams(x, n)).collect();
            for (g, k) in &counts {
                let cap = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matches[n - 1] += (*k).min(cap);
            }
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if c == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok((100.0 * bp * (log_sum / max_n as f64).exp()).clamp(0.0, 100.0))
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure `(1+β²)PR / (R + β²P)` with β = 1.2, best over references, in [0, 1].
pub fn rouge_l_sentence(hypothesis: &[String], references: &[Tokens]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let l = lcs(hypothesis, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / hypothesis.len() as f64;
            let rc = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rc / (rc + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean sentence ROUGE-L over the corpus, in [0, 100].
pub fn rouge_l(hypotheses: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64, MetricError> {
    if hypotheses.is_empty() {
        return Err(MetricError::Empty("no hypotheses"));
    }
    if hypotheses.len() != references.len() {
        return Err(MetricError::NoReferences(references.len().min(hypotheses.len())));
    }
    let mut total = 0.0;
    for (i, (h, refs)) in hypotheses.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(MetricError::NoReferences(i));
        }
        total += rouge_l_sentence(h, refs);
    }
    Ok(100.0 * total / hypotheses.len() as f64)
}

/// Distinct token bigrams over all comments.
pub fn num_bigrams(comments: &[Tokens]) -> usize {
    comments.iter().flat_map(|c| c.windows(2)).collect::<BTreeSet<_>>().len()
}

const CIDER_N: usize = 4;

/// Self-CIDEr diversity.
///
/// Each comment becomes, for n = 1..=4, a TF-IDF vector of its n-grams with
/// `idf = ln(D / df)`, where `df` counts the comments of the pool containing
/// the n-gram and `D` is the pool size. The kernel entry for two comments is
/// the mean over n of the cosine of their vectors (0 when either is empty).
/// With kernel eigenvalues λ and `m` comments, diversity is
/// `−log_m(√λ_max / Σ √λ_i)`, reported in [0, 100]. A kernel with no positive
/// eigenvalue has no spread and scores 0.
#[derive(Debug, Clone)]
pub struct SelfCider {
    doc_freq: HashMap<Tokens, usize>,
    n_docs: usize,
}

impl SelfCider {
    pub fn new(pool: &[Tokens]) -> Self {
        let mut doc_freq: HashMap<Tokens, usize> = HashMap::new();
        for c in pool {
            let mut seen: BTreeSet<&[String]> = BTreeSet::new();
            for n in 1..=CIDER_N {
                seen.extend(ngrams(c, n).into_keys());
            }
            for g in seen {
                *doc_freq.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        Self { doc_freq, n_docs: pool.len() }
    }

    fn vectors<'c>(&self, comment: &'c [String]) -> Vec<BTreeMap<&'c [String], f64>> {
        (1..=CIDER_N)
            .map(|n| {
                let counts = ngrams(comment, n);
                let total: usize = counts.values().sum();
                counts
                    .into_iter()
                    .map(|(g, k)| {
                        let df = self.doc_freq.get(g).copied().unwrap_or(0).max(1) as f64;
                        let idf = (self.n_docs.max(1) as f64 / df).ln();
                        (g, k as f64 / total as f64 * idf)
                    })
                    .collect()
            })
            .collect()
    }

    /// Pairwise similarity kernel of `comments`.
    pub fn kernel(&self, comments: &[Tokens]) -> DMatrix<f64> {
        let vecs: Vec<_> = comments.iter().map(|c| self.vectors(c)).collect();
        let norms: Vec<Vec<f64>> =
            vecs.iter().map(|v| v.iter().map(|g| g.values().map(|x| x * x).sum::<f64>().sqrt()).collect()).collect();
        let m = comments.len();
        DMatrix::from_fn(m, m, |i, j| {
            let mut s = 0.0;
            for n in 0..CIDER_N {
                let d = norms[i][n] * norms[j][n];
                if d > 0.0 {
                    let dot: f64 = vecs[i][n].iter().filter_map(|(g, x)| vecs[j][n].get(g).map(|y| x * y)).sum();
                    s += dot / d;
                }
            }
            s / CIDER_N as f64
        })
    }

    /// Diversity of one video's comments; `None` for fewer than two.
    pub fn score(&self, comments: &[Tokens]) -> Option<f64> {
        let m = comments.len();
        if m < 2 {
            return None;
        }
        let eig = self.kernel(comments).symmetric_eigen();
        // round-off leaves eigenvalues of order 1e-17 where the kernel is singular
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let roots: Vec<f64> =
            eig.eigenvalues.iter().map(|&l| if l > 1e-10 * top { l.sqrt() } else { 0.0 }).collect();
        let sum: f64 = roots.iter().sum();
        let max = roots.iter().copied().fold(0.0, f64::max);
        if sum <= 1e-12 {
            return Some(0.0);
        }
        let d = -(max / sum).ln() / (m as f64).ln();
        Some((100.0 * d).clamp(0.0, 100.0))
    }
}

/// Self-CIDEr of one comment set, using the set itself as the IDF pool.
pub fn self_cider(comments: &[Tokens]) -> Option<f64> {
    SelfCider::new(comments).score(comments)
}

/// Mean of `reward_score − offset` over `items`.
pub fn avg_reward(reward: &Model, items: &[(&FeatureTensor, &[u32])], offset: f64) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Empty("no scored comments"));
    }
    let scores = reward.reward_scores(items)?;
    Ok(scores.iter().map(|s| s - offset).sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub n_pairs: usize,
    /// Pairs where the scorer prefers the ground-truth side; ties count ½.
    pub agree_fraction: f64,
}

/// Agreement of `(preferred, other)` score pairs with the ground truth.
pub fn agreement_from_scores(pairs: &[(f64, f64)]) -> Result<AgreementReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("no comparison pairs"));
    }
    let agree: f64 = pairs
        .iter()
        .map(|(p, n)| match p.partial_cmp(n) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        })
        .sum();
    Ok(AgreementReport { n_pairs: pairs.len(), agree_fraction: agree / pairs.len() as f64 })
}

/// Agreement of a reward model with pairs whose `pos_id` is the
/// ground-truth preferred comment.
pub fn agreement(reward: &Model, corpus: &Corpus, pairs: &[ComparisonPair]) -> Result<AgreementReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("no comparison pairs"));
    }
    let mut items = Vec::with_capacity(2 * pairs.len());
    let mut encoded = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let video = corpus.video(&p.video_id).ok_or_else(|| MetricError::UnknownId(p.video_id.clone()))?;
        for id in [&p.pos_id, &p.neg_id] {
            let c = corpus.comment(id).ok_or_else(|| MetricError::UnknownId(id.clone()))?;
            encoded.push(reward.encode_comment(&c.text));
            items.push(&video.features);
        }
    }
    let items: Vec<(&FeatureTensor, &[u32])> = items.into_iter().zip(encoded.iter().map(Vec::as_slice)).collect();
    let scores = reward.reward_scores(&items)?;
    let pairs: Vec<(f64, f64)> = scores.chunks(2).map(|s| (s[0], s[1])).collect();
    agreement_from_scores(&pairs)
}

/// Up to `per_video` random comment pairs from each of up to `n_videos`
/// random videos, ordered by planted engagement. Pairs with equal engagement
/// are skipped.
pub fn ground_truth_pairs(
    corpus: &Corpus,
    n_videos: usize,
    per_video: usize,
    seed: u64,
) -> Result<Vec<ComparisonPair>, MetricError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut videos: Vec<&str> = corpus.videos().iter().map(|v| v.id.as_str()).collect();
    videos.shuffle(&mut rng);
    let mut out = Vec::new();
    for v in videos.into_iter().take(n_videos) {
        let comments = corpus.comments_of(v);
        let mut truth = Vec::with_capacity(comments.len());
        for c in &comments {
            truth.push(c.true_engagement.ok_or_else(|| MetricError::MissingTruth(c.id.clone()))?);
        }
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for i in 0..comments.len() {
            for j in i + 1..comments.len() {
                if truth[i] != truth[j] {
                    candidates.push((i, j));
                }
            }
        }
        for &(i, j) in candidates.choose_multiple(&mut rng, per_video) {
            let (p, n) = if truth[i] > truth[j] { (i, j) } else { (j, i) };
            out.push(ComparisonPair {
                video_id: v.to_string(),
                pos_id: comments[p].id.clone(),
                neg_id: comments[n].id.clone(),
            });
        }
    }
    Ok(out)
}

/// The `n` comments of a video with the highest planted engagement, used as
/// relevance references.
pub fn reference_comments(corpus: &Corpus, video_id: &str, n: usize) -> Result<Vec<Tokens>, MetricError> {
    let mut comments = corpus.comments_of(video_id);
    if comments.is_empty() {
        return Err(MetricError::UnknownId(video_id.to_string()));
    }
    for c in &comments {
        if c.true_engagement.is_none() {
            return Err(MetricError::MissingTruth(c.id.clone()));
        }
    }
    comments.sort_by(|a, b| b.true_engagement.partial_cmp(&a.true_engagement).unwrap().then(a.id.cmp(&b.id)));
    Ok(comments.iter().take(n).map(|c| tokenize(&c.text)).collect())
}

/// Generated comments for one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoGenerations {
    pub video_id: String,
    pub comments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub video_id: String,
    pub bleu: f64,
    pub rouge_l: f64,
    pub num_bigrams: usize,
    pub self_cider: Option<f64>,
    pub avg_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub rouge_l: f64,
    pub num_bigrams: usize,
    /// Mean over videos with at least two comments.
    pub self_cider: Option<f64>,
    pub avg_reward: f64,
    pub n_comments: usize,
    /// Generations with no words; excluded from the reward average.
    pub n_empty: usize,
    pub per_video: Vec<VideoEval>,
}

pub const DEFAULT_N_REFERENCES: usize = 10;

/// Scores generations against the top-`n_references` comments of each video
/// and with the frozen reward model.
pub fn evaluate(
    corpus: &Corpus,
    generations: &[VideoGenerations],
    reward: &Model,
    offset: f64,
    n_references: usize,
) -> Result<EvalReport, MetricError> {
    let tokenized: Vec<Vec<Tokens>> =
        generations.iter().map(|g| g.comments.iter().map(|c| tokenize(c)).collect()).collect();
    let pool: Vec<Tokens> = tokenized.iter().flatten().cloned().collect();
    if pool.is_empty() {
        return Err(MetricError::Empty("no generated comments"));
    }
    let cider = SelfCider::new(&pool);
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let mut per_video = Vec::with_capacity(generations.len());
    let mut reward_sum = 0.0;
    let mut n_scored = 0usize;
    let mut n_empty = 0usize;
    for (g, toks) in generations.iter().zip(&tokenized) {
        let video = corpus.video(&g.video_id).ok_or_else(|| MetricError::UnknownId(g.video_id.clone()))?;
        let r = reference_comments(corpus, &g.video_id, n_references)?;
        let encoded: Vec<Vec<u32>> = g
            .comments
            .iter()
            .map(|c| reward.vocab.encode(c))
            .filter(|t| !t.is_empty())
            .collect();
        n_empty += g.comments.len() - encoded.len();
        let items: Vec<(&FeatureTensor, &[u32])> = encoded.iter().map(|t| (&video.features, t.as_slice())).collect();
        let video_reward = if items.is_empty() { None } else { Some(avg_reward(reward, &items, offset)?) };
        if let Some(a) = video_reward {
            reward_sum += a * items.len() as f64;
            n_scored += items.len();
        }
        let rs = vec![r; toks.len()];
        let (b, rl) = if toks.is_empty() { (0.0, 0.0) } else { (bleu(toks, &rs, 4)?, rouge_l(toks, &rs)?) };
        per_video.push(VideoEval {
            video_id: g.video_id.clone(),
            bleu: b,
            rouge_l: rl,
            num_bigrams: num_bigrams(toks),
            self_cider: cider.score(toks),
            avg_reward: video_reward,
        });
        hyps.extend(toks.iter().cloned());
        refs.extend(rs);
    }
    if n_scored == 0 {
        return Err(MetricError::Empty("every generated comment is empty"));
    }
    let ciders: Vec<f64> = per_video.iter().filter_map(|v| v.self_cider).collect();
    Ok(EvalReport {
        bleu: bleu(&hyps, &refs, 4)?,
        rouge_l: rouge_l(&hyps, &refs)?,
        num_bigrams: num_bigrams(&pool),
        self_cider: if ciders.is_empty() { None } else { Some(ciders.iter().sum::<f64>() / ciders.len() as f64) },
        avg_reward: reward_sum / n_scored as f64,
        n_comments: pool.len(),
        n_empty,
        per_video,
    })
}
