//! Temporal like-bias analysis and comparison-pair construction.
//!
//! A debiased pair `(pos, neg)` of comments on the same video requires the
//! positive to have strictly more likes *and* to have been posted strictly
//! later: a later comment that still out-collects an earlier one carries a
//! preference signal that the head start cannot explain.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Comment, Corpus, SECONDS_PER_DAY};

/// Cap value meaning "keep every qualifying pair".
pub const UNLIMITED: usize = usize::MAX;
pub const DEFAULT_PAIR_CAP: usize = 200;

#[derive(Debug, Error)]
pub enum PairError {
    #[error("max_pairs_per_video must be at least 1")]
    ZeroCap,
    #[error("val_fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("split of {videos} videos at fraction {fraction} leaves one side empty")]
    DegenerateSplit { videos: usize, fraction: f64 },
    #[error("pair {0:?} is invalid against the corpus: {1}")]
    InvalidPair(ComparisonPair, String),
    #[error("pair set was built from corpus {expected}, not {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, #[source] source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComparisonPair {
    pub video_id: String,
    pub pos_id: String,
    pub neg_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub corpus_fingerprint: String,
    /// `None` when uncapped.
    pub max_pairs_per_video: Option<usize>,
    pub seed: u64,
    pub temporal_debiasing: bool,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<ComparisonPair>,
    pub corpus_fingerprint: String,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn video_ids(&self) -> BTreeSet<&str> {
        self.pairs.iter().map(|p| p.video_id.as_str()).collect()
    }

    /// Checks every pair against the corpus: same video, distinct comments,
    /// strictly more likes, and (when `temporal` is set) strictly later.
    pub fn validate(&self, corpus: &Corpus, temporal: bool) -> Result<(), PairError> {
        let found = corpus.fingerprint();
        if found != self.corpus_fingerprint {
            return Err(PairError::FingerprintMismatch {
                expected: self.corpus_fingerprint.clone(),
                found,
            });
        }
        let mut seen = HashSet::new();
        for p in &self.pairs {
            let fail = |why: &str| Err(PairError::InvalidPair(p.clone(), why.to_string()));
            if !seen.insert(p) {
                return fail("duplicate");
            }
            let (Some(pos), Some(neg)) = (corpus.comment(&p.pos_id), corpus.comment(&p.neg_id)) else {
                return fail("unknown comment");
            };
            if p.pos_id == p.neg_id {
                return fail("positive equals negative");
            }
            if pos.video_id != p.video_id || neg.video_id != p.video_id {
                return fail("comment belongs to another video");
            }
            if pos.likes <= neg.likes {
                return fail("positive does not have strictly more likes");
            }
            if temporal && pos.publish_time <= neg.publish_time {
                return fail("positive is not strictly later");
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path, manifest: &PairManifest) -> Result<(), PairError> {
        let io = |source| PairError::Io { path: path.display().to_string(), source };
        let mut out = Vec::new();
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p).expect("pair serializes");
            out.push(b'\n');
        }
        fs::write(path, out).map_err(io)?;
        let mpath = manifest_path(path);
        let mut f = fs::File::create(&mpath)
            .map_err(|source| PairError::Io { path: mpath.display().to_string(), source })?;
        serde_json::to_writer_pretty(&mut f, manifest).expect("manifest serializes");
        writeln!(f).map_err(|source| PairError::Io { path: mpath.display().to_string(), source })
    }

    pub fn read(path: &Path) -> Result<(Self, PairManifest), PairError> {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |source| PairError::Io { path: p, source }
        };
        let text = fs::read_to_string(path).map_err(io(path))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            pairs.push(serde_json::from_str(line).map_err(|e| PairError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        let mpath = manifest_path(path);
        let mtext = fs::read_to_string(&mpath).map_err(io(&mpath))?;
        let manifest: PairManifest = serde_json::from_str(&mtext).map_err(|e| PairError::Malformed {
            path: mpath.display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        let set = PairSet { pairs, corpus_fingerprint: manifest.corpus_fingerprint.clone() };
        Ok((set, manifest))
    }
}

/// `pairs.jsonl` -> `pairs.manifest.json`.
pub fn manifest_path(pairs_path: &Path) -> std::path::PathBuf {
    let stem = pairs_path.file_stem().and_then(|s| s.to_str()).unwrap_or("pairs");
    pairs_path.with_file_name(format!("{stem}.manifest.json"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasBucket {
    pub day_offset: i64,
    pub mean_likes: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCurve {
    pub buckets: Vec<BiasBucket>,
}

/// Mean likes per whole day elapsed between video and comment publication.
pub fn bias_curve(corpus: &Corpus) -> BiasCurve {
    let mut acc: BTreeMap<i64, (u128, usize)> = BTreeMap::new();
    for c in corpus.comments() {
        let video = corpus.video(&c.video_id).expect("corpus invariant");
        let day = (c.publish_time - video.publish_time).div_euclid(SECONDS_PER_DAY);
        let e = acc.entry(day).or_default();
        e.0 += c.likes as u128;
        e.1 += 1;
    }
    BiasCurve {
        buckets: acc
            .into_iter()
            .map(|(day_offset, (sum, count))| BiasBucket {
                day_offset,
                mean_likes: sum as f64 / count as f64,
                count,
            })
            .collect(),
    }
}

fn prefers(a: &Comment, b: &Comment, temporal: bool) -> bool {
    a.likes > b.likes && (!temporal || a.publish_time > b.publish_time)
}

fn build(corpus: &Corpus, cap: usize, seed: u64, temporal: bool) -> Result<PairSet, PairError> {
    if cap == 0 {
        return Err(PairError::ZeroCap);
    }
    let mut pairs = Vec::new();
    for (vi, video) in corpus.videos().iter().enumerate() {
        let comments = corpus.comments_of(&video.id);
        let mut candidates = Vec::new();
        for a in &comments {
            for b in &comments {
                if prefers(a, b, temporal) {
                    candidates.push((a.id.as_str(), b.id.as_str()));
                }
            }
        }
        let chosen: Vec<(&str, &str)> = if candidates.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(vi as u64);
            let mut idx = index::sample(&mut rng, candidates.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| candidates[i]).collect()
        } else {
            candidates
        };
        pairs.extend(chosen.into_iter().map(|(p, n)| ComparisonPair {
            video_id: video.id.clone(),
            pos_id: p.to_string(),
            neg_id: n.to_string(),
        }));
    }
    Ok(PairSet { pairs, corpus_fingerprint: corpus.fingerprint() })
}

/// Debiased pairs: strictly more likes and strictly later publication.
pub fn build_pairs(corpus: &Corpus, max_pairs_per_video: usize, rng_seed: u64) -> Result<PairSet, PairError> {
    build(corpus, max_pairs_per_video, rng_seed, true)
}

/// Raw-likes pairs with no temporal constraint, for the debiasing ablation.
pub fn build_biased_pairs(
    corpus: &Corpus,
    max_pairs_per_video: usize,
    rng_seed: u64,
) -> Result<PairSet, PairError> {
    build(corpus, max_pairs_per_video, rng_seed, false)
}

/// Splits by video so that no video contributes to both sides.
pub fn split_pairs(set: &PairSet, val_fraction: f64, rng_seed: u64) -> Result<(PairSet, PairSet), PairError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(PairError::BadFraction(val_fraction));
    }
    let mut videos: Vec<&str> = set.video_ids().into_iter().collect();
    let n_val = (val_fraction * videos.len() as f64).round() as usize;
    if n_val == 0 || n_val >= videos.len() {
        return Err(PairError::DegenerateSplit { videos: videos.len(), fraction: val_fraction });
    }
    videos.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let val: HashSet<&str> = videos[..n_val].iter().copied().collect();
    let (v, t): (Vec<_>, Vec<_>) = set.pairs.iter().cloned().partition(|p| val.contains(p.video_id.as_str()));
    let mk = |pairs| PairSet { pairs, corpus_fingerprint: set.corpus_fingerprint.clone() };
    Ok((mk(t), mk(v)))
}
