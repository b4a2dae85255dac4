//! Seeded synthetic corpus with planted engagement and temporal like decay.
//!
//! The planted world:
//! - every category has a prototype feature vector and its own set of content
//!   words; every content word has a random feature direction;
//! - a video shows `salient_per_video` objects drawn from its category's
//!   words, one object per patch, so patch features carry the object's
//!   direction on top of the category prototype;
//! - a comment is either a generic phrase from a pool shared by all videos
//!   (true engagement 0.1–0.3, fixed per phrase) or a template filled with the
//!   video's salient words (0.6–0.95, rising with the number of words
//!   mentioned and a per-template bonus), jittered by `engagement_noise`;
//! - likes ~ Poisson(like_rate · engagement · exp(−delay / decay_timescale)).
//!
//! Generic comments are posted within `generic_horizon_days` of the video,
//! specific ones anywhere in `horizon_days`: early commenters write the
//! generic phrases, which is what makes raw like counts a confounded
//! preference signal.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Comment, Corpus, CorpusError, FeatureTensor, Video, SECONDS_PER_DAY};

const BASE_EPOCH: i64 = 1_700_000_000;
const PUBLISH_SPREAD_DAYS: i64 = 365;

const GENERIC_WORDS: &[&str] = &[
    "wow", "cute", "omg", "lol", "amazing", "beautiful", "great", "awesome", "haha", "best",
    "ever", "cool", "yes", "nice", "love", "this", "funny", "perfect", "wonderful", "sweet",
    "lovely", "crazy", "epic", "fire",
];

/// Specific-comment templates: text with `{0}`..`{2}` slots and an engagement bonus.
const TEMPLATES: &[(&str, f64)] = &[
    ("look at that {0}", 0.0),
    ("the {0} is so good", 0.05),
    ("that {0} with the {1}", 0.0),
    ("i like how the {0} and {1} move", 0.1),
    ("the {0} the {1} and the {2} at once", 0.05),
    ("when the {0} meets the {1} near the {2}", 0.15),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_videos: usize,
    pub n_categories: usize,
    /// Inclusive range of comments per video.
    pub comments_per_video: (usize, usize),
    /// Total number of distinct words in the generated lexicon.
    pub vocab_size: usize,
    pub frames: usize,
    pub patches: usize,
    pub feature_dim: usize,
    pub salient_per_video: usize,
    /// Distinct generic phrases shared by all videos. Kept small so that generic
    /// chatter repeats across videos, as it does on real platforms.
    pub generic_pool_size: usize,
    pub specific_fraction: f64,
    /// Likes per unit engagement for a comment posted at the moment of publishing.
    pub like_rate: f64,
    /// Exponential like-decay timescale in seconds.
    pub decay_timescale: f64,
    pub engagement_noise: f64,
    pub horizon_days: f64,
    pub generic_horizon_days: f64,
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_videos: 1000,
            n_categories: 8,
            comments_per_video: (12, 24),
            vocab_size: 200,
            frames: 4,
            patches: 4,
            feature_dim: 32,
            salient_per_video: 3,
            generic_pool_size: 8,
            specific_fraction: 0.35,
            like_rate: 1000.0,
            decay_timescale: 20.0 * SECONDS_PER_DAY as f64,
            engagement_noise: 0.02,
            horizon_days: 90.0,
            generic_horizon_days: 10.0,
            feature_noise: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn template_words() -> BTreeSet<&'static str> {
        TEMPLATES
            .iter()
            .flat_map(|(t, _)| t.split_whitespace())
            .filter(|w| !w.starts_with('{'))
            .collect()
    }

    fn content_words_needed(&self) -> usize {
        self.n_categories * self.salient_per_video.max(3)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidConfig(m));
        let (lo, hi) = self.comments_per_video;
        if self.n_categories == 0 || self.frames == 0 || self.patches == 0 || self.feature_dim == 0 {
            return bad("category, frame, patch and feature counts must be positive".into());
        }
        if lo == 0 || lo > hi {
            return bad(format!("comments_per_video range ({lo}, {hi}) is empty or starts at 0"));
        }
        if self.generic_pool_size == 0 {
            return bad("generic_pool_size must be positive".into());
        }
        if !(3..=self.patches.max(3)).contains(&self.salient_per_video) {
            return bad("salient_per_video must be at least 3 (templates use up to 3 slots) and at most patches".into());
        }
        if !(0.0..=1.0).contains(&self.specific_fraction) {
            return bad(format!("specific_fraction {} outside [0, 1]", self.specific_fraction));
        }
        if !(self.like_rate > 0.0 && self.decay_timescale > 0.0) {
            return bad("like_rate and decay_timescale must be positive".into());
        }
        if !(self.engagement_noise >= 0.0 && self.feature_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if !(self.horizon_days > 0.0 && self.generic_horizon_days > 0.0) {
            return bad("horizons must be positive".into());
        }
        let fixed = GENERIC_WORDS.len() + Self::template_words().len();
        if self.vocab_size < fixed + self.content_words_needed() {
            return bad(format!(
                "vocab_size {} too small: need at least {}",
                self.vocab_size,
                fixed + self.content_words_needed()
            ));
        }
        Ok(())
    }
}

struct World {
    prototypes: Vec<Vec<f64>>,
    /// Content words per category.
    topic_words: Vec<Vec<String>>,
    /// Feature direction per content word, aligned with `topic_words`.
    directions: Vec<Vec<Vec<f64>>>,
    generic: Vec<(String, f64)>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &BTreeSet<&str>) -> Vec<String> {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let word: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if !taken.contains(word.as_str()) && seen.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

fn build_world(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> World {
    let d = cfg.feature_dim;
    let prototypes = (0..cfg.n_categories)
        .map(|_| unit_vector(rng, d).into_iter().map(|x| x * 2.0).collect())
        .collect();

    let mut taken: BTreeSet<&str> = GENERIC_WORDS.iter().copied().collect();
    taken.extend(SyntheticConfig::template_words());
    let n_content = cfg.vocab_size - taken.len();
    let content = pseudo_words(rng, n_content, &taken);
    let mut topic_words = vec![Vec::new(); cfg.n_categories];
    for (i, w) in content.into_iter().enumerate() {
        topic_words[i % cfg.n_categories].push(w);
    }
    let directions = topic_words
        .iter()
        .map(|ws| ws.iter().map(|_| unit_vector(rng, d)).collect())
        .collect();

    let mut phrases = BTreeSet::new();
    let mut generic = Vec::with_capacity(cfg.generic_pool_size);
    let max_distinct: usize = (1..=3).map(|k| GENERIC_WORDS.len().pow(k)).sum();
    while generic.len() < cfg.generic_pool_size {
        let len = rng.random_range(1..=3);
        let phrase = (0..len)
            .map(|_| *GENERIC_WORDS.choose(rng).unwrap())
            .collect::<Vec<_>>()
            .join(" ");
        if phrases.insert(phrase.clone()) || phrases.len() >= max_distinct {
            generic.push((phrase, rng.random_range(0.1..0.3)));
        }
    }
    World { prototypes, topic_words, directions, generic }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let world = build_world(cfg, &mut rng);
    let (t, l, d) = (cfg.frames, cfg.patches, cfg.feature_dim);

    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut comments = Vec::new();
    for vi in 0..cfg.n_videos {
        let id = format!("v{vi:05}");
        let cat = rng.random_range(0..cfg.n_categories);
        let publish_time = BASE_EPOCH + rng.random_range(0..PUBLISH_SPREAD_DAYS * SECONDS_PER_DAY);

        let mut objects: Vec<usize> = (0..world.topic_words[cat].len()).collect();
        objects.shuffle(&mut rng);
        objects.truncate(cfg.salient_per_video);

        let mut data = Vec::with_capacity(t * l * d);
        for frame in 0..t {
            for patch in 0..l {
                let dir = &world.directions[cat][objects[(patch + frame) % objects.len()]];
                for k in 0..d {
                    let x = world.prototypes[cat][k] + 2.0 * dir[k] + cfg.feature_noise * normal(&mut rng);
                    data.push(x as f32);
                }
            }
        }
        let features = FeatureTensor::new(t, l, d, data).expect("generated features are valid");

        let salient: Vec<&str> = objects.iter().map(|&o| world.topic_words[cat][o].as_str()).collect();
        let n_comments = rng.random_range(cfg.comments_per_video.0..=cfg.comments_per_video.1);
        for ci in 0..n_comments {
            let specific = rng.random::<f64>() < cfg.specific_fraction;
            let (text, base, horizon_days) = if specific {
                let (template, bonus) = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
                let slots = (0..3).filter(|k| template.contains(&format!("{{{k}}}"))).count();
                let mut fill = salient.clone();
                fill.shuffle(&mut rng);
                let mut text = template.to_string();
                for (k, w) in fill.iter().take(slots).enumerate() {
                    text = text.replace(&format!("{{{k}}}"), w);
                }
                (text, 0.6 + 0.1 * (slots as f64 - 1.0) + bonus, cfg.horizon_days)
            } else {
                let (phrase, e) = &world.generic[rng.random_range(0..world.generic.len())];
                (phrase.clone(), *e, cfg.generic_horizon_days)
            };
            let engagement = (base + cfg.engagement_noise * normal(&mut rng)).clamp(0.0, 1.0);
            let delay = (rng.random::<f64>() * horizon_days * SECONDS_PER_DAY as f64).floor();
            let rate = cfg.like_rate * engagement * (-delay / cfg.decay_timescale).exp();
            let likes = if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(&mut rng) as u64
            } else {
                0
            };
            comments.push(Comment {
                id: format!("{id}-c{ci:03}"),
                video_id: id.clone(),
                text,
                likes,
                publish_time: publish_time + delay as i64,
                true_engagement: Some(engagement),
            });
        }
        videos.push(Video { id, category: format!("cat{cat:02}"), publish_time, features });
    }
    Corpus::new(videos, comments)
}
