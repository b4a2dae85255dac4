use std::collections::HashMap;

use engage_core::corpus::{generate_synthetic, load_corpus, write_corpus, Comment, Corpus, SyntheticConfig};
use proptest::prelude::*;

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn delays(corpus: &Corpus) -> Vec<(f64, &Comment)> {
    corpus
        .comments()
        .iter()
        .map(|c| ((c.publish_time - corpus.video(&c.video_id).unwrap().publish_time) as f64, c))
        .collect()
}

#[test]
fn decay_corrected_likes_track_engagement() {
    let cfg = SyntheticConfig { n_videos: 600, seed: 4, ..SyntheticConfig::default() };
    let corpus = generate_synthetic(&cfg).unwrap();
    let (mut truth, mut corrected) = (Vec::new(), Vec::new());
    for (tau, c) in delays(&corpus) {
        truth.push(c.true_engagement.unwrap());
        corrected.push(c.likes as f64 * (tau / cfg.decay_timescale).exp());
    }
    let rho = spearman(&truth, &corrected);
    assert!(rho > 0.8, "spearman {rho}");
    // raw likes alone are confounded by posting time
    let raw: Vec<f64> = corpus.comments().iter().map(|c| c.likes as f64).collect();
    assert!(spearman(&truth, &raw) < rho);
}

#[test]
fn likes_decay_within_an_engagement_band() {
    let cfg = SyntheticConfig { n_videos: 1000, seed: 5, ..SyntheticConfig::default() };
    let corpus = generate_synthetic(&cfg).unwrap();
    let mut buckets: HashMap<i64, (f64, usize)> = HashMap::new();
    for (tau, c) in delays(&corpus) {
        let e = c.true_engagement.unwrap();
        if (0.7..0.8).contains(&e) {
            let b = buckets.entry((tau / (15.0 * 86400.0)) as i64).or_default();
            b.0 += c.likes as f64;
            b.1 += 1;
        }
    }
    let mut keys: Vec<i64> = buckets.keys().copied().collect();
    keys.sort();
    assert!(keys.len() >= 5);
    let means: Vec<f64> = keys.iter().map(|k| buckets[k].0 / buckets[k].1 as f64).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "bucket means {means:?}");
    }
}

#[test]
fn write_load_round_trip_on_synthetic_data() {
    let corpus = generate_synthetic(&SyntheticConfig { n_videos: 25, seed: 9, ..SyntheticConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(files.features.len(), 25);
    let loaded = load_corpus(&files.videos, &files.comments).unwrap();
    assert_eq!(loaded, corpus);
    assert_eq!(loaded.fingerprint(), corpus.fingerprint());
    let bytes = (std::fs::read(&files.videos).unwrap(), std::fs::read(&files.comments).unwrap());
    let again = write_corpus(&loaded, dir.path()).unwrap();
    assert_eq!(bytes, (std::fs::read(&again.videos).unwrap(), std::fs::read(&again.comments).unwrap()));
}

#[test]
fn empty_corpus_writes_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let files = write_corpus(&Corpus::empty(), dir.path()).unwrap();
    assert!(files.features.is_empty());
    assert_eq!(std::fs::read(&files.videos).unwrap(), b"");
    assert_eq!(std::fs::read(&files.comments).unwrap(), b"");
    assert!(load_corpus(&files.videos, &files.comments).unwrap().is_empty());
}

#[test]
fn comment_grouping_matches_flat_collection() {
    let corpus = generate_synthetic(&SyntheticConfig { n_videos: 40, seed: 2, ..SyntheticConfig::default() }).unwrap();
    let mut total = 0;
    for v in corpus.videos() {
        let group = corpus.comments_of(&v.id);
        total += group.len();
        assert!(group.iter().all(|c| c.video_id == v.id && c.publish_time >= v.publish_time));
        assert!(group.windows(2).all(|w| w[0].id < w[1].id));
    }
    assert_eq!(total, corpus.comments().len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_a_pure_function_of_the_config(seed in 0u64..1000, n in 0usize..12, lo in 1usize..5, extra in 0usize..5) {
        let cfg = SyntheticConfig { n_videos: n, seed, comments_per_video: (lo, lo + extra), ..SyntheticConfig::default() };
        let a = generate_synthetic(&cfg).unwrap();
        prop_assert_eq!(&a, &generate_synthetic(&cfg).unwrap());
        prop_assert_eq!(a.videos().len(), n);
        for v in a.videos() {
            let k = a.comments_of(&v.id).len();
            prop_assert!((lo..=lo + extra).contains(&k));
            prop_assert!(v.features.data().iter().all(|x| x.is_finite()));
        }
        for c in a.comments() {
            let e = c.true_engagement.unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!(c.publish_time >= a.video(&c.video_id).unwrap().publish_time);
        }
    }
}
