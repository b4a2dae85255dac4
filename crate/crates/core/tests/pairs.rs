use std::collections::{BTreeSet, HashSet};

use engage_core::corpus::{generate_synthetic, Comment, Corpus, FeatureTensor, SyntheticConfig, Video};
use engage_core::pairs::{bias_curve, build_biased_pairs, build_pairs, split_pairs, PairError, PairSet, UNLIMITED};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

type Triple = (String, String, String);

/// Double loop over every ordered comment pair of every video.
fn brute_force(corpus: &Corpus, temporal: bool) -> BTreeSet<Triple> {
    let mut out = BTreeSet::new();
    for v in corpus.videos() {
        let cs: Vec<&Comment> = corpus.comments().iter().filter(|c| c.video_id == v.id).collect();
        for a in &cs {
            for b in &cs {
                if a.likes > b.likes && (!temporal || a.publish_time > b.publish_time) {
                    out.insert((v.id.clone(), a.id.clone(), b.id.clone()));
                }
            }
        }
    }
    out
}

fn triples(set: &PairSet) -> BTreeSet<Triple> {
    set.pairs.iter().map(|p| (p.video_id.clone(), p.pos_id.clone(), p.neg_id.clone())).collect()
}

/// Random corpus with small like and time ranges so that ties are common.
fn random_corpus(seed: u64, n_videos: usize, max_comments: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut videos = Vec::new();
    let mut comments = Vec::new();
    for v in 0..n_videos {
        let id = format!("v{v}");
        let t0 = rng.random_range(0..1000);
        for c in 0..rng.random_range(0..=max_comments) {
            comments.push(Comment {
                id: format!("{id}c{c}"),
                video_id: id.clone(),
                text: "x".into(),
                likes: rng.random_range(0..6),
                publish_time: t0 + rng.random_range(0..8),
                true_engagement: None,
            });
        }
        videos.push(Video {
            id,
            category: "c".into(),
            publish_time: t0,
            features: FeatureTensor::new(1, 1, 1, vec![0.0]).unwrap(),
        });
    }
    Corpus::new(videos, comments).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unbounded_pairs_equal_brute_force(seed in 0u64..10_000, n in 1usize..6, m in 0usize..50) {
        let corpus = random_corpus(seed, n, m);
        let debiased = build_pairs(&corpus, UNLIMITED, 0).unwrap();
        let biased = build_biased_pairs(&corpus, UNLIMITED, 0).unwrap();
        prop_assert_eq!(triples(&debiased), brute_force(&corpus, true));
        prop_assert_eq!(triples(&biased), brute_force(&corpus, false));
        prop_assert_eq!(triples(&debiased).len(), debiased.len());
        prop_assert!(triples(&debiased).is_subset(&triples(&biased)));
        prop_assert!(debiased.validate(&corpus, true).is_ok());
        prop_assert!(biased.validate(&corpus, false).is_ok());
    }

    #[test]
    fn capped_pairs_are_a_deterministic_subset(seed in 0u64..10_000, cap in 1usize..20, pair_seed in 0u64..50) {
        let corpus = random_corpus(seed, 4, 30);
        let full = brute_force(&corpus, true);
        let capped = build_pairs(&corpus, cap, pair_seed).unwrap();
        prop_assert_eq!(&capped, &build_pairs(&corpus, cap, pair_seed).unwrap());
        let got = triples(&capped);
        prop_assert!(got.is_subset(&full));
        for v in corpus.videos() {
            let available = full.iter().filter(|t| t.0 == v.id).count();
            let taken = got.iter().filter(|t| t.0 == v.id).count();
            prop_assert_eq!(taken, available.min(cap));
        }
    }
}

#[test]
fn biased_pairs_admit_earlier_positives() {
    let corpus = random_corpus(0, 1, 0);
    let v = &corpus.videos()[0];
    let mk = |id: &str, t: i64, likes: u64| Comment {
        id: id.into(),
        video_id: v.id.clone(),
        text: "x".into(),
        likes,
        publish_time: v.publish_time + t,
        true_engagement: None,
    };
    let corpus = Corpus::new(vec![v.clone()], vec![mk("c1", 1, 9), mk("c2", 2, 7)]).unwrap();
    assert!(build_pairs(&corpus, UNLIMITED, 0).unwrap().is_empty());
    let b = build_biased_pairs(&corpus, UNLIMITED, 0).unwrap();
    assert_eq!(triples(&b), BTreeSet::from([(v.id.clone(), "c1".into(), "c2".into())]));
}

#[test]
fn cap_subsampling_covers_candidates_uniformly() {
    // one video with 10 comments ordered in both likes and time: 45 candidate pairs
    let corpus = {
        let v = Video {
            id: "v".into(),
            category: "c".into(),
            publish_time: 0,
            features: FeatureTensor::new(1, 1, 1, vec![0.0]).unwrap(),
        };
        let cs = (0..10)
            .map(|i| Comment {
                id: format!("c{i}"),
                video_id: "v".into(),
                text: "x".into(),
                likes: i,
                publish_time: i as i64,
                true_engagement: None,
            })
            .collect();
        Corpus::new(vec![v], cs).unwrap()
    };
    let full = brute_force(&corpus, true);
    assert_eq!(full.len(), 45);
    let mut hits: std::collections::HashMap<Triple, usize> = full.iter().map(|t| (t.clone(), 0)).collect();
    let trials = 2000;
    for seed in 0..trials {
        for t in triples(&build_pairs(&corpus, 9, seed).unwrap()) {
            *hits.get_mut(&t).unwrap() += 1;
        }
    }
    // each pair is kept with probability 9/45; chi-square on 44 degrees of freedom
    let expect = trials as f64 * 9.0 / 45.0;
    let chi2: f64 = hits.values().map(|&h| (h as f64 - expect).powi(2) / expect).sum();
    let crit = statrs::distribution::ContinuousCDF::inverse_cdf(&statrs::distribution::ChiSquared::new(44.0).unwrap(), 0.999);
    assert!(chi2 < crit, "chi2 {chi2} >= {crit}");
}

#[test]
fn bias_curve_matches_recomputation() {
    let corpus = generate_synthetic(&SyntheticConfig { n_videos: 200, seed: 1, ..SyntheticConfig::default() }).unwrap();
    let curve = bias_curve(&corpus);
    let mut acc: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
    for c in corpus.comments() {
        let d = (c.publish_time - corpus.video(&c.video_id).unwrap().publish_time) / 86400;
        let e = acc.entry(d).or_default();
        e.0 += c.likes as f64;
        e.1 += 1;
    }
    assert_eq!(curve.buckets.len(), acc.len());
    for (b, (d, (sum, n))) in curve.buckets.iter().zip(acc) {
        assert_eq!((b.day_offset, b.count), (d, n));
        assert!((b.mean_likes - sum / n as f64).abs() < 1e-9);
    }
    assert!(curve.buckets.windows(2).all(|w| w[0].day_offset < w[1].day_offset));
    let (first, last) = (curve.buckets.first().unwrap(), curve.buckets.last().unwrap());
    assert_eq!(first.day_offset, 0);
    assert!(first.mean_likes > last.mean_likes);
}

#[test]
fn bias_curve_is_flat_when_likes_ignore_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let poisson = Poisson::new(20.0).unwrap();
    let mut videos = Vec::new();
    let mut comments = Vec::new();
    for v in 0..200 {
        let id = format!("v{v}");
        for c in 0..50 {
            comments.push(Comment {
                id: format!("{id}c{c}"),
                video_id: id.clone(),
                text: "x".into(),
                likes: poisson.sample(&mut rng) as u64,
                publish_time: rng.random_range(0..10 * 86400),
                true_engagement: None,
            });
        }
        videos.push(Video {
            id,
            category: "c".into(),
            publish_time: 0,
            features: FeatureTensor::new(1, 1, 1, vec![0.0]).unwrap(),
        });
    }
    let corpus = Corpus::new(videos, comments).unwrap();
    let curve = bias_curve(&corpus);
    assert_eq!(curve.buckets.len(), 10);
    let n = corpus.comments().len() as f64;
    let global = corpus.comments().iter().map(|c| c.likes as f64).sum::<f64>() / n;
    for b in &curve.buckets {
        let se = (20.0f64 / b.count as f64).sqrt();
        assert!((b.mean_likes - global).abs() < 3.0 * se, "day {} mean {} global {global}", b.day_offset, b.mean_likes);
    }
}

#[test]
fn split_is_by_video() {
    let corpus = generate_synthetic(&SyntheticConfig { n_videos: 10, seed: 3, ..SyntheticConfig::default() }).unwrap();
    let set = build_biased_pairs(&corpus, UNLIMITED, 0).unwrap();
    assert_eq!(set.video_ids().len(), 10);
    let (train, val) = split_pairs(&set, 0.2, 5).unwrap();
    assert_eq!(val.video_ids().len(), 2);
    assert!(train.video_ids().is_disjoint(&val.video_ids()));
    let union: HashSet<Triple> = triples(&train).union(&triples(&val)).cloned().collect();
    assert_eq!(union.len(), set.len());
    assert_eq!(train.len() + val.len(), set.len());
    assert_eq!((train.clone(), val.clone()), split_pairs(&set, 0.2, 5).unwrap());
    assert!(matches!(split_pairs(&set, 0.01, 5), Err(PairError::DegenerateSplit { .. })));
    assert!(matches!(split_pairs(&set, 1.0, 5), Err(PairError::BadFraction(_))));
}
