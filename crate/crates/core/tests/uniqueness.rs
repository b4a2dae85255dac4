use std::collections::HashMap;

use engage_core::corpus::{generate_synthetic, Comment, Corpus, FeatureTensor, SyntheticConfig, Video};
use engage_core::uniqueness::{
    sample_index, sample_position, sample_training_comment, schedule_a, uniqueness_scores, video_neighbors,
    EmbeddingIndex, EmbeddingProvider, HashedEmbedder, SamplingSchedule,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn cdf(a: f64, x: f64) -> f64 {
    a * x + (1.0 - a) * x * x
}

/// Solves F(x) = u by bisection.
fn bisect(a: f64, u: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(a, mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

#[test]
fn index_examples() {
    for a in [0.0, 0.6, 1.0, 1.4, 2.0] {
        assert_eq!(sample_index(10, a, 0.0).unwrap(), 0);
    }
    assert_eq!(sample_index(100, 1.0, 0.73).unwrap(), 73);
    let x = sample_position(2.0, 0.25).unwrap();
    assert!((x - (1.0 - 3f64.sqrt() / 2.0)).abs() < 1e-12);
    assert!((x - bisect(2.0, 0.25)).abs() < 1e-12);
    assert_eq!(sample_index(1000, 2.0, 0.25).unwrap(), 133);
    assert!(sample_index(10, 2.5, 0.1).is_err());
    assert!(sample_index(10, -0.1, 0.1).is_err());
}

proptest! {
    #[test]
    fn position_inverts_the_cdf(a in 0.0f64..=2.0, u in 0.0f64..1.0) {
        let x = sample_position(a, u).unwrap();
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - bisect(a, u)).abs() < 1e-9);
    }

    #[test]
    fn index_stays_in_range(j in 1usize..500, a in 0.0f64..=2.0, u in 0.0f64..1.0) {
        prop_assert!(sample_index(j, a, u).unwrap() < j);
    }
}

#[test]
fn empirical_cdf_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for a in [0.0, 0.6, 1.0, 1.4, 2.0] {
        let mut xs: Vec<f64> = (0..100_000).map(|_| sample_position(a, rng.random()).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(a, x);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "a = {a}: KS distance {ks}");
    }
}

#[test]
fn bin_frequencies_match_integrated_density() {
    let j = 10;
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for a in [0.6, 1.0, 1.4] {
        let mut counts = vec![0usize; j];
        for _ in 0..draws {
            counts[sample_index(j, a, rng.random()).unwrap()] += 1;
        }
        let chi2: f64 = (0..j)
            .map(|k| {
                let p = cdf(a, (k + 1) as f64 / j as f64) - cdf(a, k as f64 / j as f64);
                let e = p * draws as f64;
                (counts[k] as f64 - e).powi(2) / e
            })
            .sum();
        let crit = ChiSquared::new((j - 1) as f64).unwrap().inverse_cdf(0.999);
        assert!(chi2 < crit, "a = {a}: chi2 {chi2}");
        if a > 1.0 {
            assert!(counts[0] > counts[9]);
        }
    }
}

#[test]
fn first_bin_mass_grows_with_a() {
    let mut last = -1.0;
    for k in 0..=20 {
        let a = k as f64 * 0.1;
        for j in [1usize, 2, 10, 100] {
            let p0 = cdf(a, 1.0 / j as f64);
            assert!((p0 - (a / j as f64 + (1.0 - a) / (j * j) as f64)).abs() < 1e-12);
        }
        let p0 = cdf(a, 0.1);
        assert!(p0 >= last);
        last = p0;
    }
}

#[test]
fn schedule_examples() {
    let s = SamplingSchedule::default();
    assert!((schedule_a(0, &s) - 0.6).abs() < 1e-12);
    assert!((schedule_a(45, &s) - 1.0).abs() < 1e-12);
    assert!((schedule_a(999, &s) - 1.4).abs() < 1e-12);
    assert_eq!(schedule_a(123, &SamplingSchedule::uniform()), 1.0);
}

fn one_video(texts: &[(&str, &str)]) -> Corpus {
    let v = Video {
        id: "v".into(),
        category: "c".into(),
        publish_time: 0,
        features: FeatureTensor::new(1, 1, 2, vec![1.0, 0.0]).unwrap(),
    };
    let cs = texts
        .iter()
        .map(|(id, text)| Comment {
            id: id.to_string(),
            video_id: "v".into(),
            text: text.to_string(),
            likes: 0,
            publish_time: 0,
            true_engagement: None,
        })
        .collect();
    Corpus::new(vec![v], cs).unwrap()
}

#[test]
fn training_draws_follow_the_curriculum() {
    let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
    let texts: Vec<(&str, &str)> = ids.iter().map(|i| (i.as_str(), "x")).collect();
    let corpus = one_video(&texts);
    let comments = corpus.comments_of("v");
    // c9 most unique, c0 least
    let records: HashMap<String, f64> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i as f64 / 10.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let uniform = SamplingSchedule::uniform();
    let steep = SamplingSchedule { a0: 1.4, step: 0.0, epochs_per_level: 1, n_levels: 1 };
    let draws = 100_000;
    for (schedule, a) in [(uniform, 1.0), (steep, 1.4)] {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for _ in 0..draws {
            let c = sample_training_comment(&comments, &records, 0, &schedule, &mut rng).unwrap();
            *counts.entry(c.id.as_str()).or_default() += 1;
        }
        let chi2: f64 = (0..10)
            .map(|rank| {
                let id = format!("c{}", 9 - rank);
                let p = cdf(a, (rank + 1) as f64 / 10.0) - cdf(a, rank as f64 / 10.0);
                let e = p * draws as f64;
                (*counts.get(id.as_str()).unwrap_or(&0) as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < ChiSquared::new(9.0).unwrap().inverse_cdf(0.999), "a = {a}: chi2 {chi2}");
    }
}

#[test]
fn equal_uniqueness_sorts_by_id() {
    let corpus = one_video(&[("b", "x"), ("a", "y"), ("c", "z")]);
    let comments = corpus.comments_of("v");
    let records: HashMap<String, f64> = ["a", "b", "c"].iter().map(|i| (i.to_string(), 0.5)).collect();
    let sorted = engage_core::uniqueness::sort_by_uniqueness(&comments, &records);
    let ids: Vec<&str> = sorted.iter().map(|c| c.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

fn synthetic() -> Corpus {
    generate_synthetic(&SyntheticConfig { n_videos: 60, comments_per_video: (3, 8), seed: 8, ..SyntheticConfig::default() })
        .unwrap()
}

#[test]
fn neighbors_match_exhaustive_sort() {
    let corpus = synthetic();
    let e = HashedEmbedder::default();
    let vecs: Vec<Vec<f64>> = corpus.videos().iter().map(|v| e.embed_video(v)).collect();
    for (qi, q) in corpus.videos().iter().enumerate().take(15) {
        let mut all: Vec<(f64, &str)> = corpus
            .videos()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != qi)
            .map(|(i, v)| (cos(&vecs[qi], &vecs[i]), v.id.as_str()))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        for k in [0, 1, 10, 100] {
            let got = video_neighbors(&corpus, &q.id, k, &e).unwrap();
            let want: Vec<String> = all.iter().take(k).map(|(_, id)| id.to_string()).collect();
            assert_eq!(got, want);
        }
    }
}

#[test]
fn duplicate_video_ranks_first() {
    let corpus = synthetic();
    let mut videos = corpus.videos().to_vec();
    let mut dup = videos[7].clone();
    dup.id = "zzz-dup".into();
    videos.push(dup);
    let corpus = Corpus::new(videos, corpus.comments().to_vec()).unwrap();
    let n = video_neighbors(&corpus, &corpus.videos()[7].id, 3, &HashedEmbedder::default()).unwrap();
    assert_eq!(n[0], "zzz-dup");
}

/// Pool = the video's own comments plus all comments of its neighbours;
/// every similarity from a dense matrix over the pool.
fn dense_uniqueness(corpus: &Corpus, video_id: &str, k: usize, m: usize) -> Vec<(String, f64)> {
    let e = HashedEmbedder::default();
    let neighbors = video_neighbors(corpus, video_id, k, &e).unwrap();
    let mut pool: Vec<&Comment> = corpus.comments().iter().filter(|c| c.video_id == video_id).collect();
    let n_own = pool.len();
    for n in &neighbors {
        pool.extend(corpus.comments().iter().filter(|c| &c.video_id == n));
    }
    let vecs: Vec<Vec<f64>> = pool.iter().map(|c| e.embed_text(&c.text)).collect();
    let sim: Vec<Vec<f64>> = vecs.iter().map(|a| vecs.iter().map(|b| cos(a, b)).collect()).collect();
    (0..n_own)
        .map(|i| {
            let mut row: Vec<f64> = (0..pool.len()).filter(|&j| j != i).map(|j| sim[i][j]).collect();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let top = &row[..m.min(row.len())];
            let u = if top.is_empty() { 1.0 } else { 1.0 - top.iter().sum::<f64>() / top.len() as f64 };
            (pool[i].id.clone(), u)
        })
        .collect()
}

#[test]
fn scores_match_dense_oracle() {
    let corpus = synthetic();
    for v in corpus.videos().iter().take(12) {
        for (k, m) in [(10, 20), (3, 5), (0, 20), (50, 1000)] {
            let got = uniqueness_scores(&corpus, &v.id, k, m, &HashedEmbedder::default()).unwrap();
            let want = dense_uniqueness(&corpus, &v.id, k, m);
            assert_eq!(got.len(), want.len());
            for (g, (id, u)) in got.iter().zip(&want) {
                assert_eq!(&g.comment_id, id);
                assert!((g.uniqueness - u).abs() < 1e-9);
                assert_eq!(g.uniqueness, 1.0 - g.mean_similarity);
            }
        }
    }
}

#[test]
fn scores_ignore_pool_order() {
    // renaming ids permutes the internal order of the pool but not its content
    let corpus = synthetic();
    let renamed: Vec<Comment> = corpus
        .comments()
        .iter()
        .enumerate()
        .map(|(i, c)| Comment { id: format!("{:05}", (i * 7919) % 100_000), ..c.clone() })
        .collect();
    let back: HashMap<String, String> =
        renamed.iter().zip(corpus.comments()).map(|(r, c)| (r.id.clone(), c.id.clone())).collect();
    let other = Corpus::new(corpus.videos().to_vec(), renamed).unwrap();
    let a: HashMap<String, f64> =
        EmbeddingIndex::new(&corpus, &HashedEmbedder::default()).score_all(10, 20).into_iter().map(|r| (r.comment_id, r.uniqueness)).collect();
    let b = EmbeddingIndex::new(&other, &HashedEmbedder::default()).score_all(10, 20);
    assert_eq!(a.len(), b.len());
    for r in b {
        assert!((a[&back[&r.comment_id]] - r.uniqueness).abs() < 1e-12);
    }
}

#[test]
fn uniqueness_conventions() {
    let dupes = one_video(&[("a", "great goal"), ("b", "great goal"), ("c", "great goal")]);
    for r in uniqueness_scores(&dupes, "v", 10, 20, &HashedEmbedder::default()).unwrap() {
        assert!(r.uniqueness.abs() < 1e-12);
    }
    let alone = one_video(&[("a", "great goal")]);
    let r = uniqueness_scores(&alone, "v", 10, 20, &HashedEmbedder::default()).unwrap();
    assert_eq!(r[0].uniqueness, 1.0);
}

#[test]
fn generic_comments_score_less_unique_than_specific_ones() {
    let corpus = generate_synthetic(&SyntheticConfig { n_videos: 200, seed: 3, ..SyntheticConfig::default() }).unwrap();
    let scores = EmbeddingIndex::new(&corpus, &HashedEmbedder::default()).score_all(10, 20);
    let (mut hi, mut lo) = (Vec::new(), Vec::new());
    for r in scores {
        let e = corpus.comment(&r.comment_id).unwrap().true_engagement.unwrap();
        if e > 0.5 { hi.push(r.uniqueness) } else { lo.push(r.uniqueness) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&hi) > mean(&lo), "specific {} generic {}", mean(&hi), mean(&lo));
}
