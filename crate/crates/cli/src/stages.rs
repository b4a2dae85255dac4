use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use engage_core::corpus::{generate_synthetic, load_corpus, write_corpus, Corpus, FeatureTensor, SyntheticConfig};
use engage_core::metrics::{agreement, evaluate, ground_truth_pairs, EvalReport, VideoGenerations};
use engage_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, ModelMode};
use engage_core::pairs::{build_biased_pairs, build_pairs, manifest_path, split_pairs, PairManifest, PairSet, UNLIMITED};
use engage_core::text::Vocab;
use engage_core::training::{
    normalize_rewards, train_generator, train_reward, train_rl, write_metrics, MleConfig, PpoConfig, RewardTrainConfig,
};
use engage_core::uniqueness::{read_records, write_records, EmbeddingIndex, HashedEmbedder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::report::write_bias_report;
use crate::run::{write_json, Stage, Workspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    /// Training videos in shuffled order.
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offset {
    pub offset: f64,
    pub n_probe: usize,
}

/// `eval_report.json`: the policy's report, the pre-RL generator's report on
/// the same videos, and a pointer to the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    #[serde(flatten)]
    pub report: EvalReport,
    pub baseline: EvalReport,
    pub offset: f64,
    pub manifest: String,
}

pub(crate) fn compute(ws: &Workspace, stage: Stage) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::Corpus => corpus(ws),
        Stage::BiasReport => write_bias_report(&load_run_corpus(ws)?, &ws.dir(stage)),
        Stage::Split => split(ws),
        Stage::Pairs => pairs(ws),
        Stage::Uniqueness => uniqueness(ws),
        Stage::TrainGen => train_gen(ws),
        Stage::TrainReward => train_reward_stage(ws),
        Stage::Normalize => normalize(ws),
        Stage::TrainRl => train_rl_stage(ws),
        Stage::Generate => generate(ws),
        Stage::Eval => eval(ws),
        Stage::Agreement => agreement_stage(ws),
    }
}

pub fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    Ok(load_corpus(&dir.join("videos.jsonl"), &dir.join("comments.jsonl"))?)
}

fn load_run_corpus(ws: &Workspace) -> Result<Corpus> {
    load_corpus_dir(&ws.dir(Stage::Corpus))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_split(ws: &Workspace) -> Result<Split> {
    read_json(&ws.require_file(Stage::Split, "split.json")?)
}

fn load_model(ws: &Workspace, stage: Stage, name: &str) -> Result<Model> {
    Ok(load_checkpoint(&ws.require_file(stage, name)?)?.model)
}

fn corpus(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let cfg = ws.config();
    let corpus = match &cfg.ingest {
        Some(i) => load_corpus(&i.videos, &i.comments)?,
        None => generate_synthetic(&SyntheticConfig { seed: ws.seed(Stage::Corpus), ..cfg.synth.clone() })?,
    };
    let dir = ws.dir(Stage::Corpus);
    // stale feature files of a previous corpus would otherwise linger
    fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    let files = write_corpus(&corpus, &dir)?;
    let n = corpus.comments().len();
    let mean_likes = if n == 0 { 0.0 } else { corpus.comments().iter().map(|c| c.likes as f64).sum::<f64>() / n as f64 };
    println!("videos: {}\ncomments: {n}\nmean likes: {mean_likes:.3}", corpus.videos().len());
    let mut out = vec![files.videos, files.comments];
    out.extend(files.features);
    Ok(out)
}

fn split(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let mut ids: Vec<String> = corpus.videos().iter().map(|v| v.id.clone()).collect();
    if ids.len() < 2 {
        bail!("need at least two videos to split, found {}", ids.len());
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(ws.seed(Stage::Split)));
    let n_test = ((ids.len() as f64 * ws.config().split.test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let train = ids.split_off(n_test);
    let path = ws.dir(Stage::Split).join("split.json");
    write_json(&path, &Split { train, test: ids })?;
    Ok(vec![path])
}

fn train_corpus(ws: &Workspace, corpus: &Corpus) -> Result<Corpus> {
    Ok(corpus.subset(&read_split(ws)?.train))
}

fn pairs(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let train = train_corpus(ws, &corpus)?;
    let cfg = &ws.config().pairs;
    let seed = ws.seed(Stage::Pairs);
    let cap = cfg.max_pairs_per_video.unwrap_or(UNLIMITED);
    let set = if cfg.biased { build_biased_pairs(&train, cap, seed)? } else { build_pairs(&train, cap, seed)? };
    let manifest = PairManifest {
        corpus_fingerprint: set.corpus_fingerprint.clone(),
        max_pairs_per_video: cfg.max_pairs_per_video,
        seed,
        temporal_debiasing: !cfg.biased,
        n_pairs: set.len(),
    };
    let path = ws.dir(Stage::Pairs).join("pairs.jsonl");
    set.write(&path, &manifest)?;
    eprintln!("[pairs] {} pairs over {} videos", set.len(), set.video_ids().len());
    Ok(vec![manifest_path(&path), path])
}

fn uniqueness(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let train = train_corpus(ws, &corpus)?;
    let cfg = &ws.config().uniqueness;
    let records = EmbeddingIndex::new(&train, &HashedEmbedder::default()).score_all(cfg.k, cfg.m);
    let path = ws.dir(Stage::Uniqueness).join("uniqueness.jsonl");
    write_records(&path, &records)?;
    Ok(vec![path])
}

/// The configured model with its feature shape taken from the corpus.
fn model_config(base: &ModelConfig, corpus: &Corpus) -> Result<ModelConfig> {
    let first = corpus.videos().first().context("corpus has no videos")?;
    let mut cfg = base.clone();
    cfg.feature_dim = first.features.dim();
    cfg.max_frames = corpus.videos().iter().map(|v| v.features.frames()).max().unwrap_or(1);
    cfg.max_patches = corpus.videos().iter().map(|v| v.features.patches()).max().unwrap_or(1);
    Ok(cfg)
}

fn train_gen(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let train = train_corpus(ws, &corpus)?;
    let records = read_records(&ws.require_file(Stage::Uniqueness, "uniqueness.jsonl")?)?;
    let uniqueness: HashMap<String, f64> = records.into_iter().map(|r| (r.comment_id, r.uniqueness)).collect();
    let vocab = Vocab::build(train.comments().iter().map(|c| c.text.as_str()));
    let mut rng = ChaCha8Rng::seed_from_u64(ws.sub_seed(Stage::TrainGen, "init"));
    let init = Model::new(model_config(&ws.config().model, &train)?, ModelMode::Generator, vocab, &mut rng)?;
    let cfg = MleConfig { seed: ws.seed(Stage::TrainGen), ..ws.config().mle.clone() };
    let (model, trace) = train_generator(&train, &uniqueness, init, &cfg)?;
    save_outputs(ws, Stage::TrainGen, "generator.ckpt", &model, &trace)
}

fn save_outputs(
    ws: &Workspace,
    stage: Stage,
    name: &str,
    model: &Model,
    trace: &[engage_core::training::MetricRecord],
) -> Result<Vec<PathBuf>> {
    let ckpt = ws.dir(stage).join(name);
    save_checkpoint(&ckpt, model, None)?;
    let metrics = ws.dir(stage).join("metrics.jsonl");
    write_metrics(&metrics, trace, false)?;
    Ok(vec![ckpt, metrics])
}

fn train_reward_stage(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let train = train_corpus(ws, &corpus)?;
    let generator = load_model(ws, Stage::TrainGen, "generator.ckpt")?;
    let (set, manifest) = PairSet::read(&ws.require_file(Stage::Pairs, "pairs.jsonl")?)?;
    set.validate(&train, manifest.temporal_debiasing)?;
    let seed = ws.seed(Stage::TrainReward);
    let (train_pairs, val_pairs) = split_pairs(&set, ws.config().pairs.val_fraction, seed)?;
    let init = generator.to_reward(&mut ChaCha8Rng::seed_from_u64(ws.sub_seed(Stage::TrainReward, "init")));
    let cfg = RewardTrainConfig { seed, ..ws.config().reward.clone() };
    let (model, trace) = train_reward(&train, &train_pairs, &val_pairs, init, &cfg)?;
    save_outputs(ws, Stage::TrainReward, "reward.ckpt", &model, &trace)
}

fn normalize(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let train = train_corpus(ws, &corpus)?;
    let generator = load_model(ws, Stage::TrainGen, "generator.ckpt")?;
    let reward = load_model(ws, Stage::TrainReward, "reward.ckpt")?;
    let cfg = &ws.config().normalize;
    let offset = normalize_rewards(&reward, &train, &generator, cfg.n_probe, ws.seed(Stage::Normalize), cfg.max_len)?;
    let path = ws.dir(Stage::Normalize).join("offset.json");
    write_json(&path, &Offset { offset, n_probe: cfg.n_probe })?;
    Ok(vec![path])
}

fn read_offset(ws: &Workspace) -> Result<f64> {
    Ok(read_json::<Offset>(&ws.require_file(Stage::Normalize, "offset.json")?)?.offset)
}

fn train_rl_stage(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let split = read_split(ws)?;
    let n = ws.config().rl.max_videos.unwrap_or(usize::MAX).min(split.train.len());
    let rl_corpus = corpus.subset(&split.train[..n]);
    let generator = load_model(ws, Stage::TrainGen, "generator.ckpt")?;
    let reward = load_model(ws, Stage::TrainReward, "reward.ckpt")?;
    let cfg = PpoConfig { seed: ws.seed(Stage::TrainRl), ..ws.config().rl.ppo.clone() };
    let (policy, trace) = train_rl(&rl_corpus, &generator, &reward, read_offset(ws)?, &cfg)?;
    save_outputs(ws, Stage::TrainRl, "policy.ckpt", &policy, &trace)
}

fn generate(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let test = corpus.subset(&read_split(ws)?.test);
    let feats: Vec<&FeatureTensor> = test.videos().iter().map(|v| &v.features).collect();
    let mut out = Vec::new();
    for (name, stage, ckpt) in
        [("generator", Stage::TrainGen, "generator.ckpt"), ("policy", Stage::TrainRl, "policy.ckpt")]
    {
        let model = load_model(ws, stage, ckpt)?;
        // same stream for both models so their samples are paired
        let mut rng = ChaCha8Rng::seed_from_u64(ws.seed(Stage::Generate));
        let gens = model.generate_batch(&feats, &ws.config().eval.decode, &mut rng)?;
        let (path, f) = ws.create_file(Stage::Generate, &format!("{name}.jsonl"))?;
        let mut w = BufWriter::new(f);
        for (v, g) in test.videos().iter().zip(&gens) {
            let rec = VideoGenerations {
                video_id: v.id.clone(),
                comments: g.iter().map(|s| model.vocab.decode(s.words())).collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        out.push(path);
    }
    Ok(out)
}

pub fn read_generations(path: &Path) -> Result<Vec<VideoGenerations>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

fn eval(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let reward = load_model(ws, Stage::TrainReward, "reward.ckpt")?;
    let offset = read_offset(ws)?;
    let n_refs = ws.config().eval.n_references;
    let score = |name: &str| -> Result<EvalReport> {
        let gens = read_generations(&ws.require_file(Stage::Generate, name)?)?;
        Ok(evaluate(&corpus, &gens, &reward, offset, n_refs)?)
    };
    let out = EvalOutput {
        report: score("policy.jsonl")?,
        baseline: score("generator.jsonl")?,
        offset,
        manifest: "manifest.json".into(),
    };
    let path = ws.dir(Stage::Eval).join("eval_report.json");
    write_json(&path, &out)?;
    eprintln!(
        "[eval] avg reward {:.3} (pre-RL {:.3}), bigrams {} ({}), BLEU {:.2}, ROUGE-L {:.2}",
        out.report.avg_reward,
        out.baseline.avg_reward,
        out.report.num_bigrams,
        out.baseline.num_bigrams,
        out.report.bleu,
        out.report.rouge_l
    );
    Ok(vec![path])
}

fn agreement_stage(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let corpus = load_run_corpus(ws)?;
    let test = corpus.subset(&read_split(ws)?.test);
    let reward = load_model(ws, Stage::TrainReward, "reward.ckpt")?;
    let cfg = &ws.config().eval;
    let pairs =
        ground_truth_pairs(&test, cfg.agreement_videos, cfg.agreement_pairs_per_video, ws.seed(Stage::Agreement))?;
    let report = agreement(&reward, &test, &pairs)?;
    let path = ws.dir(Stage::Agreement).join("agreement_report.json");
    write_json(&path, &report)?;
    eprintln!("[agreement] {:.3} over {} pairs", report.agree_fraction, report.n_pairs);
    Ok(vec![path])
}
