//! Stage execution with content-addressed caching.
//!
//! Each stage writes its artifacts under `<out>/<stage>/` followed by a
//! `stage.json` record holding the stage fingerprint and a hash of every
//! output. A stage is reused when its record exists, the fingerprint matches
//! and every output still hashes to the recorded value. The fingerprint covers
//! the stage name, its seed, its config section and the hashes of every input
//! artifact, so changing an upstream output or a relevant config key reruns
//! exactly the affected stages.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{sha256_hex, stage_seed, RunConfig};
use crate::stages;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Corpus,
    BiasReport,
    Split,
    Pairs,
    Uniqueness,
    TrainGen,
    TrainReward,
    Normalize,
    TrainRl,
    Generate,
    Eval,
    Agreement,
}

impl Stage {
    pub const PIPELINE: [Stage; 12] = [
        Stage::Corpus,
        Stage::BiasReport,
        Stage::Split,
        Stage::Pairs,
        Stage::Uniqueness,
        Stage::TrainGen,
        Stage::TrainReward,
        Stage::Normalize,
        Stage::TrainRl,
        Stage::Generate,
        Stage::Eval,
        Stage::Agreement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Corpus => "corpus",
            Stage::BiasReport => "bias-report",
            Stage::Split => "split",
            Stage::Pairs => "pairs",
            Stage::Uniqueness => "uniqueness",
            Stage::TrainGen => "train-gen",
            Stage::TrainReward => "train-reward",
            Stage::Normalize => "normalize",
            Stage::TrainRl => "train-rl",
            Stage::Generate => "generate",
            Stage::Eval => "eval",
            Stage::Agreement => "agreement",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Corpus => &[],
            BiasReport | Split => &[Corpus],
            Pairs | Uniqueness => &[Corpus, Split],
            TrainGen => &[Corpus, Split, Uniqueness],
            TrainReward => &[Corpus, Split, Pairs, TrainGen],
            Normalize => &[Corpus, Split, TrainGen, TrainReward],
            TrainRl => &[Corpus, Split, TrainGen, TrainReward, Normalize],
            Generate => &[Corpus, Split, TrainGen, TrainRl],
            Eval => &[Corpus, Generate, TrainReward, Normalize],
            Agreement => &[Corpus, Split, TrainReward],
        }
    }

    /// The config keys that influence this stage's outputs.
    fn section(self, c: &RunConfig) -> Value {
        fn v<T: Serialize>(x: &T) -> Value {
            serde_json::to_value(x).expect("config serializes")
        }
        match self {
            Stage::Corpus => match &c.ingest {
                Some(i) => json!({ "ingest": v(i) }),
                None => json!({ "synth": v(&c.synth) }),
            },
            Stage::BiasReport => json!({}),
            Stage::Split => v(&c.split),
            Stage::Pairs => json!({ "max_pairs_per_video": c.pairs.max_pairs_per_video, "biased": c.pairs.biased }),
            Stage::Uniqueness => v(&c.uniqueness),
            Stage::TrainGen => json!({ "model": v(&c.model), "mle": v(&c.mle) }),
            Stage::TrainReward => json!({ "reward": v(&c.reward), "val_fraction": c.pairs.val_fraction }),
            Stage::Normalize => v(&c.normalize),
            Stage::TrainRl => v(&c.rl),
            Stage::Generate => v(&c.eval.decode),
            Stage::Eval => json!({ "n_references": c.eval.n_references }),
            Stage::Agreement => {
                json!({ "videos": c.eval.agreement_videos, "per_video": c.eval.agreement_pairs_per_video })
            }
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub fingerprint: String,
    pub seed: u64,
    pub outputs: Vec<Artifact>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Computed,
    Cached,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
struct ManifestEntry {
    stage: &'static str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<Status>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fingerprint: Option<String>,
    outputs: Vec<Artifact>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                anyhow!(
                    "output directory {} is in use by another run (remove {} if no run is active)",
                    dir.display(),
                    path.display()
                )
            } else {
                anyhow!("creating {}: {e}", path.display())
            }
        })?;
        writeln!(f, "{}", std::process::id()).ok();
        Ok(Self(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// A run directory opened for exclusive use.
pub struct Workspace {
    root: PathBuf,
    config: RunConfig,
    statuses: Vec<(Stage, Status, Option<String>)>,
    pub verbose: bool,
    _lock: Lock,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

impl Workspace {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let root = config.out.clone();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let lock = Lock::acquire(&root)?;
        Ok(Self { root, config, statuses: Vec::new(), verbose: true, _lock: lock })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn seed(&self, stage: Stage) -> u64 {
        stage_seed(self.config.seed, stage.name())
    }

    /// Seed for a secondary random stream of `stage` (e.g. model initialisation).
    pub fn sub_seed(&self, stage: Stage, what: &str) -> u64 {
        stage_seed(self.config.seed, &format!("{}/{what}", stage.name()))
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.dir(stage).join("stage.json")
    }

    fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
    }

    /// The stored record of `stage` if every output still matches it.
    pub fn valid_record(&self, stage: Stage) -> Option<StageRecord> {
        let text = fs::read_to_string(self.record_path(stage)).ok()?;
        let rec: StageRecord = serde_json::from_str(&text).ok()?;
        for a in &rec.outputs {
            if hash_file(&self.root.join(&a.path)).ok()? != a.sha256 {
                return None;
            }
        }
        Some(rec)
    }

    fn inputs(&self, stage: Stage) -> Result<Vec<Artifact>> {
        let mut out = Vec::new();
        for &dep in stage.deps() {
            let rec = self
                .valid_record(dep)
                .ok_or_else(|| anyhow!("stage {stage} needs the outputs of stage {dep}; run `engage {dep}` first"))?;
            out.extend(rec.outputs);
        }
        if let (Stage::Corpus, Some(ingest)) = (stage, &self.config.ingest) {
            let corpus = engage_core::corpus::load_corpus(&ingest.videos, &ingest.comments)?;
            out.push(Artifact { path: "ingest".into(), sha256: corpus.fingerprint() });
        }
        Ok(out)
    }

    fn fingerprint(&self, stage: Stage, inputs: &[Artifact]) -> String {
        let doc = json!({
            "stage": stage.name(),
            "seed": self.seed(stage),
            "config": stage.section(&self.config),
            "inputs": inputs,
        });
        sha256_hex(doc.to_string().as_bytes())
    }

    /// Runs `stage` unless an up-to-date record exists.
    pub fn run(&mut self, stage: Stage) -> Result<Status> {
        let result = self.run_inner(stage);
        let (status, err) = match &result {
            Ok(s) => (*s, None),
            Err(e) => (Status::Failed, Some(format!("{e:#}"))),
        };
        self.statuses.retain(|(s, ..)| *s != stage);
        self.statuses.push((stage, status, err));
        result.with_context(|| format!("stage {stage} failed"))
    }

    fn run_inner(&mut self, stage: Stage) -> Result<Status> {
        let inputs = self.inputs(stage)?;
        let fingerprint = self.fingerprint(stage, &inputs);
        if let Some(rec) = self.valid_record(stage) {
            if rec.fingerprint == fingerprint {
                self.log(stage, "cached");
                return Ok(Status::Cached);
            }
        }
        let started = Instant::now();
        let dir = self.dir(stage);
        let _ = fs::remove_file(self.record_path(stage));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let outputs = stages::compute(self, stage)?;
        let mut artifacts = Vec::with_capacity(outputs.len());
        for p in &outputs {
            artifacts.push(Artifact { path: self.relative(p), sha256: hash_file(p)? });
        }
        let rec = StageRecord { stage: stage.name().into(), fingerprint, seed: self.seed(stage), outputs: artifacts };
        write_json(&self.record_path(stage), &rec)?;
        self.log(stage, &format!("done in {:.1}s", started.elapsed().as_secs_f64()));
        Ok(Status::Computed)
    }

    fn log(&self, stage: Stage, msg: &str) {
        if self.verbose {
            eprintln!("[{stage}] {msg}");
        }
    }

    /// Runs every stage in order, then gathers the run-level artifacts. The
    /// manifest is written whether or not a stage fails.
    pub fn pipeline(&mut self) -> Result<()> {
        let result = (|| {
            for stage in Stage::PIPELINE {
                self.run(stage)?;
            }
            self.collect()
        })();
        self.write_manifest()?;
        result
    }

    /// `metrics.jsonl` (training traces of every stage, in stage order) and
    /// copies of the evaluation and agreement reports at the run root.
    fn collect(&self) -> Result<()> {
        let mut metrics = Vec::new();
        for stage in [Stage::TrainGen, Stage::TrainReward, Stage::TrainRl] {
            let p = self.dir(stage).join("metrics.jsonl");
            metrics.extend(fs::read(&p).with_context(|| format!("reading {}", p.display()))?);
        }
        fs::write(self.root.join("metrics.jsonl"), metrics).context("writing metrics.jsonl")?;
        for (stage, file) in [(Stage::Eval, "eval_report.json"), (Stage::Agreement, "agreement_report.json")] {
            fs::copy(self.dir(stage).join(file), self.root.join(file)).with_context(|| format!("copying {file}"))?;
        }
        Ok(())
    }

    /// `manifest.json`: config, seeds, fingerprints and artifacts of every
    /// stage present in the run directory, with this invocation's outcome.
    pub fn write_manifest(&self) -> Result<()> {
        let entries: Vec<ManifestEntry> = Stage::PIPELINE
            .iter()
            .map(|&stage| {
                let rec = self.valid_record(stage);
                let (status, error) = match self.statuses.iter().find(|(s, ..)| *s == stage) {
                    Some((_, st, err)) => (Some(*st), err.clone()),
                    None => (None, None),
                };
                ManifestEntry {
                    stage: stage.name(),
                    seed: self.seed(stage),
                    status,
                    fingerprint: rec.as_ref().map(|r| r.fingerprint.clone()),
                    outputs: rec.map(|r| r.outputs).unwrap_or_default(),
                    error,
                }
            })
            .collect();
        let doc = json!({
            "config_fingerprint": self.config.fingerprint(),
            "seed": self.config.seed,
            "config": self.config,
            "stages": entries,
        });
        write_json(&self.root.join("manifest.json"), &doc)
    }

    pub(crate) fn require_file(&self, stage: Stage, name: &str) -> Result<PathBuf> {
        let p = self.dir(stage).join(name);
        if !p.exists() {
            bail!("missing {}", p.display());
        }
        Ok(p)
    }

    pub(crate) fn create_file(&self, stage: Stage, name: &str) -> Result<(PathBuf, File)> {
        let p = self.dir(stage).join(name);
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok((p, f))
    }
}
