use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::{IngestConfig, RunConfig};
use crate::report::write_bias_report;
use crate::run::{Stage, Workspace};
use crate::stages::load_corpus_dir;

#[derive(Debug, Parser)]
#[command(name = "engage", version, about = "Engagement-driven video comment generation pipeline")]
pub struct Cli {
    /// JSON run config; keys override the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; every stage seed derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Start from the tiny preset instead of the desk-scale one.
    #[arg(long, global = true)]
    pub smoke: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Validate and copy an existing corpus into the run directory.
    Ingest {
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        comments: PathBuf,
    },
    /// Mean likes per day of comment delay, as CSV and SVG.
    BiasReport {
        /// Corpus directory (videos.jsonl, comments.jsonl); defaults to the run's corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Build comparison pairs from the training videos.
    Pairs,
    /// Score the uniqueness of every training comment.
    Uniqueness {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Train the generator under the uniqueness curriculum.
    TrainGen {
        #[arg(long)]
        a0: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        epochs_per_level: Option<usize>,
        #[arg(long)]
        n_levels: Option<usize>,
    },
    /// Train the reward model on the comparison pairs.
    TrainReward,
    /// Estimate the reward normalisation offset and run PPO.
    TrainRl,
    /// Sample comments for the held-out videos from the generator and the policy.
    Generate,
    /// Relevance, diversity and reward metrics of the generations.
    Eval,
    /// Agreement of the reward model with the planted engagement ordering.
    Agreement,
    /// Every stage in order, reusing up-to-date outputs.
    Pipeline,
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        let preset = if self.smoke { RunConfig::smoke() } else { RunConfig::default() };
        let mut cfg = RunConfig::load(preset, self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        match &self.command {
            Command::Ingest { videos, comments } => {
                cfg.ingest = Some(IngestConfig { videos: videos.clone(), comments: comments.clone() });
            }
            Command::Uniqueness { k, m } => {
                cfg.uniqueness.k = k.unwrap_or(cfg.uniqueness.k);
                cfg.uniqueness.m = m.unwrap_or(cfg.uniqueness.m);
            }
            Command::TrainGen { a0, step, epochs_per_level, n_levels } => {
                let s = &mut cfg.mle.schedule;
                s.a0 = a0.unwrap_or(s.a0);
                s.step = step.unwrap_or(s.step);
                s.epochs_per_level = epochs_per_level.unwrap_or(s.epochs_per_level);
                s.n_levels = n_levels.unwrap_or(s.n_levels);
            }
            _ => {}
        }
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut ws = Workspace::open(cli.run_config()?)?;
    let stages: &[Stage] = match &cli.command {
        Command::Pipeline => return ws.pipeline(),
        Command::BiasReport { corpus: Some(dir) } => {
            let corpus = load_corpus_dir(dir)?;
            for p in write_bias_report(&corpus, &ws.dir(Stage::BiasReport))? {
                println!("{}", p.display());
            }
            return Ok(());
        }
        Command::Synth | Command::Ingest { .. } => &[Stage::Corpus],
        Command::BiasReport { corpus: None } => &[Stage::BiasReport],
        Command::Pairs => &[Stage::Split, Stage::Pairs],
        Command::Uniqueness { .. } => &[Stage::Split, Stage::Uniqueness],
        Command::TrainGen { .. } => &[Stage::TrainGen],
        Command::TrainReward => &[Stage::TrainReward],
        Command::TrainRl => &[Stage::Normalize, Stage::TrainRl],
        Command::Generate => &[Stage::Generate],
        Command::Eval => &[Stage::Eval],
        Command::Agreement => &[Stage::Agreement],
    };
    let result = stages.iter().try_for_each(|&s| ws.run(s).map(drop));
    ws.write_manifest()?;
    result
}
