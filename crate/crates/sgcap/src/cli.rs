//! Command-line surface. Exit status: 0 success, 2 usage error, 1 runtime error.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sgcap_core::audit::grad_audit;
use sgcap_core::features::Vocabulary;

use crate::checkpoint::Checkpoint;
use crate::config::{RewardKind, RunConfig};
use crate::dataset::{split_captions, token_counts, vocabulary_text, Dataset, Featurizer, Split};
use crate::formats::write_sgaf;
use crate::io::{jsonl, write_atomic_str};
use crate::run;
use crate::toy;

pub const CHECKPOINT_FILE: &str = "checkpoint.sgck";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const VSE_CHECKPOINT_FILE: &str = "vse.sgck";
pub const VSE_LOG_FILE: &str = "vse_log.jsonl";

/// Bad flags or configuration, reported with exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Parser)]
#[command(name = "sgcap", version, about = "Scene-graph attention-on-attention image captioning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Builds the vocabulary of the training captions.
    BuildVocab {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Precomputes relationship features, one SGAF file per image.
    Featurize {
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory; point `features.rel_cache` at it to reuse.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Phase 1: cross-entropy training.
    TrainXe {
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory for the checkpoint and the training log.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Phase 2: self-critical training from a phase-1 checkpoint.
    TrainScst {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_parser = ["cider", "mmr"])]
        reward: Option<String>,
        #[arg(long)]
        vse_checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Trains the visual-semantic embedding used by the vision reward.
    TrainVse {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Greedy captions for one split, as JSON lines `{id, caption}`.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// BLEU, ROUGE-L, CIDEr and CIDEr-D of a split.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Caption the split with this model.
        #[arg(long, conflicts_with = "captions", required_unless_present = "captions")]
        checkpoint: Option<PathBuf>,
        /// Score previously written `{id, caption}` lines instead.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable block.
    GradAudit {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Writes a synthetic corpus with features, word vectors and a config.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Occurrence of triplet words in the ground-truth captions, per split.
    CoverageStats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::BuildVocab { common, .. }
            | Command::Featurize { common, .. }
            | Command::TrainXe { common, .. }
            | Command::TrainScst { common, .. }
            | Command::TrainVse { common, .. }
            | Command::Caption { common, .. }
            | Command::Evaluate { common, .. }
            | Command::GradAudit { common, .. }
            | Command::MakeToyData { common, .. }
            | Command::CoverageStats { common, .. } => common,
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Configuration file, if any, with `--seed` applied.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) if !p.exists() => return Err(usage(format!("config file {} does not exist", p.display()))),
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{:#}", anyhow::Error::new(e))))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic_str(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn pretty<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.command.common())?;
    match cli.command {
        Command::BuildVocab { dataset, out, .. } => {
            let ds = Dataset::load(&dataset)?;
            let caps = split_captions(&ds, Split::Train);
            let vocab = Vocabulary::build(&caps, cfg.vocab_min_count).context("building vocabulary")?;
            log::info!("vocabulary: {} tokens (min count {})", vocab.len(), cfg.vocab_min_count);
            write_atomic_str(&out, &vocabulary_text(&vocab, &token_counts(&caps)))
        }
        Command::Featurize { dataset, out, .. } => {
            let ds = Dataset::load(&dataset)?;
            let f = Featurizer::from_config(&cfg)?;
            for rec in &ds.records {
                write_sgaf(&Featurizer::cache_path(&out, &rec.id), &f.relationship_rows(rec)?)?;
            }
            log::info!("featurized {} images into {}", ds.records.len(), out.display());
            Ok(())
        }
        Command::TrainXe { dataset, out, .. } => {
            let o = run::train_xe(&mut cfg, &dataset)?;
            write_atomic_str(&out.join(LOG_FILE), &jsonl(&o.log)?)?;
            o.checkpoint.save(&out.join(CHECKPOINT_FILE))
        }
        Command::TrainScst {
            dataset,
            checkpoint,
            out,
            alpha,
            reward,
            vse_checkpoint,
            ..
        } => {
            if let Some(a) = alpha {
                if !(0.0..=1.0).contains(&a) {
                    return Err(usage(format!("--alpha {a} outside [0, 1]")));
                }
                cfg.phase2.alpha = a;
            }
            if let Some(r) = reward {
                cfg.reward = r.parse::<RewardKind>().map_err(usage)?;
            }
            if let Some(p) = vse_checkpoint {
                cfg.set("reward.vse_checkpoint", &p.to_string_lossy(), Path::new(""))?;
            }
            if cfg.reward == RewardKind::Mmr && cfg.vse_checkpoint.is_none() {
                return Err(usage("reward mmr needs --vse-checkpoint or reward.vse_checkpoint"));
            }
            let init = Checkpoint::load(&checkpoint)?;
            let o = run::train_scst(&mut cfg, &dataset, &init)?;
            write_atomic_str(&out.join(LOG_FILE), &jsonl(&o.log)?)?;
            o.checkpoint.save(&out.join(CHECKPOINT_FILE))
        }
        Command::TrainVse { dataset, out, .. } => {
            let o = run::train_vse(&mut cfg, &dataset)?;
            let lines: Vec<_> = o
                .epochs
                .iter()
                .map(|e| serde_json::json!({"epoch": e.epoch, "loss": e.loss, "lr": cfg.vse_train.lr}))
                .collect();
            write_atomic_str(&out.join(VSE_LOG_FILE), &jsonl(&lines)?)?;
            o.checkpoint.save(&out.join(VSE_CHECKPOINT_FILE))
        }
        Command::Caption {
            checkpoint,
            dataset,
            split,
            out,
            ..
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let lines = run::caption_split(&mut cfg, &dataset, &ck, split)?;
            write_atomic_str(&out, &jsonl(&lines)?)
        }
        Command::Evaluate {
            dataset,
            split,
            checkpoint,
            captions,
            out,
            ..
        } => {
            let candidates = match (checkpoint, captions) {
                (_, Some(c)) => run::read_caption_lines(&c)?,
                (Some(ck), None) => {
                    let ck = Checkpoint::load(&ck)?;
                    run::caption_split(&mut cfg, &dataset, &ck, split)?
                        .into_iter()
                        .map(|l| (l.id, l.caption))
                        .collect()
                }
                (None, None) => return Err(usage("evaluate needs --checkpoint or --captions")),
            };
            let report = run::evaluate_captions(&Dataset::load(&dataset)?, split, &candidates)?;
            emit(out.as_deref(), &pretty(&report)?)
        }
        Command::GradAudit { out, .. } => {
            let report = grad_audit(cfg.seed)?;
            emit(out.as_deref(), &pretty(&run::audit_json(&report))?)?;
            for e in &report.entries {
                log::info!("{:<22} max rel. error {:.3e}", e.block, e.max_error);
            }
            anyhow::ensure!(report.passed(), "gradient audit failed: worst error {:.3e}", report.worst());
            Ok(())
        }
        Command::MakeToyData {
            out, images, vocab_size, ..
        } => {
            let mut toy_cfg = cfg.toy.clone();
            toy_cfg.n_images = images.unwrap_or(toy_cfg.n_images);
            toy_cfg.vocab_size = vocab_size.unwrap_or(toy_cfg.vocab_size);
            let corpus = toy::generate(&toy_cfg, cfg.seed).map_err(|e| usage(e.to_string()))?;
            corpus.write(&out, &toy_cfg, cfg.seed)
        }
        Command::CoverageStats { dataset, out, .. } => {
            let stats = run::coverage(&Dataset::load(&dataset)?)?;
            emit(out.as_deref(), &pretty(&stats)?)
        }
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
