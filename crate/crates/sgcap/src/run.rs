//! End-to-end operations behind the CLI commands. Each returns its results
//! in memory; [`crate::cli`] decides where they are written.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sgcap_core::audit::AuditReport;
use sgcap_core::features::{tokenize, triplet_coverage_stats, Vocabulary};
use sgcap_core::metrics::{evaluate_corpus, EvalReport};
use sgcap_core::trainer::{self, EpochLog, RewardModel, TrainImage, TrainReport};
use sgcap_core::vse::{self, Vse, VseEpoch, VsePair};
use sgcap_core::Captioner;

use crate::checkpoint::Checkpoint;
use crate::config::{RewardKind, RunConfig};
use crate::dataset::{load_images, parse_vocabulary, split_captions, Dataset, Featurizer, Split};
use crate::formats::read_sgaf;

/// A dataset with its featurizer and the vocabulary in force.
pub struct Corpus {
    pub dataset: Dataset,
    pub featurizer: Featurizer,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn images(&self, split: Split) -> Result<Vec<TrainImage>> {
        load_images(&self.dataset, split, &self.vocab, &self.featurizer)
    }
}

/// Vocabulary from `vocab.path`, or built from the training captions.
pub fn resolve_vocab(cfg: &RunConfig, dataset: &Dataset) -> Result<Vocabulary> {
    if let Some(p) = &cfg.vocab_path {
        let path = p.resolve();
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        return parse_vocabulary(&text, &path.display().to_string(), cfg.vocab_min_count);
    }
    let caps = split_captions(dataset, Split::Train);
    ensure!(!caps.is_empty(), "train split has no captions to build a vocabulary from");
    Ok(Vocabulary::build(&caps, cfg.vocab_min_count)?)
}

/// Fills in `model.spatial_dim` and `model.word_dim` from the data, or
/// checks them when the configuration already fixes them.
pub fn resolve_dims(cfg: &mut RunConfig, dataset: &Dataset, featurizer: &Featurizer) -> Result<()> {
    let first = dataset.records.first().context("empty dataset")?;
    let path = dataset.feature_path(first);
    let spatial = read_sgaf(&path)?.cols;
    for (key, slot, found) in [
        ("model.spatial_dim", &mut cfg.spatial_dim, spatial),
        ("model.word_dim", &mut cfg.word_dim, featurizer.word_dim()),
    ] {
        if *slot == 0 {
            *slot = found;
        } else if *slot != found {
            bail!("{key} = {} but the data has width {found}", *slot);
        }
    }
    Ok(())
}

/// Loads a dataset for a fresh run: new vocabulary, dims from the data.
pub fn open_corpus(cfg: &mut RunConfig, dataset: &Path) -> Result<Corpus> {
    let dataset = Dataset::load(dataset)?;
    let featurizer = Featurizer::from_config(cfg)?;
    resolve_dims(cfg, &dataset, &featurizer)?;
    let vocab = resolve_vocab(cfg, &dataset)?;
    Ok(Corpus {
        dataset,
        featurizer,
        vocab,
    })
}

/// Loads a dataset for a trained model: vocabulary and architecture come
/// from the checkpoint, paths and feature settings from `cfg`.
pub fn open_corpus_for(cfg: &mut RunConfig, dataset: &Path, ck: &Checkpoint) -> Result<Corpus> {
    adopt_architecture(cfg, &ck.run_config()?);
    let dataset = Dataset::load(dataset)?;
    let featurizer = Featurizer::from_config(cfg)?;
    resolve_dims(cfg, &dataset, &featurizer)?;
    Ok(Corpus {
        dataset,
        featurizer,
        vocab: ck.vocab.clone(),
    })
}

/// Copies every setting that shapes the model or its inputs.
pub fn adopt_architecture(cfg: &mut RunConfig, from: &RunConfig) {
    cfg.spatial_dim = from.spatial_dim;
    cfg.word_dim = from.word_dim;
    cfg.d_model = from.d_model;
    cfg.heads = from.heads;
    cfg.embed_dim = from.embed_dim;
    cfg.max_len = from.max_len;
    cfg.max_triplets = from.max_triplets;
    cfg.triplet_mode = from.triplet_mode;
    cfg.vse_dim = from.vse_dim;
    cfg.vse_embed_dim = from.vse_embed_dim;
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogLine {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_cider: Option<f64>,
    pub lr: f64,
}

impl From<&EpochLog> for LogLine {
    fn from(e: &EpochLog) -> Self {
        LogLine {
            epoch: e.epoch,
            loss: e.loss,
            mean_reward: e.mean_reward,
            val_cider: Some(e.val_cider),
            lr: e.lr,
        }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogLine>,
    pub report: TrainReport,
}

pub fn train_xe(cfg: &mut RunConfig, dataset: &Path) -> Result<TrainOutcome> {
    let corpus = open_corpus(cfg, dataset)?;
    let train = corpus.images(Split::Train)?;
    let val = corpus.images(Split::Val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Captioner::new(cfg.model_config(corpus.vocab.len()), &mut rng)?;
    log::info!(
        "xe: {} train / {} val images, vocabulary {}, {} parameters",
        train.len(),
        val.len(),
        corpus.vocab.len(),
        model.params.num_scalars()
    );
    let mut log = Vec::new();
    let report = trainer::train_xe(&mut model, &train, &val, &cfg.train_config(), &mut rng, |e| log.push(LogLine::from(e)))?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::captioner(cfg, corpus.vocab, &model),
        log,
        report,
    })
}

/// Reward model pieces that must outlive the borrow in [`RewardModel`].
pub struct RewardParts {
    pub vse: Option<(Vse, Vocabulary)>,
}

pub fn load_reward_parts(cfg: &RunConfig) -> Result<RewardParts> {
    match cfg.reward {
        RewardKind::Cider => Ok(RewardParts { vse: None }),
        RewardKind::Mmr => {
            let Some(p) = &cfg.vse_checkpoint else {
                bail!("reward mmr needs a VSE checkpoint (reward.vse_checkpoint or --vse-checkpoint)");
            };
            let ck = Checkpoint::load(&p.resolve())?;
            Ok(RewardParts {
                vse: Some((ck.to_vse()?, ck.vocab.clone())),
            })
        }
    }
}

pub fn reward_model<'a>(parts: &'a RewardParts, cfg: &RunConfig, vocab: &Vocabulary, train: &[TrainImage]) -> Result<RewardModel<'a>> {
    let idf = RewardModel::idf_from(train)?;
    Ok(match &parts.vse {
        None => RewardModel::language(idf),
        Some((vse, vse_vocab)) => {
            ensure!(
                vse.config.spatial_dim == cfg.spatial_dim,
                "VSE expects spatial width {}, data has {}",
                vse.config.spatial_dim,
                cfg.spatial_dim
            );
            RewardModel::multimodal(idf, cfg.phase2.alpha, vse, trainer::token_map(vocab, vse_vocab))?
        }
    })
}

pub fn train_scst(cfg: &mut RunConfig, dataset: &Path, init: &Checkpoint) -> Result<TrainOutcome> {
    let mut model = init.to_captioner()?;
    let corpus = open_corpus_for(cfg, dataset, init)?;
    let train = corpus.images(Split::Train)?;
    let val = corpus.images(Split::Val)?;
    let parts = load_reward_parts(cfg)?;
    let reward = reward_model(&parts, cfg, &corpus.vocab, &train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let report = trainer::train_scst(&mut model, &train, &val, &reward, &cfg.train_config(), &mut rng, |e| {
        log.push(LogLine::from(e))
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::captioner(cfg, corpus.vocab, &model),
        log,
        report,
    })
}

/// Every (image, caption) pair of `images`, tokens without sentence markers.
pub fn vse_pairs(images: &[TrainImage]) -> Vec<VsePair> {
    images
        .iter()
        .flat_map(|im| {
            im.refs.iter().filter(|r| !r.is_empty()).map(|r| VsePair {
                spatial: im.bundle.spatial.clone(),
                tokens: r.clone(),
            })
        })
        .collect()
}

pub struct VseOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<VseEpoch>,
    pub train_accuracy: f64,
}

pub fn train_vse(cfg: &mut RunConfig, dataset: &Path) -> Result<VseOutcome> {
    let corpus = open_corpus(cfg, dataset)?;
    let pairs = vse_pairs(&corpus.images(Split::Train)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Vse::new(cfg.vse_config(corpus.vocab.len()), &mut rng)?;
    let epochs = vse::train_vse(&mut model, &pairs, &cfg.vse_train, &mut rng)?;
    let train_accuracy = vse::ranking_accuracy(&model, &pairs)?;
    log::info!("vse: {} pairs, ranking accuracy {train_accuracy:.3}", pairs.len());
    Ok(VseOutcome {
        checkpoint: Checkpoint::vse(cfg, corpus.vocab, &model),
        epochs,
        train_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaptionLine {
    pub id: String,
    pub caption: String,
}

/// Greedy captions for every image of a split, captioned or not.
pub fn caption_split(cfg: &mut RunConfig, dataset: &Path, ck: &Checkpoint, split: Split) -> Result<Vec<CaptionLine>> {
    let model = ck.to_captioner()?;
    let corpus = open_corpus_for(cfg, dataset, ck)?;
    let mut out = Vec::new();
    for rec in corpus.dataset.split(split) {
        let bundle = corpus.featurizer.bundle(&corpus.dataset, rec)?;
        let tokens = model.generate_greedy(&bundle, cfg.max_len)?;
        out.push(CaptionLine {
            id: rec.id.clone(),
            caption: corpus.vocab.decode(&tokens),
        });
    }
    Ok(out)
}

/// Scores of a split as written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalJson {
    pub split: String,
    pub images: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    #[serde(rename = "ciderD")]
    pub cider_d: f64,
    /// Not computed; kept so reports line up with published tables.
    pub meteor: &'static str,
}

impl EvalJson {
    pub fn new(split: Split, images: usize, r: &EvalReport) -> Self {
        EvalJson {
            split: split.to_string(),
            images,
            bleu1: r.bleu[0],
            bleu2: r.bleu[1],
            bleu3: r.bleu[2],
            bleu4: r.bleu[3],
            rouge_l: r.rouge_l,
            cider: r.cider,
            cider_d: r.cider_d,
            meteor: "-",
        }
    }
}

/// Scores candidate captions (keyed by image id) against a split's references.
pub fn evaluate_captions(dataset: &Dataset, split: Split, captions: &BTreeMap<String, String>) -> Result<EvalJson> {
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for rec in dataset.split(split) {
        if rec.captions.is_empty() {
            continue;
        }
        let Some(c) = captions.get(&rec.id) else {
            bail!("no candidate caption for image {}", rec.id);
        };
        cands.push(tokenize(c));
        refs.push(rec.captions.iter().map(|r| tokenize(r)).collect::<Vec<_>>());
    }
    ensure!(!cands.is_empty(), "split {split} has no captioned images");
    Ok(EvalJson::new(split, cands.len(), &evaluate_corpus(&cands, &refs)?))
}

pub fn read_caption_lines(path: &Path) -> Result<BTreeMap<String, String>> {
    #[derive(serde::Deserialize)]
    struct Line {
        id: String,
        caption: String,
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: Line = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.insert(l.id, l.caption);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageJson {
    pub split: String,
    pub images: usize,
    pub subject: [usize; 2],
    pub predicate: [usize; 2],
    pub object: [usize; 2],
    pub ratio: f64,
}

/// Triplet-word occurrence in captions, per split, as `[found, total]`.
pub fn coverage(dataset: &Dataset) -> Result<Vec<CoverageJson>> {
    let triplets = dataset
        .records
        .iter()
        .map(|r| r.relationship_triplets())
        .collect::<Result<Vec<_>>>()?;
    let stats = triplet_coverage_stats(
        dataset
            .records
            .iter()
            .zip(&triplets)
            .map(|(r, t)| (r.split.name(), t.as_slice(), r.captions.as_slice())),
    );
    Ok(Split::ALL
        .iter()
        .filter_map(|s| {
            stats.get(s.name()).map(|c| CoverageJson {
                split: s.to_string(),
                images: dataset.split(*s).len(),
                subject: [c.found[0], c.total[0]],
                predicate: [c.found[1], c.total[1]],
                object: [c.found[2], c.total[2]],
                ratio: c.ratio(),
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditJson {
    pub block: String,
    pub seeds: Vec<u64>,
    pub max_error: f64,
    pub passed: bool,
    pub worst_location: String,
    pub worst_index: usize,
}

pub fn audit_json(report: &AuditReport) -> Vec<AuditJson> {
    report
        .entries
        .iter()
        .map(|e| AuditJson {
            block: e.block.to_string(),
            seeds: e.seeds.clone(),
            max_error: e.max_error,
            passed: e.passed(),
            worst_location: e.worst.location.clone(),
            worst_index: e.worst.index,
        })
        .collect()
}
