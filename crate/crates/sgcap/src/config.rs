//! Flat `key = value` run configuration.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Lines starting with `#` are comments. Relative paths are resolved
//! against the directory of the file they came from.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sgcap_core::features::{DEFAULT_MIN_COUNT, MAX_TRIPLETS};
use sgcap_core::trainer::{Phase1Config, Phase2Config, TrainConfig};
use sgcap_core::vse::{VseConfig, VseTrainConfig};
use sgcap_core::ModelConfig;

use crate::toy::ToyConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {detail}")]
    Line { source_name: String, line: usize, detail: String },
    #[error("{key}: {detail}")]
    Value { key: String, detail: String },
    #[error("reading {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How the three word vectors of a triplet are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TripletModeKind {
    Mean,
    Lstm,
}

impl FromStr for TripletModeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "lstm" => Ok(Self::Lstm),
            _ => Err(format!("expected mean or lstm, got {s:?}")),
        }
    }
}

impl Display for TripletModeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Lstm => "lstm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    /// CIDEr-D only.
    Cider,
    /// CIDEr-D blended with the VSE vision reward.
    Mmr,
}

impl FromStr for RewardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cider" => Ok(Self::Cider),
            "mmr" => Ok(Self::Mmr),
            _ => Err(format!("expected cider or mmr, got {s:?}")),
        }
    }
}

impl Display for RewardKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cider => "cider",
            Self::Mmr => "mmr",
        })
    }
}

/// A path as written, plus the directory it is relative to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigPath {
    pub raw: String,
    pub base: PathBuf,
}

impl ConfigPath {
    pub fn resolve(&self) -> PathBuf {
        let p = Path::new(&self.raw);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub vocab_min_count: usize,
    pub vocab_path: Option<ConfigPath>,
    pub word_vectors: Option<ConfigPath>,
    pub triplet_mode: TripletModeKind,
    pub max_triplets: usize,
    pub rel_cache: Option<ConfigPath>,
    /// Zero means "take it from the data".
    pub spatial_dim: usize,
    pub word_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub clip: f64,
    pub reward: RewardKind,
    pub vse_checkpoint: Option<ConfigPath>,
    pub vse_dim: usize,
    pub vse_embed_dim: usize,
    pub vse_train: VseTrainConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let vse = VseConfig::default();
        RunConfig {
            seed: 0,
            vocab_min_count: DEFAULT_MIN_COUNT,
            vocab_path: None,
            word_vectors: None,
            triplet_mode: TripletModeKind::Mean,
            max_triplets: MAX_TRIPLETS,
            rel_cache: None,
            spatial_dim: 0,
            word_dim: 0,
            d_model: model.d_model,
            heads: model.heads,
            embed_dim: model.embed_dim,
            max_len: model.max_len,
            phase1: train.phase1,
            phase2: train.phase2,
            clip: train.clip,
            reward: RewardKind::Mmr,
            vse_checkpoint: None,
            vse_dim: vse.dim,
            vse_embed_dim: vse.embed_dim,
            vse_train: VseTrainConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        detail: format!("{value:?}: {e}"),
    })
}

fn path_value(value: &str, base: &Path) -> Option<ConfigPath> {
    (!value.is_empty()).then(|| ConfigPath {
        raw: value.into(),
        base: base.to_path_buf(),
    })
}

fn path_text(p: &Option<ConfigPath>) -> String {
    p.as_ref().map(|p| p.raw.clone()).unwrap_or_default()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string(), &base)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line of `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str, source_name: &str, base: &Path) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at_line = |detail: String| ConfigError::Line {
                source_name: source_name.into(),
                line: i + 1,
                detail,
            };
            let (key, value) = line.split_once('=').ok_or_else(|| at_line(format!("expected key = value, got {line:?}")))?;
            self.set(key.trim(), value.trim(), base).map_err(|e| at_line(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, "<config>", Path::new(""))?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "vocab.min_count" => self.vocab_min_count = parse(key, value)?,
            "vocab.path" => self.vocab_path = path_value(value, base),
            "features.word_vectors" => self.word_vectors = path_value(value, base),
            "features.triplet_mode" => self.triplet_mode = parse(key, value)?,
            "features.max_triplets" => self.max_triplets = parse(key, value)?,
            "features.rel_cache" => self.rel_cache = path_value(value, base),
            "model.spatial_dim" => self.spatial_dim = parse(key, value)?,
            "model.word_dim" => self.word_dim = parse(key, value)?,
            "model.d_model" => self.d_model = parse(key, value)?,
            "model.heads" => self.heads = parse(key, value)?,
            "model.embed_dim" => self.embed_dim = parse(key, value)?,
            "model.max_len" => self.max_len = parse(key, value)?,
            "phase1.max_epochs" => self.phase1.max_epochs = parse(key, value)?,
            "phase1.patience" => self.phase1.patience = parse(key, value)?,
            "phase1.lr0" => self.phase1.lr0 = parse(key, value)?,
            "phase1.decay_every" => self.phase1.decay_every = parse(key, value)?,
            "phase1.decay_factor" => self.phase1.decay_factor = parse(key, value)?,
            "phase1.batch" => self.phase1.batch = parse(key, value)?,
            "phase2.epochs" => self.phase2.epochs = parse(key, value)?,
            "phase2.patience" => self.phase2.patience = parse(key, value)?,
            "phase2.lr" => self.phase2.lr = parse(key, value)?,
            "phase2.batch" => self.phase2.batch = parse(key, value)?,
            "phase2.alpha" => self.phase2.alpha = parse(key, value)?,
            "clip" => self.clip = parse(key, value)?,
            "reward" => self.reward = parse(key, value)?,
            "reward.vse_checkpoint" => self.vse_checkpoint = path_value(value, base),
            "vse.dim" => self.vse_dim = parse(key, value)?,
            "vse.embed_dim" => self.vse_embed_dim = parse(key, value)?,
            "vse.epochs" => self.vse_train.epochs = parse(key, value)?,
            "vse.lr" => self.vse_train.lr = parse(key, value)?,
            "vse.batch" => self.vse_train.batch = parse(key, value)?,
            "vse.margin" => self.vse_train.margin = parse(key, value)?,
            "vse.clip" => self.vse_train.clip = parse(key, value)?,
            "toy.images" => self.toy.n_images = parse(key, value)?,
            "toy.vocab_size" => self.toy.vocab_size = parse(key, value)?,
            "toy.captions_per_image" => self.toy.captions_per_image = parse(key, value)?,
            "toy.spatial_rows" => self.toy.spatial_rows = parse(key, value)?,
            "toy.spatial_dim" => self.toy.spatial_dim = parse(key, value)?,
            "toy.word_dim" => self.toy.word_dim = parse(key, value)?,
            "toy.noise" => self.toy.noise = parse(key, value)?,
            _ => {
                return Err(ConfigError::Value {
                    key: key.into(),
                    detail: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Paths appear as
    /// written.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (p1, p2, v) = (&self.phase1, &self.phase2, &self.vse_train);
        vec![
            ("seed", self.seed.to_string()),
            ("vocab.min_count", self.vocab_min_count.to_string()),
            ("vocab.path", path_text(&self.vocab_path)),
            ("features.word_vectors", path_text(&self.word_vectors)),
            ("features.triplet_mode", self.triplet_mode.to_string()),
            ("features.max_triplets", self.max_triplets.to_string()),
            ("features.rel_cache", path_text(&self.rel_cache)),
            ("model.spatial_dim", self.spatial_dim.to_string()),
            ("model.word_dim", self.word_dim.to_string()),
            ("model.d_model", self.d_model.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.max_len", self.max_len.to_string()),
            ("phase1.max_epochs", p1.max_epochs.to_string()),
            ("phase1.patience", p1.patience.to_string()),
            ("phase1.lr0", p1.lr0.to_string()),
            ("phase1.decay_every", p1.decay_every.to_string()),
            ("phase1.decay_factor", p1.decay_factor.to_string()),
            ("phase1.batch", p1.batch.to_string()),
            ("phase2.epochs", p2.epochs.to_string()),
            ("phase2.patience", p2.patience.to_string()),
            ("phase2.lr", p2.lr.to_string()),
            ("phase2.batch", p2.batch.to_string()),
            ("phase2.alpha", p2.alpha.to_string()),
            ("clip", self.clip.to_string()),
            ("reward", self.reward.to_string()),
            ("reward.vse_checkpoint", path_text(&self.vse_checkpoint)),
            ("vse.dim", self.vse_dim.to_string()),
            ("vse.embed_dim", self.vse_embed_dim.to_string()),
            ("vse.epochs", v.epochs.to_string()),
            ("vse.lr", v.lr.to_string()),
            ("vse.batch", v.batch.to_string()),
            ("vse.margin", v.margin.to_string()),
            ("vse.clip", v.clip.to_string()),
            ("toy.images", self.toy.n_images.to_string()),
            ("toy.vocab_size", self.toy.vocab_size.to_string()),
            ("toy.captions_per_image", self.toy.captions_per_image.to_string()),
            ("toy.spatial_rows", self.toy.spatial_rows.to_string()),
            ("toy.spatial_dim", self.toy.spatial_dim.to_string()),
            ("toy.word_dim", self.toy.word_dim.to_string()),
            ("toy.noise", self.toy.noise.to_string()),
        ]
    }

    /// `key = value` text that parses back to the same configuration.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            phase1: self.phase1.clone(),
            phase2: self.phase2.clone(),
            clip: self.clip,
            max_len: self.max_len,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            spatial_dim: self.spatial_dim,
            word_dim: self.word_dim,
            d_model: self.d_model,
            heads: self.heads,
            embed_dim: self.embed_dim,
            max_triplets: self.max_triplets,
            max_len: self.max_len,
        }
    }

    pub fn vse_config(&self, vocab_size: usize) -> VseConfig {
        VseConfig {
            vocab_size,
            spatial_dim: self.spatial_dim,
            embed_dim: self.vse_embed_dim,
            dim: self.vse_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sgcap_core::vse::DEFAULT_MARGIN;

    #[test]
    fn defaults_mirror_train_config() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train_config(), TrainConfig::default());
        assert_eq!(cfg.vse_train.margin, DEFAULT_MARGIN);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::parse_str("seed = 9\nphase1.lr0 = 0.125\n# comment\n\nreward=cider\nfeatures.word_vectors = wv.txt\n").unwrap();
        cfg.phase2.alpha = 0.3;
        let again = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.seed, 9);
        assert_eq!(again.reward, RewardKind::Cider);
        assert_eq!(again.word_vectors.unwrap().raw, "wv.txt");
    }

    #[test]
    fn errors_name_line_and_key() {
        let err = RunConfig::parse_str("seed = 1\nphase1.batch = many\n").unwrap_err();
        assert!(err.to_string().starts_with("<config>:2: phase1.batch"), "{err}");
        let err = RunConfig::parse_str("nonsense = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        assert!(RunConfig::parse_str("just words\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("vocab.path = v.txt\n", "c", Path::new("/data/run")).unwrap();
        assert_eq!(cfg.vocab_path.unwrap().resolve(), PathBuf::from("/data/run/v.txt"));
    }
}
