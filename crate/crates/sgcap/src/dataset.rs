//! JSON-lines image datasets and their conversion to model inputs.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sgcap_core::features::{
    build_relationship_matrix, select_top_triplets, FeatureBundle, RelationshipTriplet, TripletLstm, TripletMode,
    Vocabulary, WordVectorTable,
};
use sgcap_core::trainer::TrainImage;
use sgcap_core::Tensor;

use crate::config::{RunConfig, TripletModeKind};
use crate::formats::{read_sgaf, read_word_vectors, FeatureMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| format!("unknown split {s:?}, expected train, val or test"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub s: String,
    pub p: String,
    pub o: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub split: Split,
    pub captions: Vec<String>,
    pub triplets: Vec<TripletRecord>,
    /// SGAF spatial features, relative to the dataset file.
    pub feature_file: String,
}

impl ImageRecord {
    pub fn relationship_triplets(&self) -> Result<Vec<RelationshipTriplet>> {
        self.triplets
            .iter()
            .enumerate()
            .map(|(k, t)| {
                RelationshipTriplet::new(&t.s, &t.p, &t.o, t.score)
                    .map_err(|e| anyhow::anyhow!("image {}: triplets[{k}]: {e}", self.id))
            })
            .collect()
    }
}

/// Records of one JSONL file, with the directory feature paths are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), dir)
    }

    pub fn parse(text: &str, name: &str, dir: PathBuf) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord = serde_json::from_str(line).with_context(|| format!("{name}:{}: invalid record", i + 1))?;
            if rec.id.is_empty() {
                bail!("{name}:{}: field id is empty", i + 1);
            }
            if let Some(k) = rec.triplets.iter().position(|t| !t.score.is_finite()) {
                bail!("{name}:{}: field triplets[{k}].score is not finite", i + 1);
            }
            if !seen.insert(rec.id.clone()) {
                bail!("{name}:{}: duplicate id {:?}", i + 1, rec.id);
            }
            records.push(rec);
        }
        if records.is_empty() {
            bail!("{name}: no records");
        }
        Ok(Dataset { dir, records })
    }

    pub fn split(&self, split: Split) -> Vec<&ImageRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn feature_path(&self, rec: &ImageRecord) -> PathBuf {
        self.dir.join(&rec.feature_file)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        crate::io::jsonl(&self.records)
    }
}

/// Turns records into [`FeatureBundle`]s: spatial maps from SGAF files and
/// relationship matrices from word vectors, or from a featurize cache.
pub struct Featurizer {
    pub table: WordVectorTable,
    pub mode: TripletModeKind,
    pub lstm: Option<TripletLstm>,
    pub max_triplets: usize,
    pub cache: Option<PathBuf>,
}

/// The triplet LSTM is never trained; a fixed seed makes featurization a
/// pure function of its inputs, independent of the run seed.
const TRIPLET_LSTM_SEED: u64 = 0x7472_6970;

impl Featurizer {
    pub fn new(table: WordVectorTable, mode: TripletModeKind, max_triplets: usize) -> Self {
        let lstm = (mode == TripletModeKind::Lstm)
            .then(|| TripletLstm::new(table.dim(), &mut ChaCha8Rng::seed_from_u64(TRIPLET_LSTM_SEED)));
        Featurizer {
            table,
            mode,
            lstm,
            max_triplets,
            cache: None,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let Some(wv) = &cfg.word_vectors else {
            bail!("features.word_vectors is not set");
        };
        let table = read_word_vectors(&wv.resolve())?;
        let mut f = Featurizer::new(table, cfg.triplet_mode, cfg.max_triplets);
        f.cache = cfg.rel_cache.as_ref().map(|p| p.resolve());
        Ok(f)
    }

    pub fn word_dim(&self) -> usize {
        self.table.dim()
    }

    fn mode(&self) -> TripletMode<'_> {
        match &self.lstm {
            Some(l) => TripletMode::Lstm(l),
            None => TripletMode::Mean,
        }
    }

    /// Embedded top triplets, one row each, without padding.
    pub fn relationship_rows(&self, rec: &ImageRecord) -> Result<FeatureMatrix> {
        let top = select_top_triplets(&rec.relationship_triplets()?, self.max_triplets);
        let d = self.table.dim();
        if top.is_empty() {
            return Ok(FeatureMatrix { rows: 0, cols: d, data: Vec::new() });
        }
        let (m, _) = build_relationship_matrix(&top, &self.table, self.mode(), top.len())?;
        Ok(FeatureMatrix::from_tensor(&m))
    }

    pub fn cache_path(dir: &Path, id: &str) -> PathBuf {
        dir.join(format!("{id}.rel.sgaf"))
    }

    fn padded(&self, rows: &FeatureMatrix) -> Result<(Tensor, Vec<bool>)> {
        let d = self.table.dim();
        if rows.cols != d {
            bail!("relationship features have width {}, word vectors {d}", rows.cols);
        }
        let n = rows.rows.min(self.max_triplets);
        let mut data = vec![0.0; self.max_triplets * d];
        for (dst, src) in data.iter_mut().zip(&rows.data[..n * d]) {
            *dst = f64::from(*src);
        }
        let mask = (0..self.max_triplets).map(|i| i < n).collect();
        Ok((Tensor::matrix(self.max_triplets, d, data)?, mask))
    }

    pub fn bundle(&self, dataset: &Dataset, rec: &ImageRecord) -> Result<FeatureBundle> {
        let spatial_path = dataset.feature_path(rec);
        let spatial = read_sgaf(&spatial_path)?;
        if spatial.rows == 0 {
            bail!("{}: image {} has no spatial rows", spatial_path.display(), rec.id);
        }
        let (relationships, mask) = match &self.cache {
            Some(dir) => {
                let p = Self::cache_path(dir, &rec.id);
                let rows = read_sgaf(&p)?;
                self.padded(&rows).with_context(|| p.display().to_string())?
            }
            None => {
                let top = select_top_triplets(&rec.relationship_triplets()?, self.max_triplets);
                build_relationship_matrix(&top, &self.table, self.mode(), self.max_triplets)?
            }
        };
        Ok(FeatureBundle::new(spatial.to_tensor()?, relationships, mask)?)
    }
}

/// All captions of a split, for vocabulary construction.
pub fn split_captions(dataset: &Dataset, split: Split) -> Vec<&str> {
    dataset
        .split(split)
        .into_iter()
        .flat_map(|r| r.captions.iter().map(String::as_str))
        .collect()
}

/// Model-ready images of a split. Images without captions are skipped.
pub fn load_images(dataset: &Dataset, split: Split, vocab: &Vocabulary, featurizer: &Featurizer) -> Result<Vec<TrainImage>> {
    let mut out = Vec::new();
    for rec in dataset.split(split) {
        if rec.captions.is_empty() {
            log::warn!("image {} in {split} has no captions; skipped", rec.id);
            continue;
        }
        let bundle = featurizer.bundle(dataset, rec)?;
        let captions = rec.captions.iter().map(|c| vocab.encode(c)).collect();
        out.push(TrainImage::new(rec.id.clone(), bundle, captions)?);
    }
    if out.is_empty() {
        bail!("split {split} has no captioned images");
    }
    Ok(out)
}

/// Vocabulary file: one `word count` line per non-special token, index order.
pub fn vocabulary_text(vocab: &Vocabulary, counts: &std::collections::BTreeMap<String, usize>) -> String {
    vocab
        .words()
        .iter()
        .map(|w| format!("{w} {}\n", counts.get(w).copied().unwrap_or(0)))
        .collect()
}

pub fn parse_vocabulary(text: &str, name: &str, min_count: usize) -> Result<Vocabulary> {
    let mut words = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some(word) = line.split_whitespace().next() else { continue };
        if line.split_whitespace().count() > 2 {
            bail!("{name}:{}: expected `word count`", i + 1);
        }
        words.push(word.to_string());
    }
    Vocabulary::from_tokens(words, min_count).with_context(|| name.to_string())
}

pub fn token_counts<S: AsRef<str>>(captions: &[S]) -> std::collections::BTreeMap<String, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for c in captions {
        for t in sgcap_core::features::tokenize(c.as_ref()) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = r#"{"id":"img1","split":"train","captions":["A dog runs."],"triplets":[{"s":"dog","p":"on","o":"grass","score":0.9}],"feature_file":"f/img1.sgaf"}"#;

    #[test]
    fn parses_and_round_trips() {
        let ds = Dataset::parse(LINE, "d.jsonl", PathBuf::from("/x")).unwrap();
        assert_eq!(ds.records[0].split, Split::Train);
        assert_eq!(ds.feature_path(&ds.records[0]), PathBuf::from("/x/f/img1.sgaf"));
        let again = Dataset::parse(&ds.to_jsonl().unwrap(), "d", PathBuf::from("/x")).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn schema_errors_name_line_and_field() {
        let bad = LINE.replace(r#""split":"train","#, "");
        let err = Dataset::parse(&format!("{LINE}\n{bad}"), "d.jsonl", PathBuf::new()).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("d.jsonl:2") && msg.contains("split"), "{msg}");
        let dup = format!("{LINE}\n{LINE}");
        assert!(format!("{:#}", Dataset::parse(&dup, "d", PathBuf::new()).unwrap_err()).contains("duplicate"));
        let bad_split = LINE.replace("train", "dev");
        assert!(Dataset::parse(&bad_split, "d", PathBuf::new()).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let caps = ["a dog", "a cat", "a dog"];
        let v = Vocabulary::build(&caps, 1).unwrap();
        let text = vocabulary_text(&v, &token_counts(&caps));
        assert_eq!(text, "a 3\ndog 2\ncat 1\n");
        assert_eq!(parse_vocabulary(&text, "v", 1).unwrap(), v);
    }
}
