//! Vocabulary, relationship-triplet featurization and caption coverage.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Lstm, LstmState};
use crate::params::{ParamBuilder, ParamSet};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const DEFAULT_MIN_COUNT: usize = 5;
pub const MAX_TRIPLETS: usize = 20;
pub const WORD_DIM: usize = 300;

/// Lowercases, drops ASCII punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect::<String>()
        .split_whitespace()
        .map(ToString::to_string)
        .collect()
}

/// Token/index bijection with fixed specials at indices 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    min_count: usize,
}

impl Vocabulary {
    /// Keeps every token seen at least `min_count` times, ordered by count
    /// descending then lexicographically.
    pub fn build<S: AsRef<str>>(captions: &[S], min_count: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Empty("build_vocabulary"));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for tok in tokenize(c.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_count && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t), min_count)
    }

    /// Rebuilds a vocabulary from its non-special tokens in index order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I, min_count: usize) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = BTreeMap::new();
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Contract(alloc::format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary {
            tokens: all,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Non-special tokens in index order.
    pub fn words(&self) -> &[String] {
        &self.tokens[SPECIALS.len()..]
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// `[BOS, ids..., EOS]`; unknown words map to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.words_to_ids(&tokenize(text)));
        ids.push(EOS);
        ids
    }

    pub fn words_to_ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Joins word tokens, skipping `PAD`/`BOS` and stopping at `EOS`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD | BOS => continue,
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(self.token(id).unwrap_or(SPECIALS[UNK as usize]));
                }
            }
        }
        out
    }

    /// Word ids of a caption without `BOS`, `EOS` or padding.
    pub fn strip_specials(ids: &[u32]) -> Vec<u32> {
        ids.iter()
            .copied()
            .take_while(|&t| t != EOS)
            .filter(|&t| t != BOS && t != PAD)
            .collect()
    }
}

/// One `<subject, predicate, object>` relation with its detector score.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationshipTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub confidence: f64,
}

impl RelationshipTriplet {
    pub fn new(subject: &str, predicate: &str, object: &str, confidence: f64) -> Result<Self> {
        if [subject, predicate, object].iter().any(|w| w.trim().is_empty()) {
            return Err(Error::Contract("triplet words must be non-empty".into()));
        }
        Ok(RelationshipTriplet {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
            confidence,
        })
    }

    pub fn words(&self) -> [&str; 3] {
        [&self.subject, &self.predicate, &self.object]
    }
}

/// The `k` highest-confidence triplets in descending order; equal scores
/// keep their input order.
pub fn select_top_triplets(triplets: &[RelationshipTriplet], k: usize) -> Vec<RelationshipTriplet> {
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.sort_by(|&a, &b| {
        triplets[b]
            .confidence
            .partial_cmp(&triplets[a].confidence)
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    order.into_iter().take(k).map(|i| triplets[i].clone()).collect()
}

/// Word → fixed-width vector map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordVectorTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn new(dim: usize) -> Self {
        WordVectorTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape("word_vectors", &[self.dim], &[vector.len()]));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("word_vectors"));
        }
        self.vectors.insert(word.into(), vector);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Vector for `word`, zeros when absent.
    pub fn lookup_or_zero(&self, word: &str) -> Vec<f64> {
        self.get(word).map_or_else(|| vec![0.0; self.dim], <[f64]>::to_vec)
    }
}

/// Fixed LSTM that summarizes a triplet's three word vectors.
#[derive(Clone, Debug)]
pub struct TripletLstm {
    pub params: ParamSet,
    pub cell: Lstm,
}

impl TripletLstm {
    pub fn new<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let cell = Lstm::new(&mut ParamBuilder::new(&mut params, rng), "triplet_lstm", dim, dim);
        cell.init_forget_bias(&mut params);
        TripletLstm { params, cell }
    }
}

/// How the three word vectors of a triplet are reduced to one.
#[derive(Clone, Copy, Debug)]
pub enum TripletMode<'a> {
    Mean,
    Lstm(&'a TripletLstm),
}

pub fn embed_triplet(triplet: &RelationshipTriplet, table: &WordVectorTable, mode: TripletMode<'_>) -> Result<Vec<f64>> {
    let vecs = triplet.words().map(|w| table.lookup_or_zero(w));
    match mode {
        TripletMode::Mean => {
            let d = table.dim();
            Ok((0..d).map(|i| (vecs[0][i] + vecs[1][i] + vecs[2][i]) / 3.0).collect())
        }
        TripletMode::Lstm(lstm) => {
            if lstm.cell.input_dim != table.dim() {
                return Err(Error::shape("embed_triplet", &[lstm.cell.input_dim], &[table.dim()]));
            }
            let mut tape = Tape::new();
            let p = lstm.params.bind(&mut tape, false);
            let mut state = LstmState::zeros(&mut tape, lstm.cell.hidden);
            for v in vecs {
                let x = tape.constant(Tensor::row(v)?);
                state = lstm.cell.step(&mut tape, &p, state, x)?;
            }
            Ok(tape.value(state.h).data().to_vec())
        }
    }
}

/// Per-image model inputs: spatial map `N_s × D_s`, relationship matrix
/// `N_r × word_dim` and its validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub spatial: Tensor,
    pub relationships: Tensor,
    pub rel_mask: Vec<bool>,
}

impl FeatureBundle {
    pub fn new(spatial: Tensor, relationships: Tensor, rel_mask: Vec<bool>) -> Result<Self> {
        if spatial.shape().len() != 2 || relationships.shape().len() != 2 {
            return Err(Error::dim("feature_bundle", "features must be matrices"));
        }
        if relationships.rows() != rel_mask.len() {
            return Err(Error::shape("feature_bundle", relationships.shape(), &[rel_mask.len()]));
        }
        Ok(FeatureBundle {
            spatial,
            relationships,
            rel_mask,
        })
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        self.rel_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

/// `rows × dim` matrix of embedded triplets; rows past the triplet count
/// are zero and masked out.
pub fn build_relationship_matrix(
    triplets: &[RelationshipTriplet],
    table: &WordVectorTable,
    mode: TripletMode<'_>,
    rows: usize,
) -> Result<(Tensor, Vec<bool>)> {
    let d = table.dim();
    let mut data = vec![0.0; rows * d];
    let mut mask = vec![false; rows];
    for (i, t) in triplets.iter().take(rows).enumerate() {
        data[i * d..(i + 1) * d].copy_from_slice(&embed_triplet(t, table, mode)?);
        mask[i] = true;
    }
    Ok((Tensor::matrix(rows, d, data)?, mask))
}

/// Triplet-word occurrence in the ground-truth captions of one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Coverage {
    /// Triplet words inspected, by position (subject, predicate, object).
    pub total: [usize; 3],
    /// Of those, words that occur in at least one caption.
    pub found: [usize; 3],
}

impl Coverage {
    pub fn total_words(&self) -> usize {
        self.total.iter().sum()
    }

    pub fn found_words(&self) -> usize {
        self.found.iter().sum()
    }

    /// Fraction of triplet words found; 1 when there are none.
    pub fn ratio(&self) -> f64 {
        match self.total_words() {
            0 => 1.0,
            n => self.found_words() as f64 / n as f64,
        }
    }

    pub fn merge(&mut self, other: &Coverage) {
        for i in 0..3 {
            self.total[i] += other.total[i];
            self.found[i] += other.found[i];
        }
    }
}

/// Counts triplet words that appear in the image's captions. A multi-word
/// entry ("in front of") counts as found when all of its tokens appear.
pub fn triplet_coverage<S: AsRef<str>>(triplets: &[RelationshipTriplet], captions: &[S]) -> Coverage {
    let caption_words: BTreeSet<String> = captions.iter().flat_map(|c| tokenize(c.as_ref())).collect();
    let mut cov = Coverage::default();
    for t in triplets {
        for (pos, word) in t.words().iter().enumerate() {
            cov.total[pos] += 1;
            let toks = tokenize(word);
            if !toks.is_empty() && toks.iter().all(|w| caption_words.contains(w)) {
                cov.found[pos] += 1;
            }
        }
    }
    cov
}

/// Aggregates per-image coverage by split name.
pub fn triplet_coverage_stats<'a, I, S>(images: I) -> BTreeMap<String, Coverage>
where
    I: IntoIterator<Item = (&'a str, &'a [RelationshipTriplet], &'a [S])>,
    S: AsRef<str> + 'a,
{
    let mut out: BTreeMap<String, Coverage> = BTreeMap::new();
    for (split, triplets, captions) in images {
        out.entry(split.to_string())
            .or_default()
            .merge(&triplet_coverage(triplets, captions));
    }
    out
}
