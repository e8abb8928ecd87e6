//! Synthetic captioning corpus for desk-scale runs.
//!
//! Every image shows one `(color, subject, predicate, object)` scene. Its
//! spatial rows are noisy copies of per-word prototype vectors, its
//! triplets use only words of its captions, and the split sizes follow the
//! 5000 / 5000 / rest proportions of the MSCOCO split.

use std::path::Path;

use anyhow::{bail, ensure, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sgcap_core::features::{WordVectorTable, SPECIALS};

use crate::dataset::{Dataset, ImageRecord, Split, TripletRecord};
use crate::formats::{format_word_vectors, write_sgaf, FeatureMatrix};
use crate::io::write_atomic_str;

const COLORS: [&str; 16] = [
    "red", "blue", "green", "black", "white", "brown", "yellow", "gray", "orange", "pink", "purple", "golden", "silver",
    "dark", "pale", "striped",
];
const SUBJECTS: [&str; 16] = [
    "dog", "cat", "man", "woman", "horse", "bird", "child", "cow", "sheep", "boy", "girl", "bear", "goat", "duck", "rabbit",
    "fox",
];
const PREDICATES: [&str; 16] = [
    "on", "near", "under", "behind", "beside", "holding", "above", "watching", "riding", "chasing", "carrying", "touching",
    "facing", "below", "inside", "leaving",
];
const OBJECTS: [&str; 16] = [
    "table", "car", "tree", "bench", "boat", "fence", "bed", "truck", "chair", "rock", "wall", "kite", "ball", "box", "door",
    "sofa",
];
const FUNCTION_WORDS: [&str; 2] = ["a", "the"];

/// Caption templates over `{c}`, `{s}`, `{p}`, `{o}`; caption `k` of an
/// image uses template `k mod 4`.
const TEMPLATES: [&str; 4] = ["a {c} {s} {p} a {o}", "the {c} {s} {p} the {o}", "a {s} {p} the {o}", "the {s} {p} a {o}"];

/// MSCOCO image count and the size of each of its held-out splits.
const COCO_IMAGES: f64 = 123_287.0;
const COCO_HELD_OUT: f64 = 5000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub n_images: usize,
    /// Vocabulary size including the four special tokens.
    pub vocab_size: usize,
    pub captions_per_image: usize,
    pub spatial_rows: usize,
    pub spatial_dim: usize,
    pub word_dim: usize,
    /// Standard deviation of the noise added to spatial prototypes.
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_images: 64,
            vocab_size: 30,
            captions_per_image: 2,
            spatial_rows: 6,
            spatial_dim: 16,
            word_dim: 16,
            noise: 0.1,
        }
    }
}

/// A generated corpus held in memory, `features[i]` belonging to `records[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub records: Vec<ImageRecord>,
    pub features: Vec<FeatureMatrix>,
    pub word_vectors: WordVectorTable,
}

/// Validation and test sizes for `n` images.
pub fn split_sizes(n: usize) -> (usize, usize) {
    if n < 3 {
        return (n.saturating_sub(1), 0);
    }
    let held = ((n as f64 * COCO_HELD_OUT / COCO_IMAGES).round() as usize).max(1);
    let held = held.min((n - 1) / 2);
    (held, held)
}

struct Pools {
    colors: Vec<&'static str>,
    subjects: Vec<&'static str>,
    predicates: Vec<&'static str>,
    objects: Vec<&'static str>,
}

fn pools(vocab_size: usize) -> Result<Pools> {
    let fixed = SPECIALS.len() + FUNCTION_WORDS.len();
    let content = vocab_size.saturating_sub(fixed);
    ensure!(content >= 4, "toy vocabulary needs at least {} tokens, got {vocab_size}", fixed + 4);
    ensure!(content <= 4 * COLORS.len(), "toy vocabulary is limited to {} tokens", fixed + 4 * COLORS.len());
    // Round-robin share: colors, subjects, predicates, objects.
    let share = |k: usize| content / 4 + usize::from(k < content % 4);
    Ok(Pools {
        colors: COLORS[..share(0)].to_vec(),
        subjects: SUBJECTS[..share(1)].to_vec(),
        predicates: PREDICATES[..share(2)].to_vec(),
        objects: OBJECTS[..share(3)].to_vec(),
    })
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate(cfg: &ToyConfig, seed: u64) -> Result<ToyCorpus> {
    ensure!(cfg.n_images >= 2, "toy corpus needs at least 2 images");
    ensure!(cfg.captions_per_image >= 1, "toy.captions_per_image must be positive");
    ensure!(
        cfg.spatial_rows >= 1 && cfg.spatial_dim >= 1 && cfg.word_dim >= 1,
        "toy feature sizes must be positive"
    );
    ensure!(cfg.noise.is_finite() && cfg.noise >= 0.0, "toy.noise must be non-negative");
    let p = pools(cfg.vocab_size)?;
    let scenes_available = p.colors.len() * p.subjects.len() * p.predicates.len() * p.objects.len();
    if cfg.n_images > scenes_available {
        bail!("{} images requested but the vocabulary allows only {scenes_available} scenes", cfg.n_images);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let words: Vec<&str> = FUNCTION_WORDS
        .iter()
        .chain(&p.colors)
        .chain(&p.subjects)
        .chain(&p.predicates)
        .chain(&p.objects)
        .copied()
        .collect();
    let mut word_vectors = WordVectorTable::new(cfg.word_dim);
    let mut prototypes = std::collections::BTreeMap::new();
    for &w in &words {
        // Written at six decimals, so round now to keep memory and disk equal.
        let v = gaussian(&mut rng, cfg.word_dim, 0.5).into_iter().map(|x| format!("{x:.6}").parse().expect("float")).collect();
        word_vectors.insert(w, v)?;
        prototypes.insert(w, gaussian(&mut rng, cfg.spatial_dim, 1.0));
    }

    let mut scenes: Vec<usize> = rand::seq::index::sample(&mut rng, scenes_available, cfg.n_images).into_vec();
    scenes.sort_unstable();
    scenes.shuffle(&mut rng);

    let (n_val, n_test) = split_sizes(cfg.n_images);
    let mut order: Vec<usize> = (0..cfg.n_images).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; cfg.n_images];
    for &i in &order[..n_val] {
        splits[i] = Split::Val;
    }
    for &i in &order[n_val..n_val + n_test] {
        splits[i] = Split::Test;
    }

    let width = (cfg.n_images - 1).to_string().len().max(3);
    let mut records = Vec::with_capacity(cfg.n_images);
    let mut features = Vec::with_capacity(cfg.n_images);
    for (i, &scene) in scenes.iter().enumerate() {
        let (c, rest) = (p.colors[scene % p.colors.len()], scene / p.colors.len());
        let (s, rest) = (p.subjects[rest % p.subjects.len()], rest / p.subjects.len());
        let (pr, rest) = (p.predicates[rest % p.predicates.len()], rest / p.predicates.len());
        let o = p.objects[rest % p.objects.len()];

        let captions = (0..cfg.captions_per_image)
            .map(|k| {
                TEMPLATES[k % TEMPLATES.len()]
                    .replace("{c}", c)
                    .replace("{s}", s)
                    .replace("{p}", pr)
                    .replace("{o}", o)
            })
            .collect();

        let mut triplets = vec![TripletRecord {
            s: s.into(),
            p: pr.into(),
            o: o.into(),
            score: rng.gen_range(0.6..1.0),
        }];
        let distractors = [(o, pr, s), (c, pr, o), (s, pr, c)];
        for &(ds, dp, dob) in distractors.iter().take(rng.gen_range(0..=distractors.len())) {
            triplets.push(TripletRecord {
                s: ds.into(),
                p: dp.into(),
                o: dob.into(),
                score: rng.gen_range(0.05..0.6),
            });
        }

        let scene_words = [s, o, c, pr];
        let mut data = Vec::with_capacity(cfg.spatial_rows * cfg.spatial_dim);
        for r in 0..cfg.spatial_rows {
            let proto = &prototypes[scene_words[r % scene_words.len()]];
            let noise = gaussian(&mut rng, cfg.spatial_dim, cfg.noise);
            data.extend(proto.iter().zip(noise).map(|(a, b)| (a + b) as f32));
        }
        let id = format!("toy{i:0width$}");
        records.push(ImageRecord {
            feature_file: format!("features/{id}.sgaf"),
            id,
            split: splits[i],
            captions,
            triplets,
        });
        features.push(FeatureMatrix {
            rows: cfg.spatial_rows,
            cols: cfg.spatial_dim,
            data,
        });
    }
    Ok(ToyCorpus {
        records,
        features,
        word_vectors,
    })
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const WORD_VECTORS_FILE: &str = "word_vectors.txt";
pub const CONFIG_FILE: &str = "toy.conf";

/// Miniature model settings matching the generated data.
pub fn run_config_text(cfg: &ToyConfig, seed: u64) -> String {
    format!(
        "# Settings for the generated toy corpus.\n\
         seed = {seed}\n\
         features.word_vectors = {WORD_VECTORS_FILE}\n\
         vocab.min_count = 1\n\
         model.d_model = 32\n\
         model.heads = 2\n\
         model.embed_dim = 32\n\
         model.max_len = 12\n\
         phase1.max_epochs = 60\n\
         phase1.patience = 15\n\
         phase1.lr0 = 0.5\n\
         phase1.decay_every = 1000\n\
         phase1.batch = 8\n\
         phase2.epochs = 20\n\
         phase2.patience = 20\n\
         phase2.lr = 0.1\n\
         phase2.batch = 16\n\
         vse.dim = 32\n\
         vse.embed_dim = 32\n\
         vse.epochs = 100\n\
         vse.lr = 0.1\n\
         vse.batch = 32\n\
         toy.images = {}\n\
         toy.vocab_size = {}\n\
         toy.captions_per_image = {}\n\
         toy.spatial_rows = {}\n\
         toy.spatial_dim = {}\n\
         toy.word_dim = {}\n\
         toy.noise = {}\n",
        cfg.n_images, cfg.vocab_size, cfg.captions_per_image, cfg.spatial_rows, cfg.spatial_dim, cfg.word_dim, cfg.noise
    )
}

impl ToyCorpus {
    pub fn dataset(&self, dir: &Path) -> Dataset {
        Dataset {
            dir: dir.to_path_buf(),
            records: self.records.clone(),
        }
    }

    /// Writes the dataset, feature files, word vectors and a matching config.
    pub fn write(&self, dir: &Path, cfg: &ToyConfig, seed: u64) -> Result<()> {
        for (rec, m) in self.records.iter().zip(&self.features) {
            write_sgaf(&dir.join(&rec.feature_file), m)?;
        }
        write_atomic_str(&dir.join(WORD_VECTORS_FILE), &format_word_vectors(&self.word_vectors))?;
        write_atomic_str(&dir.join(DATASET_FILE), &self.dataset(dir).to_jsonl()?)?;
        write_atomic_str(&dir.join(CONFIG_FILE), &run_config_text(cfg, seed))?;
        Ok(())
    }
}
