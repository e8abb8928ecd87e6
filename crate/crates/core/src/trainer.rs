//! Two-phase training: teacher-forced cross-entropy, then self-critical
//! sequence training against a blended language and vision reward.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::decoder::sample_index;
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, Vocabulary, BOS, EOS, PAD, UNK};
use crate::metrics::{cider, corpus_cider, CiderVariant, IdfTable};
use crate::model::{validate_caption, Captioner};
use crate::optim::{accumulate, sgd_step, DEFAULT_CLIP};
use crate::params::{Bound, ParamSet};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vse::{vision_reward, Vse};

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Config {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch: usize,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config {
            max_epochs: 50,
            patience: 5,
            lr0: 5e-4,
            decay_every: 5,
            decay_factor: 0.8,
            batch: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase2Config {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch: usize,
    pub alpha: f64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config {
            epochs: 30,
            patience: 5,
            lr: 2e-5,
            batch: 64,
            alpha: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub clip: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            clip: DEFAULT_CLIP,
            max_len: crate::decoder::DEFAULT_MAX_LEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p1 = &self.phase1;
        let p2 = &self.phase2;
        let counts = [
            ("phase1.max_epochs", p1.max_epochs),
            ("phase1.patience", p1.patience),
            ("phase1.decay_every", p1.decay_every),
            ("phase1.batch", p1.batch),
            ("phase2.epochs", p2.epochs),
            ("phase2.patience", p2.patience),
            ("phase2.batch", p2.batch),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(alloc::format!("{name} must be positive")));
        }
        let rates = [
            ("phase1.lr0", p1.lr0),
            ("phase1.decay_factor", p1.decay_factor),
            ("phase2.lr", p2.lr),
            ("clip", self.clip),
        ];
        if let Some((name, _)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(alloc::format!("{name} must be positive")));
        }
        if !(0.0..=1.0).contains(&p2.alpha) {
            return Err(Error::Config(alloc::format!("alpha {} outside [0, 1]", p2.alpha)));
        }
        Ok(())
    }

    /// Phase-1 learning rate for a zero-based epoch.
    pub fn phase1_lr(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.phase1.decay_every) as i32;
        self.phase1.lr0 * libm::pow(self.phase1.decay_factor, f64::from(steps))
    }
}

/// One image of a split with its encoded captions.
#[derive(Clone, Debug)]
pub struct TrainImage {
    pub id: String,
    pub bundle: FeatureBundle,
    /// `BOS … EOS` token sequences.
    pub captions: Vec<Vec<u32>>,
    /// Captions without sentence markers, for scoring.
    pub refs: Vec<Vec<u32>>,
}

impl TrainImage {
    pub fn new(id: impl Into<String>, bundle: FeatureBundle, captions: Vec<Vec<u32>>) -> Result<Self> {
        for c in &captions {
            validate_caption(c)?;
        }
        let refs = captions.iter().map(|c| Vocabulary::strip_specials(c)).collect();
        Ok(TrainImage {
            id: id.into(),
            bundle,
            captions,
            refs,
        })
    }
}

/// `−Σ_t log p(w_t | w_<t, I)` over a `BOS … EOS` caption.
pub fn xe_loss<S: Real>(tape: &mut Tape<'_, S>, p: &Bound, model: &Captioner, enc: &EncoderOutput, tokens: &[u32]) -> Result<Var> {
    validate_caption(tokens)?;
    let scored = model.decoder.score(tape, p, enc, tokens)?;
    let all = tape.concat(&scored.log_probs, 0)?;
    let total = tape.sum(all)?;
    tape.neg(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub r_l: f64,
    pub r_v: f64,
    pub alpha: f64,
    pub r: f64,
}

impl RewardBreakdown {
    pub fn blend(r_l: f64, r_v: f64, alpha: f64) -> Self {
        RewardBreakdown {
            r_l,
            r_v,
            alpha,
            r: alpha * r_l + (1.0 - alpha) * r_v,
        }
    }
}

/// Frozen reward components: CIDEr-D statistics and, for the multi-modal
/// reward, a trained embedding network with its own vocabulary.
#[derive(Clone, Debug)]
pub struct RewardModel<'a> {
    pub idf: IdfTable<u32>,
    pub alpha: f64,
    pub vse: Option<&'a Vse>,
    /// Captioner token id to VSE token id.
    pub token_map: Vec<u32>,
}

impl<'a> RewardModel<'a> {
    /// Language-only reward (`α = 1`).
    pub fn language(idf: IdfTable<u32>) -> Self {
        RewardModel {
            idf,
            alpha: 1.0,
            vse: None,
            token_map: Vec::new(),
        }
    }

    pub fn multimodal(idf: IdfTable<u32>, alpha: f64, vse: &'a Vse, token_map: Vec<u32>) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(alloc::format!("alpha {alpha} outside [0, 1]")));
        }
        if let Some(&bad) = token_map.iter().find(|&&t| t as usize >= vse.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                op: "token_map",
                index: bad as usize,
                len: vse.config.vocab_size,
            });
        }
        Ok(RewardModel {
            idf,
            alpha,
            vse: Some(vse),
            token_map,
        })
    }

    /// IDF over the reference captions of `images`.
    pub fn idf_from(images: &[TrainImage]) -> Result<IdfTable<u32>> {
        let refs: Vec<Vec<Vec<u32>>> = images.iter().map(|im| im.refs.clone()).collect();
        IdfTable::compute(&refs)
    }

    fn vse_tokens(&self, caption: &[u32]) -> Vec<u32> {
        caption
            .iter()
            .map(|&t| self.token_map.get(t as usize).copied().unwrap_or(UNK))
            .collect()
    }

    /// Vision reward of a marker-free caption. Empty captions score 0.
    pub fn vision(&self, caption: &[u32], spatial: &Tensor) -> Result<f64> {
        let Some(vse) = self.vse else {
            return Ok(0.0);
        };
        if caption.is_empty() {
            return Ok(0.0);
        }
        let w = vse.embed_caption(&self.vse_tokens(caption))?;
        let i = vse.embed_image(spatial)?;
        Ok(vision_reward(&w, &i))
    }

    /// Reward of a generated token sequence (markers are stripped).
    pub fn reward(&self, tokens: &[u32], image: &TrainImage) -> Result<RewardBreakdown> {
        combined_reward(tokens, &image.bundle.spatial, &image.refs, self)
    }
}

/// Maps every captioner id to the VSE id of the same word, or `UNK`.
pub fn token_map(captioner: &Vocabulary, vse: &Vocabulary) -> Vec<u32> {
    (0..captioner.len() as u32)
        .map(|id| match id {
            PAD | BOS | EOS | UNK => id,
            _ => captioner.token(id).map_or(UNK, |w| vse.id(w)),
        })
        .collect()
}

pub fn combined_reward(tokens: &[u32], spatial: &Tensor, refs: &[Vec<u32>], model: &RewardModel<'_>) -> Result<RewardBreakdown> {
    let caption = Vocabulary::strip_specials(tokens);
    let r_l = cider(&caption, refs, &model.idf, CiderVariant::CiderD);
    let r_v = model.vision(&caption, spatial)?;
    Ok(RewardBreakdown::blend(r_l, r_v, model.alpha))
}

/// `−A · Σ_t log p(w_t^s)`.
pub fn scst_loss<S: Real>(tape: &mut Tape<'_, S>, log_probs: &[Var], advantage: f64) -> Result<Var> {
    if log_probs.is_empty() {
        return Err(Error::Empty("scst_loss"));
    }
    let all = tape.concat(log_probs, 0)?;
    let total = tape.sum(all)?;
    tape.scale(total, -advantage)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScstStats {
    pub mean_advantage: f64,
    pub mean_sample_reward: f64,
    pub mean_greedy_reward: f64,
    pub grad_norm: f64,
}

/// Gradient of the batch-mean SCST loss, without applying it.
pub fn scst_gradients<R: Rng + ?Sized>(
    model: &Captioner,
    batch: &[&TrainImage],
    reward: &RewardModel<'_>,
    max_len: usize,
    rng: &mut R,
) -> Result<(Vec<Tensor>, ScstStats)> {
    if batch.is_empty() {
        return Err(Error::Empty("scst batch"));
    }
    let mut grads: Vec<Tensor> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
    let mut stats = ScstStats::default();
    let n = batch.len() as f64;
    for image in batch {
        let greedy = model.generate_greedy(&image.bundle, max_len)?;
        let baseline = reward.reward(&greedy, image)?.r;

        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let enc = model.encode(&mut tape, &p, &image.bundle)?;
        let sample = model
            .decoder
            .rollout(&mut tape, &p, &enc, max_len, |probs| sample_index(probs, &mut *rng))?;
        let r_s = reward.reward(&sample.tokens, image)?.r;
        let advantage = r_s - baseline;
        stats.mean_advantage += advantage / n;
        stats.mean_sample_reward += r_s / n;
        stats.mean_greedy_reward += baseline / n;
        if advantage != 0.0 {
            let loss = scst_loss(&mut tape, &sample.log_probs, advantage / n)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::NonFinite("scst loss"));
            }
            tape.backward(loss)?;
            accumulate(&mut grads, &p.grads(&tape));
        }
    }
    Ok((grads, stats))
}

/// One self-critical update: sample and greedy rollouts per image, advantage
/// against the greedy reward, then a clipped descent step.
pub fn scst_step<R: Rng + ?Sized>(
    model: &mut Captioner,
    batch: &[&TrainImage],
    reward: &RewardModel<'_>,
    lr: f64,
    clip: f64,
    max_len: usize,
    rng: &mut R,
) -> Result<ScstStats> {
    let (grads, mut stats) = scst_gradients(model, batch, reward, max_len, rng)?;
    stats.grad_norm = sgd_step(&mut model.params, &grads, lr, clip)?;
    Ok(stats)
}

/// Mean combined reward of greedy decodes.
pub fn mean_greedy_reward(model: &Captioner, images: &[TrainImage], reward: &RewardModel<'_>, max_len: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("mean_greedy_reward"));
    }
    let mut total = 0.0;
    for im in images {
        let caption = model.generate_greedy(&im.bundle, max_len)?;
        total += reward.reward(&caption, im)?.r;
    }
    Ok(total / images.len() as f64)
}

/// Corpus CIDEr of greedy decodes, IDF taken from the split's own references.
pub fn validation_cider(model: &Captioner, images: &[TrainImage], max_len: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let idf = RewardModel::idf_from(images)?;
    let mut cands = Vec::with_capacity(images.len());
    let mut refs = Vec::with_capacity(images.len());
    for im in images {
        cands.push(Vocabulary::strip_specials(&model.generate_greedy(&im.bundle, max_len)?));
        refs.push(im.refs.clone());
    }
    Ok(corpus_cider(&cands, &refs, &idf, CiderVariant::Cider))
}

/// Patience-based stopping on a score to maximize.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    /// The score ties or beats the best so far; the caller keeps these params.
    pub keep: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Only a strict improvement resets the patience counter.
    pub fn observe(&mut self, epoch: usize, score: f64) -> Observation {
        let keep = score >= self.best;
        if score > self.best {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if keep {
            self.best = score;
            self.best_epoch = Some(epoch);
        }
        Observation {
            keep,
            stop: self.stale >= self.patience,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-caption cross-entropy (phase 1).
    pub loss: Option<f64>,
    /// Mean sampled combined reward (phase 2).
    pub mean_reward: Option<f64>,
    pub val_cider: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_cider: f64,
}

fn diverged(model: &mut Captioner, last_good: &ParamSet, epoch: usize, detail: String) -> Error {
    model.params = last_good.clone();
    log::error!("epoch {epoch}: {detail}; restored last good parameters");
    Error::Diverged { epoch, detail }
}

fn xe_batch_gradients(model: &Captioner, batch: &[(&TrainImage, &[u32])]) -> Result<(f64, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
    let mut total = 0.0;
    let n = batch.len() as f64;
    for (image, caption) in batch {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let enc = model.encode(&mut tape, &p, &image.bundle)?;
        let loss = xe_loss(&mut tape, &p, model, &enc, caption)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("xe loss"));
        }
        total += value;
        let scaled = tape.scale(loss, 1.0 / n)?;
        tape.backward(scaled)?;
        accumulate(&mut grads, &p.grads(&tape));
    }
    Ok((total, grads))
}

/// Phase 1. Every (image, caption) pair is one example. On return the model
/// holds the parameters of the best validation epoch.
pub fn train_xe<R: Rng + ?Sized>(
    model: &mut Captioner,
    train: &[TrainImage],
    val: &[TrainImage],
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    let examples: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.captions.len()).map(move |c| (i, c)))
        .collect();
    if examples.is_empty() {
        return Err(Error::Empty("train split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.phase1.patience);
    let mut best = model.params.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_cider: f64::NEG_INFINITY,
    };
    for epoch in 0..cfg.phase1.max_epochs {
        let lr = cfg.phase1_lr(epoch);
        let last_good = model.params.clone();
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.phase1.batch) {
            let batch: Vec<(&TrainImage, &[u32])> = chunk
                .iter()
                .map(|&k| {
                    let (i, c) = examples[k];
                    (&train[i], train[i].captions[c].as_slice())
                })
                .collect();
            let (loss, grads) = match xe_batch_gradients(model, &batch) {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => return Err(diverged(model, &last_good, epoch, what.into())),
                Err(e) => return Err(e),
            };
            total += loss;
            if let Err(Error::NonFinite(what)) = sgd_step(&mut model.params, &grads, lr, cfg.clip) {
                return Err(diverged(model, &last_good, epoch, what.into()));
            }
        }
        let loss = total / examples.len() as f64;
        let val_cider = validation_cider(model, val, cfg.max_len)?;
        let entry = EpochLog {
            epoch,
            loss: Some(loss),
            mean_reward: None,
            val_cider,
            lr,
        };
        log::info!("xe epoch {epoch}: loss {loss:.6} val CIDEr {val_cider:.4} lr {lr:.3e}");
        on_epoch(&entry);
        report.epochs.push(entry);
        let obs = stopper.observe(epoch, val_cider);
        if obs.keep {
            best = model.params.clone();
        }
        if obs.stop {
            log::info!("xe: no improvement for {} epochs, stopping", cfg.phase1.patience);
            break;
        }
    }
    model.params = best;
    report.best_epoch = stopper.best_epoch;
    report.best_val_cider = stopper.best;
    Ok(report)
}

/// Phase 2. Rewards come from the frozen `reward` model.
pub fn train_scst<R: Rng + ?Sized>(
    model: &mut Captioner,
    train: &[TrainImage],
    val: &[TrainImage],
    reward: &RewardModel<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("train split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let lr = cfg.phase2.lr;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.phase2.patience);
    let mut best = model.params.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_cider: f64::NEG_INFINITY,
    };
    for epoch in 0..cfg.phase2.epochs {
        let last_good = model.params.clone();
        order.shuffle(rng);
        let mut reward_sum = 0.0;
        for chunk in order.chunks(cfg.phase2.batch) {
            let batch: Vec<&TrainImage> = chunk.iter().map(|&i| &train[i]).collect();
            match scst_step(model, &batch, reward, lr, cfg.clip, cfg.max_len, rng) {
                Ok(stats) => reward_sum += stats.mean_sample_reward * batch.len() as f64,
                Err(Error::NonFinite(what)) => return Err(diverged(model, &last_good, epoch, what.into())),
                Err(e) => return Err(e),
            }
        }
        let mean_reward = reward_sum / train.len() as f64;
        let val_cider = validation_cider(model, val, cfg.max_len)?;
        let entry = EpochLog {
            epoch,
            loss: None,
            mean_reward: Some(mean_reward),
            val_cider,
            lr,
        };
        log::info!("scst epoch {epoch}: reward {mean_reward:.4} val CIDEr {val_cider:.4}");
        on_epoch(&entry);
        report.epochs.push(entry);
        let obs = stopper.observe(epoch, val_cider);
        if obs.keep {
            best = model.params.clone();
        }
        if obs.stop {
            log::info!("scst: no improvement for {} epochs, stopping", cfg.phase2.patience);
            break;
        }
    }
    model.params = best;
    report.best_epoch = stopper.best_epoch;
    report.best_val_cider = stopper.best;
    Ok(report)
}

/// Closed-form gradient of the SCST loss at one step's logits,
/// `A · (p − onehot(target))`.
pub fn logit_gradient_identity(probs: &[f64], target: usize, advantage: f64) -> Vec<f64> {
    let mut g = vec![0.0; probs.len()];
    for (k, (gk, &pk)) in g.iter_mut().zip(probs).enumerate() {
        let onehot = if k == target { 1.0 } else { 0.0 };
        *gk = advantage * (pk - onehot);
    }
    g
}
