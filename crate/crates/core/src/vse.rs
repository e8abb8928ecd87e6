//! Visual-semantic embedding network used as the vision half of the reward.
//!
//! Images are mean-pooled spatial features followed by a linear map.
//! Captions run through their own embedding table and LSTM; the final
//! hidden state is projected into the shared space.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear, Lstm, LstmState};
use crate::optim::sgd_step;
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct VseConfig {
    pub vocab_size: usize,
    pub spatial_dim: usize,
    pub embed_dim: usize,
    /// Width of the shared space and of the caption LSTM.
    pub dim: usize,
}

impl Default for VseConfig {
    fn default() -> Self {
        VseConfig {
            vocab_size: 0,
            spatial_dim: 2048,
            embed_dim: 512,
            dim: 512,
        }
    }
}

impl VseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.spatial_dim == 0 || self.embed_dim == 0 || self.dim == 0 {
            return Err(Error::Config("vse dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Vse {
    pub config: VseConfig,
    pub params: ParamSet,
    pub image_proj: Linear,
    pub embed: Embedding,
    pub lstm: Lstm,
    pub text_proj: Linear,
}

impl Vse {
    pub fn new<R: Rng + ?Sized>(config: VseConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = ParamBuilder::new(&mut params, rng);
        let (image_proj, embed, lstm, text_proj) = b.scoped("vse", |b| {
            (
                Linear::new(b, "image_proj", config.spatial_dim, config.dim, true),
                Embedding::new(b, "embed", config.vocab_size, config.embed_dim),
                Lstm::new(b, "lstm", config.embed_dim, config.dim),
                Linear::new(b, "text_proj", config.dim, config.dim, true),
            )
        });
        lstm.init_forget_bias(&mut params);
        Ok(Vse {
            config,
            params,
            image_proj,
            embed,
            lstm,
            text_proj,
        })
    }

    /// `1 × dim` image embedding from an `N_s × D_s` feature map on the tape.
    pub fn image_var<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, spatial: Var) -> Result<Var> {
        if tape.shape(spatial).len() != 2 || tape.shape(spatial)[1] != self.config.spatial_dim {
            return Err(Error::shape("embed_image", tape.shape(spatial), &[self.config.spatial_dim]));
        }
        let pooled = tape.mean_rows(spatial)?;
        self.image_proj.forward(tape, p, pooled)
    }

    /// `1 × dim` caption embedding: last LSTM hidden state, projected.
    pub fn caption_var<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("embed_caption"));
        }
        let mut state = LstmState::zeros(tape, self.config.dim);
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::IndexOutOfRange {
                    op: "embed_caption",
                    index: t as usize,
                    len: self.config.vocab_size,
                });
            }
            let x = self.embed.lookup(tape, p, t as usize)?;
            state = self.lstm.step(tape, p, state, x)?;
        }
        self.text_proj.forward(tape, p, state.h)
    }

    pub fn embed_image(&self, spatial: &Tensor) -> Result<Vec<f64>> {
        if spatial.rows() == 0 {
            return Err(Error::Empty("embed_image"));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.leaf_ref(spatial, false);
        let v = self.image_var(&mut tape, &p, x)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn embed_caption(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let v = self.caption_var(&mut tape, &p, tokens)?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// Bidirectional hinge ranking loss over a batch with every other member as
/// a negative. `images` and `captions` are `B × dim`, row `k` of each being
/// a matched pair.
pub fn hinge_loss<S: Real>(tape: &mut Tape<'_, S>, images: Var, captions: Var, margin: f64) -> Result<Var> {
    let b = tape.shape(images)[0];
    if tape.shape(images) != tape.shape(captions) {
        return Err(Error::shape("hinge_loss", tape.shape(images), tape.shape(captions)));
    }
    if b < 2 {
        return Err(Error::dim("hinge_loss", alloc::format!("batch of {b}, need at least 2")));
    }
    // s[i][j] = I_i · w_j
    let wt = tape.transpose(captions)?;
    let s = tape.matmul(images, wt)?;
    let eye = tape.constant(Tensor::identity(b));
    let ones = tape.constant(Tensor::full(vec![b, b], S::one()));
    let off = tape.constant(Tensor::from_parts(
        vec![b, b],
        (0..b * b).map(|k| if k / b == k % b { S::zero() } else { S::one() }).collect(),
    ));
    let beta = tape.constant(Tensor::full(vec![b, b], S::from_f64(margin)));
    let diag = tape.mul(s, eye)?;
    // Row i holds s[i][i] everywhere; column j holds s[j][j] everywhere.
    let row_pos = tape.matmul(diag, ones)?;
    let col_pos = tape.matmul(ones, diag)?;

    let mut total = None;
    for pos in [row_pos, col_pos] {
        let m = tape.sub(s, pos)?;
        let m = tape.add(m, beta)?;
        let m = tape.relu(m)?;
        let m = tape.mul(m, off)?;
        let part = tape.sum(m)?;
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    Ok(total.expect("two terms"))
}

/// Cosine similarity; zero-norm input yields 0.
pub fn vision_reward(caption: &[f64], image: &[f64]) -> f64 {
    let dot: f64 = caption.iter().zip(image).map(|(a, b)| a * b).sum();
    let na = libm::sqrt(caption.iter().map(|a| a * a).sum());
    let nb = libm::sqrt(image.iter().map(|b| b * b).sum());
    if na == 0.0 || nb == 0.0 {
        log::warn!("vision_reward: zero-norm embedding, reward set to 0");
        return 0.0;
    }
    dot / (na * nb)
}

/// One image-caption training pair. `tokens` are VSE vocabulary ids
/// without sentence markers.
#[derive(Clone, Debug, PartialEq)]
pub struct VsePair {
    pub spatial: Tensor,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub margin: f64,
    pub clip: f64,
}

impl Default for VseTrainConfig {
    fn default() -> Self {
        VseTrainConfig {
            epochs: 30,
            lr: 0.01,
            batch: 128,
            margin: DEFAULT_MARGIN,
            clip: crate::optim::DEFAULT_CLIP,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VseEpoch {
    pub epoch: usize,
    /// Sum of batch losses over the epoch, measured before each update.
    pub loss: f64,
}

/// Loss and parameter gradients of one batch.
pub fn batch_loss(vse: &Vse, batch: &[&VsePair], margin: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = vse.params.bind(&mut tape, true);
    let mut imgs = Vec::with_capacity(batch.len());
    let mut caps = Vec::with_capacity(batch.len());
    for pair in batch {
        let x = tape.leaf_ref(&pair.spatial, false);
        imgs.push(vse.image_var(&mut tape, &p, x)?);
        caps.push(vse.caption_var(&mut tape, &p, &pair.tokens)?);
    }
    let i = tape.concat(&imgs, 0)?;
    let w = tape.concat(&caps, 0)?;
    let loss = hinge_loss(&mut tape, i, w, margin)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], p.grads(&tape)))
}

/// Gradient descent on the hinge loss over shuffled batches.
pub fn train_vse<R: Rng + ?Sized>(vse: &mut Vse, pairs: &[VsePair], cfg: &VseTrainConfig, rng: &mut R) -> Result<Vec<VseEpoch>> {
    if pairs.len() < 2 {
        return Err(Error::Empty("train_vse needs at least two pairs"));
    }
    if cfg.batch < 2 {
        return Err(Error::Config("vse batch must be at least 2".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        // A trailing singleton has no negatives; fold it into the previous batch.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
            let n = batches.len();
            batches[n - 1] = &order[(n - 1) * cfg.batch..];
        }
        let mut total = 0.0;
        for idx in batches {
            let batch: Vec<&VsePair> = idx.iter().map(|&i| &pairs[i]).collect();
            let (loss, grads) = batch_loss(vse, &batch, cfg.margin)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: alloc::format!("vse hinge loss {loss}"),
                });
            }
            total += loss;
            sgd_step(&mut vse.params, &grads, cfg.lr, cfg.clip)?;
        }
        log::debug!("vse epoch {epoch}: loss {total:.6}");
        log.push(VseEpoch { epoch, loss: total });
    }
    Ok(log)
}

/// Fraction of pairs whose matched cosine beats the cosine with every
/// other caption in `pairs`.
pub fn ranking_accuracy(vse: &Vse, pairs: &[VsePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("ranking_accuracy"));
    }
    let imgs = pairs.iter().map(|p| vse.embed_image(&p.spatial)).collect::<Result<Vec<_>>>()?;
    let caps = pairs.iter().map(|p| vse.embed_caption(&p.tokens)).collect::<Result<Vec<_>>>()?;
    let mut good = 0usize;
    for (i, img) in imgs.iter().enumerate() {
        let pos = vision_reward(&caps[i], img);
        if caps.iter().enumerate().all(|(j, c)| j == i || vision_reward(c, img) < pos) {
            good += 1;
        }
    }
    Ok(good as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hinge_value(i: Vec<f64>, w: Vec<f64>, b: usize, margin: f64) -> f64 {
        let d = i.len() / b;
        let mut tape = Tape::new();
        let iv = tape.constant(Tensor::matrix(b, d, i).unwrap());
        let wv = tape.constant(Tensor::matrix(b, d, w).unwrap());
        let l = hinge_loss(&mut tape, iv, wv, margin).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn satisfied_margins_give_zero() {
        let id = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(hinge_value(id.clone(), id, 2, 0.1), 0.0);
    }

    #[test]
    fn identical_embeddings_give_full_margin() {
        let b = 4;
        let v = vec![0.3; b * 3];
        let l = hinge_value(v.clone(), v, b, 0.2);
        assert!((l - 2.0 * (b * (b - 1)) as f64 * 0.2).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        assert!(hinge_loss(&mut tape, v, v, 0.2).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((vision_reward(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(vision_reward(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((vision_reward(&[1.0, -2.0], &[-1.0, 2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(vision_reward(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        let a = vision_reward(&[0.3, -1.1, 2.0], &[1.4, 0.2, 0.7]);
        let b = vision_reward(&[0.9, -3.3, 6.0], &[0.7, 0.1, 0.35]);
        assert!((a - b).abs() < 1e-12);
    }
}
