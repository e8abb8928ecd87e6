//! The captioning model: encoder and decoder over one parameter set.

use alloc::vec::Vec;

use rand::Rng;

use crate::decoder::{argmax, sample_index, Decoder, DEFAULT_MAX_LEN};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, BOS, MAX_TRIPLETS, WORD_DIM};
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::scalar::Real;
use crate::tape::Tape;

/// Architecture sizes. Defaults follow the reference setup: 512-wide model,
/// 8 heads, 300-d word vectors and 20 triplets per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub spatial_dim: usize,
    pub word_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub max_triplets: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            spatial_dim: 2048,
            word_dim: WORD_DIM,
            d_model: 512,
            heads: 8,
            embed_dim: 512,
            max_triplets: MAX_TRIPLETS,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("spatial_dim", self.spatial_dim),
            ("word_dim", self.word_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("embed_dim", self.embed_dim),
            ("max_triplets", self.max_triplets),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(alloc::format!("{name} must be positive")));
        }
        if self.vocab_size <= crate::features::UNK as usize {
            return Err(Error::Config("vocabulary has no words".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(alloc::format!(
                "d_model {} not divisible by {} heads",
                self.d_model,
                self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Captioner {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = ParamBuilder::new(&mut params, rng);
        let encoder = Encoder::new(&mut b, config.spatial_dim, config.word_dim, config.d_model, config.heads)?;
        let decoder = Decoder::new(&mut b, config.vocab_size, config.embed_dim, config.d_model, config.heads)?;
        decoder.lstm.init_forget_bias(&mut params);
        Ok(Captioner {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn check_bundle(&self, bundle: &FeatureBundle) -> Result<()> {
        let c = &self.config;
        if bundle.spatial.cols() != c.spatial_dim {
            return Err(Error::shape("features", bundle.spatial.shape(), &[c.spatial_dim]));
        }
        if bundle.relationships.cols() != c.word_dim {
            return Err(Error::shape("features", bundle.relationships.shape(), &[c.word_dim]));
        }
        Ok(())
    }

    pub fn encode<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, bundle: &FeatureBundle) -> Result<EncoderOutput> {
        self.check_bundle(bundle)?;
        self.encoder.encode(tape, p, bundle)
    }

    /// Log-probability of each next token of `tokens` (which starts with
    /// `BOS`) under teacher forcing.
    pub fn score_sequence(&self, bundle: &FeatureBundle, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &p, bundle)?;
        let scored = self.decoder.score(&mut tape, &p, &enc, tokens)?;
        Ok(scored.log_probs.iter().map(|&v| tape.value(v).data()[0]).collect())
    }

    /// Teacher-forced log-probabilities of a ground-truth `BOS … EOS` caption.
    pub fn teacher_forced_logprobs(&self, bundle: &FeatureBundle, tokens: &[u32]) -> Result<Vec<f64>> {
        validate_caption(tokens)?;
        self.score_sequence(bundle, tokens)
    }

    /// Argmax decoding, at most `max_len` tokens after `BOS`.
    pub fn generate_greedy(&self, bundle: &FeatureBundle, max_len: usize) -> Result<Vec<u32>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &p, bundle)?;
        Ok(self.decoder.rollout(&mut tape, &p, &enc, max_len, argmax)?.tokens)
    }

    /// Multinomial sampling; returns tokens and their log-probabilities.
    pub fn sample_sequence<R: Rng + ?Sized>(&self, bundle: &FeatureBundle, max_len: usize, rng: &mut R) -> Result<(Vec<u32>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let enc = self.encode(&mut tape, &p, bundle)?;
        let r = self.decoder.rollout(&mut tape, &p, &enc, max_len, |probs| sample_index(probs, rng))?;
        let lps = r.log_probs.iter().map(|&v| tape.value(v).data()[0]).collect();
        Ok((r.tokens, lps))
    }
}

/// A caption token sequence must be `BOS … EOS` with at least one target.
pub fn validate_caption(tokens: &[u32]) -> Result<()> {
    if tokens.len() < 2 || tokens[0] != BOS || *tokens.last().expect("len") != crate::features::EOS {
        return Err(Error::Contract("caption must start with BOS and end with EOS".into()));
    }
    Ok(())
}
