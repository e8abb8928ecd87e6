//! Stepwise LSTM decoder with dual attention-on-attention readout.

use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{Aoa, MultiHead};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::features::{BOS, EOS};
use crate::nn::{Embedding, Linear, Lstm, LstmState};
use crate::params::{Bound, ParamBuilder};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_LEN: usize = 20;

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Embedding,
    pub lstm: Lstm,
    pub spatial_attn: MultiHead,
    pub spatial_aoa: Aoa,
    pub rel_attn: MultiHead,
    pub rel_aoa: Aoa,
    pub init_h: Linear,
    pub init_m: Linear,
    /// Bias-free `vocab × 2·d_model` output map.
    pub logits: Linear,
    pub d_model: usize,
    pub vocab: usize,
}

/// Recurrent state carried between steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub lstm: LstmState,
    /// Previous context vector `c_{t-1}`, `1 × 2·d_model`; zero at `t = 0`.
    pub c_prev: Var,
    pub t: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// Unnormalized scores `W_p c_t`, `1 × vocab`.
    pub logits: Var,
    pub log_probs: Var,
    pub context: Var,
    pub state: DecoderState,
}

impl StepOutput {
    pub fn probs<S: Real>(&self, tape: &Tape<'_, S>) -> Vec<f64> {
        tape.value(self.log_probs).data().iter().map(|&l| l.exp().to_f64()).collect()
    }
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        b: &mut ParamBuilder<'_, R>,
        vocab: usize,
        embed_dim: usize,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        let visual = 2 * d_model;
        b.scoped("decoder", |b| {
            Ok(Decoder {
                embed: Embedding::new(b, "embed", vocab, embed_dim),
                lstm: Lstm::new(b, "lstm", embed_dim + visual, d_model),
                spatial_attn: MultiHead::new(b, "spatial_attn", d_model, heads)?,
                spatial_aoa: Aoa::new(b, "spatial_aoa", d_model),
                rel_attn: MultiHead::new(b, "rel_attn", d_model, heads)?,
                rel_aoa: Aoa::new(b, "rel_aoa", d_model),
                init_h: Linear::new(b, "init_h", visual, d_model, true),
                init_m: Linear::new(b, "init_m", visual, d_model, true),
                logits: Linear::new(b, "logits", visual, vocab, false),
                d_model,
                vocab,
            })
        })
    }

    /// `h₀ = tanh(W_h ā + b_h)`, `m₀ = tanh(W_m ā + b_m)`, `c_prev = 0`.
    pub fn init_state<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, a_bar: Var) -> Result<DecoderState> {
        if tape.shape(a_bar) != [1, 2 * self.d_model] {
            return Err(Error::shape("init_state", tape.shape(a_bar), &[1, 2 * self.d_model]));
        }
        let h = self.init_h.forward(tape, p, a_bar)?;
        let h = tape.tanh(h)?;
        let m = self.init_m.forward(tape, p, a_bar)?;
        let m = tape.tanh(m)?;
        let c_prev = tape.constant(Tensor::zeros(alloc::vec![1, 2 * self.d_model]));
        Ok(DecoderState {
            lstm: LstmState { h, m },
            c_prev,
            t: 0,
        })
    }

    pub fn step<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, state: DecoderState, token: u32, enc: &EncoderOutput) -> Result<StepOutput> {
        if token as usize >= self.vocab {
            return Err(Error::IndexOutOfRange {
                op: "decode_step",
                index: token as usize,
                len: self.vocab,
            });
        }
        let word = self.embed.lookup(tape, p, token as usize)?;
        let visual = tape.add(enc.a_bar, state.c_prev)?;
        let input = tape.concat(&[word, visual], 1)?;
        let lstm = self.lstm.step(tape, p, state.lstm, input)?;
        let h = lstm.h;

        let v_spatial = self.spatial_attn.forward(tape, p, h, enc.spatial, enc.spatial)?;
        let o_spatial = self.spatial_aoa.forward(tape, p, h, v_spatial)?;
        let v_rel = match enc.rel_valid {
            Some(rel) => self.rel_attn.forward(tape, p, h, rel, rel)?,
            None => tape.constant(Tensor::zeros(alloc::vec![1, self.d_model])),
        };
        let o_rel = self.rel_aoa.forward(tape, p, h, v_rel)?;
        let context = tape.concat(&[o_spatial, o_rel], 1)?;
        let logits = self.logits.forward(tape, p, context)?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(StepOutput {
            logits,
            log_probs,
            context,
            state: DecoderState {
                lstm,
                c_prev: context,
                t: state.t + 1,
            },
        })
    }

    /// Feeds `tokens[..n-1]` and returns the step outputs together with the
    /// log-probability of each next token `tokens[1..]`.
    pub fn score<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, enc: &EncoderOutput, tokens: &[u32]) -> Result<Scored> {
        if tokens.len() < 2 || tokens[0] != BOS {
            return Err(Error::Contract("scored sequence must start with BOS and have a target".into()));
        }
        let mut state = self.init_state(tape, p, enc.a_bar)?;
        let mut steps = Vec::with_capacity(tokens.len() - 1);
        let mut log_probs = Vec::with_capacity(tokens.len() - 1);
        for w in tokens.windows(2) {
            let out = self.step(tape, p, state, w[0], enc)?;
            if w[1] as usize >= self.vocab {
                return Err(Error::IndexOutOfRange {
                    op: "score",
                    index: w[1] as usize,
                    len: self.vocab,
                });
            }
            log_probs.push(tape.pick(out.log_probs, w[1] as usize)?);
            state = out.state;
            steps.push(out);
        }
        Ok(Scored { steps, log_probs })
    }

    /// Generates up to `max_len` tokens after `BOS`, choosing each with
    /// `choose` from the step's probabilities. Stops after `EOS`.
    pub fn rollout<S: Real>(
        &self,
        tape: &mut Tape<'_, S>,
        p: &Bound,
        enc: &EncoderOutput,
        max_len: usize,
        mut choose: impl FnMut(&[f64]) -> u32,
    ) -> Result<Rollout> {
        let mut state = self.init_state(tape, p, enc.a_bar)?;
        let mut token = BOS;
        let mut out = Rollout::default();
        for _ in 0..max_len {
            let step = self.step(tape, p, state, token, enc)?;
            token = choose(&step.probs(tape));
            out.log_probs.push(tape.pick(step.log_probs, token as usize)?);
            out.tokens.push(token);
            out.steps.push(step);
            state = step.state;
            if token == EOS {
                break;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Scored {
    pub steps: Vec<StepOutput>,
    /// Scalar log-probabilities of each target token.
    pub log_probs: Vec<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct Rollout {
    /// Emitted tokens, excluding the leading `BOS`; ends with `EOS` when one was emitted.
    pub tokens: Vec<u32>,
    pub log_probs: Vec<Var>,
    pub steps: Vec<StepOutput>,
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as u32
}

/// Inverse-CDF draw from `probs` using one uniform variate.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // Rounding left u above the final cumulative sum.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}
