//! Finite-difference audit of every differentiable block at miniature sizes.
//!
//! Vector-valued blocks are reduced to a scalar with fixed random weights,
//! `f = Σ w ⊙ out`, so that no coordinate has a structurally zero gradient.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{scaled_dot_attention, Aoa, MultiHead};
use crate::encoder::{EncoderOutput, RefinePath};
use crate::error::Result;
use crate::features::{BOS, EOS};
use crate::gradcheck::{grad_check_precise, ScalarFn, DEFAULT_STEP};
use crate::model::{Captioner, ModelConfig};
use crate::nn::{Lstm, LstmState};
use crate::params::{Bound, ParamBuilder, ParamSet};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::xe_loss;
use crate::vse::hinge_loss;

pub const TOLERANCE: f64 = 1e-5;

pub const BLOCKS: [&str; 10] = [
    "softmax",
    "layer_norm",
    "lstm_step",
    "scaled_dot_attention",
    "multi_head_attention",
    "aoa_block",
    "refine",
    "decode_step",
    "xe_loss",
    "hinge_loss",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub block: &'static str,
    pub seeds: Vec<u64>,
    pub max_error: f64,
    pub worst: BlockResult,
}

/// Worst coordinate of one block on one seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockResult {
    pub error: f64,
    /// Parameter name, or `input k` for a non-parameter input.
    pub location: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl AuditEntry {
    pub fn passed(&self) -> bool {
        self.max_error <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(AuditEntry::passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_error).fold(0.0, f64::max)
    }
}

/// Audits every block on seeds `seed`, `seed + 1` and `seed + 2`.
pub fn grad_audit(seed: u64) -> Result<AuditReport> {
    let seeds: Vec<u64> = (0..3).map(|k| seed.wrapping_add(k)).collect();
    let mut entries = Vec::with_capacity(BLOCKS.len());
    for block in BLOCKS {
        let mut worst = BlockResult::default();
        for &s in &seeds {
            let r = audit_block(block, s)?;
            if r.error >= worst.error {
                worst = r;
            }
        }
        log::info!("grad audit {block}: max relative error {:.3e} at {}", worst.error, worst.location);
        entries.push(AuditEntry {
            block,
            seeds: seeds.clone(),
            max_error: worst.error,
            worst,
        });
    }
    Ok(AuditReport { entries })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn weighted<S: Real>(tape: &mut Tape<'_, S>, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.cast());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// One audited block with its fixed reduction weights. Inputs are the
/// block's parameters (in manifest order) followed by its data inputs.
enum Probe {
    Softmax { w: Tensor },
    LayerNorm { w: Tensor },
    LstmStep { cell: Lstm, wh: Tensor, wm: Tensor },
    ScaledDot { w: Tensor },
    MultiHead { mha: MultiHead, w: Tensor },
    Aoa { aoa: Aoa, w: Tensor },
    Refine { path: RefinePath, w: Tensor },
    DecodeStep { model: Captioner, offset: usize, w: Tensor },
    XeLoss { model: Captioner },
    Hinge,
}

struct Bench {
    probe: Probe,
    params: ParamSet,
}

impl ScalarFn for Bench {
    fn eval<S: Real>(&self, t: &mut Tape<'_, S>, vars: &[Var]) -> Result<Var> {
        let n = self.params.len();
        let p = Bound::from_vars(vars[..n].to_vec());
        let x = &vars[n..];
        match &self.probe {
            Probe::Softmax { w } => {
                let s = t.softmax(x[0], 1)?;
                weighted(t, s, w)
            }
            Probe::LayerNorm { w } => {
                let y = t.layer_norm(x[0], x[1], x[2], 1e-5)?;
                weighted(t, y, w)
            }
            Probe::LstmStep { cell, wh, wm } => {
                let s = cell.step(t, &p, LstmState { h: x[1], m: x[2] }, x[0])?;
                let a = weighted(t, s.h, wh)?;
                let b = weighted(t, s.m, wm)?;
                t.add(a, b)
            }
            Probe::ScaledDot { w } => {
                let o = scaled_dot_attention(t, x[0], x[1], x[2])?;
                weighted(t, o, w)
            }
            Probe::MultiHead { mha, w } => {
                let o = mha.forward(t, &p, x[0], x[1], x[2])?;
                weighted(t, o, w)
            }
            Probe::Aoa { aoa, w } => {
                let o = aoa.forward(t, &p, x[0], x[1])?;
                weighted(t, o, w)
            }
            Probe::Refine { path, w } => {
                let o = path.refine(t, &p, x[0])?;
                weighted(t, o, w)
            }
            Probe::DecodeStep { model, offset, w } => {
                let enc = EncoderOutput {
                    spatial: x[0],
                    relationships: x[1],
                    rel_valid: Some(x[1]),
                    rel_mask: alloc::vec![true; 2],
                    a_bar: x[2],
                };
                let p = shifted(&p, *offset);
                let s0 = model.decoder.init_state(t, &p, enc.a_bar)?;
                let o1 = model.decoder.step(t, &p, s0, BOS, &enc)?;
                let o2 = model.decoder.step(t, &p, o1.state, 4, &enc)?;
                weighted(t, o2.logits, w)
            }
            Probe::XeLoss { model } => {
                let enc = model.encoder.encode_vars(t, &p, x[0], x[1], &XE_MASK)?;
                xe_loss(t, &p, model, &enc, &[BOS, 4, EOS])
            }
            Probe::Hinge => hinge_loss(t, x[0], x[1], 0.5),
        }
    }
}

const XE_MASK: [bool; 3] = [true, false, true];

/// Runs the double-double gradient check on `probe` and names the worst coordinate.
fn check(probe: Probe, params: ParamSet, extra: Vec<Tensor>, step: f64) -> Result<BlockResult> {
    let n = params.len();
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    inputs.extend(extra);
    let bench = Bench { probe, params };
    let w = grad_check_precise(&bench, &inputs, step)?;
    let location = match bench.params.ids().nth(w.input) {
        Some(id) => String::from(bench.params.name(id)),
        None => alloc::format!("input {}", w.input - n),
    };
    Ok(BlockResult {
        error: w.error,
        location,
        index: w.index,
        analytic: w.analytic,
        numeric: w.numeric,
    })
}

/// Worst relative error of one named block on one seed.
pub fn audit_block(block: &str, seed: u64) -> Result<BlockResult> {
    audit_block_at(block, seed, DEFAULT_STEP)
}

/// [`audit_block`] with an explicit finite-difference step.
pub fn audit_block_at(block: &str, seed: u64, step: f64) -> Result<BlockResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let none = ParamSet::new;
    match block {
        "softmax" => {
            let x = random(&mut rng, &[3, 5], 2.0);
            let w = random(&mut rng, &[3, 5], 1.0);
            check(Probe::Softmax { w }, none(), alloc::vec![x], step)
        }
        "layer_norm" => {
            let x = random(&mut rng, &[3, 8], 2.0);
            let gain = random(&mut rng, &[8], 1.5);
            let bias = random(&mut rng, &[8], 0.5);
            let w = random(&mut rng, &[3, 8], 1.0);
            check(Probe::LayerNorm { w }, none(), alloc::vec![x, gain, bias], step)
        }
        "lstm_step" => {
            let mut ps = ParamSet::new();
            let mut b = ParamBuilder::new(&mut ps, &mut rng);
            let cell = Lstm::new(&mut b, "lstm", 4, 5);
            let bias = ps.find("lstm.bias").expect("bias");
            *ps.get_mut(bias) = random(&mut rng, &[20], 0.5);
            let x = random(&mut rng, &[1, 4], 1.0);
            let h = random(&mut rng, &[1, 5], 0.8);
            let m = random(&mut rng, &[1, 5], 0.8);
            let wh = random(&mut rng, &[1, 5], 1.0);
            let wm = random(&mut rng, &[1, 5], 1.0);
            check(Probe::LstmStep { cell, wh, wm }, ps, alloc::vec![x, h, m], step)
        }
        "scaled_dot_attention" => {
            let q = random(&mut rng, &[2, 4], 1.0);
            let k = random(&mut rng, &[3, 4], 1.0);
            let v = random(&mut rng, &[3, 4], 1.0);
            let w = random(&mut rng, &[2, 4], 1.0);
            check(Probe::ScaledDot { w }, none(), alloc::vec![q, k, v], step)
        }
        "multi_head_attention" => {
            let mut ps = ParamSet::new();
            let mut b = ParamBuilder::new(&mut ps, &mut rng);
            let mha = MultiHead::new(&mut b, "mha", 8, 2)?;
            let q = random(&mut rng, &[2, 8], 1.0);
            let k = random(&mut rng, &[3, 8], 1.0);
            let v = random(&mut rng, &[3, 8], 1.0);
            let w = random(&mut rng, &[2, 8], 1.0);
            check(Probe::MultiHead { mha, w }, ps, alloc::vec![q, k, v], step)
        }
        "aoa_block" => {
            let mut ps = ParamSet::new();
            let mut b = ParamBuilder::new(&mut ps, &mut rng);
            let aoa = Aoa::new(&mut b, "aoa", 4);
            for name in ["aoa.b_info", "aoa.b_gate"] {
                let id = ps.find(name).expect("bias");
                *ps.get_mut(id) = random(&mut rng, &[4], 0.5);
            }
            let q = random(&mut rng, &[2, 4], 1.0);
            let v = random(&mut rng, &[2, 4], 1.0);
            let w = random(&mut rng, &[2, 4], 1.0);
            check(Probe::Aoa { aoa, w }, ps, alloc::vec![q, v], step)
        }
        "refine" => {
            let mut ps = ParamSet::new();
            let mut b = ParamBuilder::new(&mut ps, &mut rng);
            let path = RefinePath::new(&mut b, "refine", 8, 2)?;
            let a = random(&mut rng, &[3, 8], 1.0);
            let w = random(&mut rng, &[3, 8], 1.0);
            check(Probe::Refine { path, w }, ps, alloc::vec![a], step)
        }
        "decode_step" => {
            let model = Captioner::new(mini_config(), &mut rng)?;
            let d = model.config.d_model;
            let spatial = random(&mut rng, &[3, d], 1.0);
            let rel = random(&mut rng, &[2, d], 1.0);
            let a_bar = random(&mut rng, &[1, 2 * d], 1.0);
            let w = random(&mut rng, &[1, model.config.vocab_size], 1.0);
            let decoder_only = decoder_params(&model.params);
            let offset = model.params.len() - decoder_only.len();
            let probe = Probe::DecodeStep { model, offset, w };
            check(probe, decoder_only, alloc::vec![spatial, rel, a_bar], step)
        }
        "xe_loss" => {
            let model = Captioner::new(mini_config(), &mut rng)?;
            let spatial = random(&mut rng, &[3, model.config.spatial_dim], 1.0);
            let rel = random(&mut rng, &[3, model.config.word_dim], 1.0);
            let params = model.params.clone();
            check(Probe::XeLoss { model }, params, alloc::vec![spatial, rel], step)
        }
        "hinge_loss" => {
            let i = random(&mut rng, &[3, 4], 1.0);
            let w = random(&mut rng, &[3, 4], 1.0);
            check(Probe::Hinge, none(), alloc::vec![i, w], step)
        }
        other => Err(crate::Error::Config(alloc::format!("unknown audit block {other}"))),
    }
}

fn mini_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        spatial_dim: 3,
        word_dim: 3,
        d_model: 4,
        heads: 2,
        embed_dim: 3,
        max_triplets: 3,
        max_len: 4,
    }
}

/// The decoder's parameters, which follow the encoder's in creation order.
fn decoder_params(all: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (name, t) in all.iter().filter(|(n, _)| n.starts_with("decoder.")) {
        out.add(name, t.clone());
    }
    out
}

/// Re-indexes a binding of the decoder parameters so the model's own
/// `ParamId`s (which count the encoder first) resolve to it.
fn shifted(p: &Bound, offset: usize) -> Bound {
    let n = offset + p.len();
    Bound::from_vars((0..n).map(|i| if i < offset { p.var_at(0) } else { p.var_at(i - offset) }).collect())
}
