//! Two-path refining encoder over spatial and relationship features.

use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{Aoa, MultiHead};
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::nn::Linear;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One refining block: `A' = LayerNorm(A + AoA(A, MHA(A, A, A)))`.
#[derive(Clone, Debug)]
pub struct RefinePath {
    pub attn: MultiHead,
    pub aoa: Aoa,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub eps: f64,
}

impl RefinePath {
    pub fn new<R: Rng + ?Sized>(b: &mut ParamBuilder<'_, R>, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(RefinePath {
                attn: MultiHead::new(b, "attn", d_model, heads)?,
                aoa: Aoa::new(b, "aoa", d_model),
                ln_gain: b.param("ln_gain", &[d_model], Init::Constant(1.0)),
                ln_bias: b.param("ln_bias", &[d_model], Init::Zeros),
                eps: LAYER_NORM_EPS,
            })
        })
    }

    pub fn refine<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, a: Var) -> Result<Var> {
        if tape.shape(a).len() != 2 || tape.shape(a)[1] != self.attn.d_model {
            return Err(Error::shape("refine", tape.shape(a), &[self.attn.d_model]));
        }
        let attended = self.attn.forward(tape, p, a, a, a)?;
        let gated = self.aoa.forward(tape, p, a, attended)?;
        let residual = tape.add(a, gated)?;
        tape.layer_norm(residual, p[self.ln_gain], p[self.ln_bias], self.eps)
    }
}

/// Mean of the rows of `a` whose mask entry is true (all rows when no mask
/// is given), as a `1 × d` row. No valid rows gives the zero row.
pub fn aggregate<S: Real>(tape: &mut Tape<'_, S>, a: Var, mask: Option<&[bool]>) -> Result<Var> {
    let (n, d) = match tape.shape(a) {
        [n, d] => (*n, *d),
        s => return Err(Error::dim("aggregate", alloc::format!("expected a matrix, got {s:?}"))),
    };
    let rows: Vec<usize> = match mask {
        None => (0..n).collect(),
        Some(m) if m.len() == n => (0..n).filter(|&i| m[i]).collect(),
        Some(m) => return Err(Error::shape("aggregate", &[n, d], &[m.len()])),
    };
    if rows.is_empty() {
        log::warn!("aggregate: every row is masked, using the zero vector");
        return Ok(tape.constant(Tensor::zeros(alloc::vec![1, d])));
    }
    if rows.len() == n {
        return tape.mean_rows(a);
    }
    let kept = tape.gather_rows(a, &rows)?;
    tape.mean_rows(kept)
}

/// Refined feature sets and the visual initializer for the decoder.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `N_s × d_model`.
    pub spatial: Var,
    /// `N_r × d_model`, masked rows zero.
    pub relationships: Var,
    /// Refined rows of the valid triplets only, `None` when all are masked.
    pub rel_valid: Option<Var>,
    pub rel_mask: Vec<bool>,
    /// `1 × 2·d_model`: spatial mean then relationship masked mean.
    pub a_bar: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub spatial_proj: Linear,
    pub rel_proj: Linear,
    pub spatial: RefinePath,
    pub rel: RefinePath,
    pub d_model: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        b: &mut ParamBuilder<'_, R>,
        spatial_dim: usize,
        word_dim: usize,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        b.scoped("encoder", |b| {
            Ok(Encoder {
                spatial_proj: Linear::new(b, "spatial_proj", spatial_dim, d_model, true),
                rel_proj: Linear::new(b, "rel_proj", word_dim, d_model, true),
                spatial: RefinePath::new(b, "spatial_refine", d_model, heads)?,
                rel: RefinePath::new(b, "rel_refine", d_model, heads)?,
                d_model,
            })
        })
    }

    pub fn encode<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, bundle: &FeatureBundle) -> Result<EncoderOutput> {
        let spatial = tape.constant(bundle.spatial.cast());
        let rel = tape.constant(bundle.relationships.cast());
        self.encode_vars(tape, p, spatial, rel, &bundle.rel_mask)
    }

    /// Encodes features already on the tape.
    pub fn encode_vars<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, spatial: Var, rel: Var, rel_mask: &[bool]) -> Result<EncoderOutput> {
        if tape.shape(spatial)[0] == 0 {
            return Err(Error::Empty("encode"));
        }
        if tape.shape(rel)[0] != rel_mask.len() {
            return Err(Error::shape("encode", tape.shape(rel), &[rel_mask.len()]));
        }
        let projected = self.spatial_proj.forward(tape, p, spatial)?;
        let refined_spatial = self.spatial.refine(tape, p, projected)?;
        let spatial_mean = aggregate(tape, refined_spatial, None)?;

        let n_r = rel_mask.len();
        let valid: Vec<usize> = (0..n_r).filter(|&i| rel_mask[i]).collect();
        let (relationships, rel_valid, rel_mean) = if valid.is_empty() {
            log::warn!("encode: no valid relationship triplets");
            let zeros = tape.constant(Tensor::zeros(alloc::vec![n_r, self.d_model]));
            let mean = tape.constant(Tensor::zeros(alloc::vec![1, self.d_model]));
            (zeros, None, mean)
        } else {
            let rows = tape.gather_rows(rel, &valid)?;
            let projected = self.rel_proj.forward(tape, p, rows)?;
            let refined = self.rel.refine(tape, p, projected)?;
            let full = tape.scatter_rows(refined, &valid, n_r)?;
            let mean = tape.mean_rows(refined)?;
            (full, Some(refined), mean)
        };
        let a_bar = tape.concat(&[spatial_mean, rel_mean], 1)?;
        Ok(EncoderOutput {
            spatial: refined_spatial,
            relationships,
            rel_valid,
            rel_mask: rel_mask.to_vec(),
            a_bar,
        })
    }
}
