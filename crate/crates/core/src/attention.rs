//! Scaled dot-product attention, multi-head attention and the
//! attention-on-attention gate.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::scalar::Real;
use crate::tape::{Tape, Var};

/// Attention output and the row-stochastic weight matrix that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// `softmax(Q Kᵀ / sqrt(d)) V` with the softmax taken over keys.
pub fn scaled_dot_attention<S: Real>(tape: &mut Tape<'_, S>, q: Var, k: Var, v: Var) -> Result<Var> {
    scaled_dot_attention_weights(tape, q, k, v).map(|a| a.output)
}

pub fn scaled_dot_attention_weights<S: Real>(tape: &mut Tape<'_, S>, q: Var, k: Var, v: Var) -> Result<Attended> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("scaled_dot_attention", qs, ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::shape("scaled_dot_attention", ks, vs));
    }
    let d = qs[1] as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(d))?;
    let weights = tape.softmax(scores, 1)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// Query/key/value projections for `heads` parallel attention heads over
/// `d_model`-wide features. Head `i` owns the contiguous column block
/// `i*d..(i+1)*d` of each projection, `d = d_model / heads`.
#[derive(Clone, Debug)]
pub struct MultiHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d_model: usize,
    pub heads: usize,
}

impl MultiHead {
    pub fn new<R: Rng + ?Sized>(b: &mut ParamBuilder<'_, R>, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        check_heads(d_model, heads)?;
        Ok(b.scoped(name, |b| MultiHead {
            w_q: b.param("w_q", &[d_model, d_model], Init::XavierUniform),
            w_k: b.param("w_k", &[d_model, d_model], Init::XavierUniform),
            w_v: b.param("w_v", &[d_model, d_model], Init::XavierUniform),
            d_model,
            heads,
        }))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        check_heads(self.d_model, self.heads)?;
        for x in [q_in, k_in, v_in] {
            if tape.shape(x).len() != 2 || tape.shape(x)[1] != self.d_model {
                return Err(Error::shape("multi_head_attention", tape.shape(x), &[self.d_model]));
            }
        }
        let project = |tape: &mut Tape<'_, S>, x: Var, w: ParamId| -> Result<Var> {
            let wt = tape.transpose(p[w])?;
            tape.matmul(x, wt)
        };
        let q = project(tape, q_in, self.w_q)?;
        let k = project(tape, k_in, self.w_k)?;
        let v = project(tape, v_in, self.w_v)?;
        let d = self.head_dim();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * d, d)?;
            let kh = tape.slice_cols(k, h * d, d)?;
            let vh = tape.slice_cols(v, h * d, d)?;
            heads.push(scaled_dot_attention(tape, qh, kh, vh)?);
        }
        if heads.len() == 1 {
            return Ok(heads[0]);
        }
        tape.concat(&heads, 1)
    }
}

fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || !d_model.is_multiple_of(heads) {
        return Err(Error::Config(alloc::format!(
            "d_model {d_model} is not divisible into {heads} heads"
        )));
    }
    Ok(())
}

/// Gated readout `g ⊙ i` of an attention result `v̂` and its query `q`:
/// `i = q W_qⁱᵀ + v̂ W_vⁱᵀ + bⁱ`, `g = σ(q W_qᵍᵀ + v̂ W_vᵍᵀ + bᵍ)`.
#[derive(Clone, Debug)]
pub struct Aoa {
    pub wq_info: ParamId,
    pub wv_info: ParamId,
    pub b_info: ParamId,
    pub wq_gate: ParamId,
    pub wv_gate: ParamId,
    pub b_gate: ParamId,
    pub dim: usize,
}

impl Aoa {
    pub fn new<R: Rng + ?Sized>(b: &mut ParamBuilder<'_, R>, name: &str, dim: usize) -> Self {
        b.scoped(name, |b| Aoa {
            wq_info: b.param("wq_info", &[dim, dim], Init::XavierUniform),
            wv_info: b.param("wv_info", &[dim, dim], Init::XavierUniform),
            b_info: b.param("b_info", &[dim], Init::Zeros),
            wq_gate: b.param("wq_gate", &[dim, dim], Init::XavierUniform),
            wv_gate: b.param("wv_gate", &[dim, dim], Init::XavierUniform),
            b_gate: b.param("b_gate", &[dim], Init::Zeros),
            dim,
        })
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, q: Var, v_hat: Var) -> Result<Var> {
        if tape.shape(q) != tape.shape(v_hat) {
            return Err(Error::shape("aoa_block", tape.shape(q), tape.shape(v_hat)));
        }
        if tape.shape(q).len() != 2 || tape.shape(q)[1] != self.dim {
            return Err(Error::shape("aoa_block", tape.shape(q), &[self.dim]));
        }
        let info = self.affine(tape, p, q, v_hat, self.wq_info, self.wv_info, self.b_info)?;
        let gate_pre = self.affine(tape, p, q, v_hat, self.wq_gate, self.wv_gate, self.b_gate)?;
        let gate = tape.sigmoid(gate_pre)?;
        tape.mul(gate, info)
    }

    #[allow(clippy::too_many_arguments)]
    fn affine<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, q: Var, v: Var, wq: ParamId, wv: ParamId, b: ParamId) -> Result<Var> {
        let rows = tape.shape(q)[0];
        let wqt = tape.transpose(p[wq])?;
        let a = tape.matmul(q, wqt)?;
        let wvt = tape.transpose(p[wv])?;
        let c = tape.matmul(v, wvt)?;
        let s = tape.add(a, c)?;
        let bias = tape.tile_rows(p[b], rows)?;
        tape.add(s, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;
    use crate::tensor::Tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let q = t.constant(rand_mat(&mut rng, 3, 4));
        let k = t.constant(rand_mat(&mut rng, 1, 4));
        let v = t.constant(rand_mat(&mut rng, 1, 4));
        let out = scaled_dot_attention(&mut t, q, k, v).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((t.value(out).get(r, c) - t.value(v).get(0, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let key = rand_mat(&mut rng, 1, 4);
        let keys = Tensor::matrix(3, 4, key.data().repeat(3)).unwrap();
        let mut t = Tape::new();
        let q = t.constant(rand_mat(&mut rng, 2, 4));
        let k = t.constant(keys);
        let v = t.constant(rand_mat(&mut rng, 3, 5));
        let out = scaled_dot_attention(&mut t, q, k, v).unwrap();
        for c in 0..5 {
            let mean = (0..3).map(|r| t.value(v).get(r, c)).sum::<f64>() / 3.0;
            assert!((t.value(out).get(1, c) - mean).abs() < 1e-14);
        }
        let bad = t.constant(rand_mat(&mut rng, 2, 3));
        assert!(scaled_dot_attention(&mut t, bad, k, v).is_err());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut set, &mut rng);
        assert!(MultiHead::new(&mut b, "mh", 6, 4).is_err());
        assert!(MultiHead::new(&mut b, "mh0", 6, 0).is_err());
    }

    #[test]
    fn single_identity_head_reduces_to_plain_attention() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mh = MultiHead::new(&mut ParamBuilder::new(&mut set, &mut rng), "mh", 4, 1).unwrap();
        for name in ["mh.w_q", "mh.w_k", "mh.w_v"] {
            set.set(name, Tensor::identity(4)).unwrap();
        }
        let (qd, kd) = (rand_mat(&mut rng, 2, 4), rand_mat(&mut rng, 5, 4));
        let mut t = Tape::new();
        let p = set.bind(&mut t, false);
        let q = t.constant(qd);
        let k = t.constant(kd);
        let a = mh.forward(&mut t, &p, q, k, k).unwrap();
        let b = scaled_dot_attention(&mut t, q, k, k).unwrap();
        assert_eq!(t.shape(a), &[2, 4]);
        assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-15);
    }

    #[test]
    fn aoa_zero_weights_halve_the_bias() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let aoa = Aoa::new(&mut ParamBuilder::new(&mut set, &mut rng), "aoa", 3);
        for name in ["aoa.wq_gate", "aoa.wv_gate", "aoa.wq_info", "aoa.wv_info"] {
            set.set(name, Tensor::zeros(vec![3, 3])).unwrap();
        }
        set.set("aoa.b_info", Tensor::vector(vec![2.0, -4.0, 1.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let p = set.bind(&mut t, false);
        let q = t.constant(rand_mat(&mut rng, 2, 3));
        let v = t.constant(rand_mat(&mut rng, 2, 3));
        let out = aoa.forward(&mut t, &p, q, v).unwrap();
        assert_eq!(t.value(out).data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
        let short = t.constant(rand_mat(&mut rng, 1, 3));
        assert!(aoa.forward(&mut t, &p, q, short).is_err());
    }
}
