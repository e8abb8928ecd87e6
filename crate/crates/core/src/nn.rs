//! Linear maps, token embeddings and the LSTM cell.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x Wᵀ (+ b)` applied to each row of `x`. `W` is `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(b: &mut ParamBuilder<'_, R>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        b.scoped(name, |b| Linear {
            weight: b.param("weight", &[out_dim, in_dim], Init::XavierUniform),
            bias: bias.then(|| b.param("bias", &[out_dim], Init::Zeros)),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, x: Var) -> Result<Var> {
        let cols = *tape.shape(x).last().expect("shape");
        if cols != self.in_dim {
            return Err(Error::shape("linear", tape.shape(x), &[self.out_dim, self.in_dim]));
        }
        let wt = tape.transpose(p[self.weight])?;
        let y = tape.matmul(x, wt)?;
        match self.bias {
            Some(bias) => {
                let rows = tape.shape(y)[0];
                let tiled = tape.tile_rows(p[bias], rows)?;
                tape.add(y, tiled)
            }
            None => Ok(y),
        }
    }
}

/// Trainable token embedding table, `vocab × dim`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(b: &mut ParamBuilder<'_, R>, name: &str, vocab: usize, dim: usize) -> Self {
        b.scoped(name, |b| Embedding {
            table: b.param("table", &[vocab, dim], Init::XavierUniform),
            vocab,
            dim,
        })
    }

    /// `1 × dim` embedding of `token`.
    pub fn lookup<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, token: usize) -> Result<Var> {
        tape.gather_rows(p[self.table], &[token])
    }
}

/// Hidden state `h` and memory cell `m`, each `1 × hidden`.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub m: Var,
}

impl LstmState {
    pub fn zeros<S: Real>(tape: &mut Tape<'_, S>, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(alloc::vec![1, hidden])),
            m: tape.constant(Tensor::zeros(alloc::vec![1, hidden])),
        }
    }
}

/// Standard LSTM cell without peepholes. Gate blocks in `W` and `b` are
/// ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

pub const FORGET_BIAS: f64 = 1.0;

impl Lstm {
    pub fn new<R: Rng + ?Sized>(b: &mut ParamBuilder<'_, R>, name: &str, input_dim: usize, hidden: usize) -> Self {
        b.scoped(name, |b| {
            let weight = b.param("weight", &[4 * hidden, input_dim + hidden], Init::XavierUniform);
            let bias = b.param("bias", &[4 * hidden], Init::Zeros);
            Lstm {
                weight,
                bias,
                input_dim,
                hidden,
            }
        })
    }

    /// Sets the forget-gate block of the bias to [`FORGET_BIAS`].
    pub fn init_forget_bias(&self, params: &mut crate::params::ParamSet) {
        let h = self.hidden;
        params.get_mut(self.bias).data_mut()[h..2 * h].fill(FORGET_BIAS);
    }

    pub fn step<S: Real>(&self, tape: &mut Tape<'_, S>, p: &Bound, state: LstmState, x: Var) -> Result<LstmState> {
        if tape.shape(x) != [1, self.input_dim] {
            return Err(Error::shape("lstm_step", tape.shape(x), &[1, self.input_dim]));
        }
        let h = self.hidden;
        let xh = tape.concat(&[x, state.h], 1)?;
        let wt = tape.transpose(p[self.weight])?;
        let pre = tape.matmul(xh, wt)?;
        let bias = tape.reshape(p[self.bias], &[1, 4 * h])?;
        let pre = tape.add(pre, bias)?;
        let i_pre = tape.slice_cols(pre, 0, h)?;
        let f_pre = tape.slice_cols(pre, h, h)?;
        let c_pre = tape.slice_cols(pre, 2 * h, h)?;
        let o_pre = tape.slice_cols(pre, 3 * h, h)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let cand = tape.tanh(c_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let keep = tape.mul(f, state.m)?;
        let write = tape.mul(i, cand)?;
        let m = tape.add(keep, write)?;
        let mt = tape.tanh(m)?;
        let h = tape.mul(o, mt)?;
        Ok(LstmState { h, m })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::params::ParamSet;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lstm(input: usize, hidden: usize, seed: u64) -> (ParamSet, Lstm) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = Lstm::new(&mut ParamBuilder::new(&mut set, &mut rng), "cell", input, hidden);
        cell.init_forget_bias(&mut set);
        (set, cell)
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut ParamBuilder::new(&mut set, &mut rng), "l", 3, 3, true);
        set.set("l.weight", Tensor::identity(3)).unwrap();
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let x = tape.constant(Tensor::row(vec![1.0, -2.0, 0.5]).unwrap());
        let y = lin.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);

        let mut set2 = set.clone();
        set2.set("l.weight", Tensor::zeros(vec![3, 3])).unwrap();
        set2.set("l.bias", Tensor::vector(vec![4.0, 5.0, 6.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let p = set2.bind(&mut tape, false);
        let x = tape.constant(Tensor::row(vec![1.0, -2.0, 0.5]).unwrap());
        let y = lin.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0, 6.0]);
        let bad = tape.constant(Tensor::row(vec![1.0, 2.0]).unwrap());
        assert!(lin.forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn linear_matches_hand_matmul() {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lin = Linear::new(&mut ParamBuilder::new(&mut set, &mut rng), "l", 4, 3, true);
        set.set("l.bias", Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
        let x = [0.4, -1.1, 2.0, 0.25];
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let xv = tape.constant(Tensor::row(x.to_vec()).unwrap());
        let y = lin.forward(&mut tape, &p, xv).unwrap();
        let w = set.get(lin.weight);
        for o in 0..3 {
            let mut acc = set.get(lin.bias.unwrap()).data()[o];
            for i in 0..4 {
                acc += w.get(o, i) * x[i];
            }
            assert!((tape.value(y).data()[o] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let (mut set, cell) = lstm(3, 4, 1);
        set.set("cell.weight", Tensor::zeros(vec![16, 7])).unwrap();
        set.set("cell.bias", Tensor::zeros(vec![16])).unwrap();
        let m0 = [0.8, -1.2, 0.0, 3.0];
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let state = LstmState {
            h: tape.constant(Tensor::row(vec![0.3, 0.1, -0.2, 0.9]).unwrap()),
            m: tape.constant(Tensor::row(m0.to_vec()).unwrap()),
        };
        let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]).unwrap());
        let next = cell.step(&mut tape, &p, state, x).unwrap();
        for (k, &m) in m0.iter().enumerate() {
            assert!((tape.value(next.m).data()[k] - 0.5 * m).abs() < 1e-15);
            assert!((tape.value(next.h).data()[k] - 0.5 * libm::tanh(0.5 * m)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_state_and_bias_give_zero_hidden() {
        let (mut set, cell) = lstm(3, 4, 2);
        set.set("cell.bias", Tensor::zeros(vec![16])).unwrap();
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let state = LstmState::zeros(&mut tape, 4);
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        let next = cell.step(&mut tape, &p, state, x).unwrap();
        assert!(tape.value(next.h).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forget_bias_is_one_rest_zero() {
        let (set, cell) = lstm(2, 3, 5);
        let b = set.get(cell.bias).data();
        assert_eq!(&b[..3], &[0.0; 3]);
        assert_eq!(&b[3..6], &[1.0; 3]);
        assert_eq!(&b[6..], &[0.0; 6]);
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        for seed in 0..3 {
            let (set, cell) = lstm(3, 4, 20 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_row = |n: usize| Tensor::row((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let inputs: Vec<Tensor> = vec![
                set.get(cell.weight).clone(),
                set.get(cell.bias).clone(),
                rand_row(3),
                rand_row(4),
                rand_row(4),
            ];
            let weights = rand_row(4);
            let c = cell.clone();
            let err = grad_check(
                |t, v| {
                    let bound = crate::params::Bound::from_vars(vec![v[0], v[1]]);
                    let next = c.step(t, &bound, LstmState { h: v[3], m: v[4] }, v[2])?;
                    let w = t.constant(weights.clone());
                    let y = t.mul(next.h, w)?;
                    t.sum(y)
                },
                &inputs,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn hidden_stays_bounded() {
        let (set, cell) = lstm(3, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let p = set.bind(&mut tape, false);
        let mut state = LstmState::zeros(&mut tape, 5);
        for _ in 0..20 {
            let x = tape.constant(Tensor::row((0..3).map(|_| rng.gen_range(-10.0..10.0)).collect()).unwrap());
            state = cell.step(&mut tape, &p, state, x).unwrap();
            assert!(tape.value(state.h).data().iter().all(|v| v.abs() < 1.0));
        }
    }
}
