//! Named parameter storage, initialization and tape binding.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order is creation order and is the
/// manifest order used by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Initialization scheme for a freshly created parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
    Constant(f64),
}

/// Draws a tensor of `shape` under `scheme`. For matrices `fan_out` is the
/// row count and `fan_in` the column count.
pub fn init_params<R: Rng + ?Sized>(shape: &[usize], scheme: Init, rng: &mut R) -> Tensor {
    match scheme {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Constant(c) => Tensor::full(shape.to_vec(), c),
        Init::XavierUniform => {
            let (fan_out, fan_in) = match shape {
                [n] => (*n, *n),
                [r, c] => (*r, *c),
                _ => (shape[0], shape[1..].iter().product()),
            };
            let s = xavier_bound(fan_in, fan_out);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(alloc::format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::shape("set_param", self.tensors[id.0].shape(), tensor.shape()));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Registers every parameter on `tape`, borrowing the values.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf_ref(t, requires_grad)).collect(),
        }
    }

    /// Registers converted copies of every parameter on a tape of another
    /// scalar type. Such leaves never require gradients.
    pub fn bind_cast<S: Real>(&self, tape: &mut Tape<'_, S>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.cast())).collect(),
        }
    }

    /// FNV-1a over names, shapes and value bits. Cheap identity check for
    /// frozen parameter sets.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for (name, t) in self.iter() {
            h.write(name.as_bytes());
            for &e in t.shape() {
                h.write(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.0
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Tape handles for a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding from explicit vars, `vars[i]` standing for the parameter with index `i`.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn var_at(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Parameter gradients after backward; zeros where no gradient flowed.
    pub fn grads(&self, tape: &Tape<'_>) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec())))
            .collect()
    }
}

impl core::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'p, R: Rng + ?Sized> {
    set: &'p mut ParamSet,
    rng: &'p mut R,
    prefix: String,
}

impl<'p, R: Rng + ?Sized> ParamBuilder<'p, R> {
    pub fn new(set: &'p mut ParamSet, rng: &'p mut R) -> Self {
        ParamBuilder {
            set,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.path(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            String::from(name)
        } else {
            alloc::format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], scheme: Init) -> ParamId {
        let t = init_params(shape, scheme, self.rng);
        let path = self.path(name);
        self.set.add(path, t)
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use alloc::vec;

    #[test]
    fn same_seed_same_params() {
        let a = init_params(&[4, 6], Init::XavierUniform, &mut ChaCha8Rng::seed_from_u64(3));
        let b = init_params(&[4, 6], Init::XavierUniform, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let c = init_params(&[4, 6], Init::XavierUniform, &mut ChaCha8Rng::seed_from_u64(4));
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_stddev_matches_uniform_law() {
        // 100 x 100 = 10k samples; stddev of U(-s, s) is s / sqrt(3).
        let t = init_params(&[100, 100], Init::XavierUniform, &mut ChaCha8Rng::seed_from_u64(11));
        let s = xavier_bound(100, 100);
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.numel() as f64;
        let expected = s / libm::sqrt(3.0);
        assert!((libm::sqrt(var) - expected).abs() <= 0.1 * expected);
        assert!(t.data().iter().all(|v| v.abs() < s));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::full(vec![2, 2], 0.5));
        let before = p.fingerprint();
        p.get_mut(ParamId(0)).data_mut()[3] = 0.25;
        assert_ne!(before, p.fingerprint());
        assert!(p.set("w", Tensor::zeros(vec![3])).is_err());
        assert!(p.set("nope", Tensor::zeros(vec![2, 2])).is_err());
    }
}
