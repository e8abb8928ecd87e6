//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! Values are appended in execution order, so every node's inputs precede
//! it and a single reverse sweep visits each op exactly once. Leaves may
//! borrow their value (parameters shared read-only across tapes) or own it.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{total, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MeanRows(Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    TileRows(Var),
    Reshape(Var),
    Sum(Var),
    Pick {
        input: Var,
        index: usize,
    },
}

struct Node<'a, S: Real> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of executed ops with a gradient slot per node.
///
/// Leaf gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`]; intermediate gradients are recomputed each call.
pub struct Tape<'a, S: Real = f64> {
    nodes: Vec<Node<'a, S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Default for Tape<'_, S> {
    fn default() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }
}

fn slice_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn accumulate<S: Real>(grads: &mut [Option<Vec<S>>], var: Var, len: usize) -> &mut [S] {
    grads[var.0].get_or_insert_with(|| vec![S::zero(); len])
}

fn add_into<S: Real>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
}

impl Tape<'_> {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<'a, S: Real> Tape<'a, S> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<S>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Owned(value), requires_grad)
    }

    /// Leaf that borrows its value instead of copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.push_leaf(Cow::Borrowed(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated in the slot of `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, alloc::format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let d = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        self.push(name, t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = S::from_f64(c);
        self.map("scale", a, Op::Scale(a, c), |v| v * k)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), S::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), S::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), S::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::dim("log", "non-positive argument"));
        }
        self.map("log", a, Op::Log(a), S::ln)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |v| if v > S::zero() { v } else { S::zero() })
    }

    /// Softmax over `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", alloc::format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = slice_geometry(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (1..len).map(|j| x[idx(j)]).fold(x[idx(0)], S::max);
                let mut sum = S::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { input: a, axis }, &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("shape");
        let x = self.value(a).data();
        let mut out = vec![S::zero(); x.len()];
        for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row[1..].iter().copied().fold(row[0], S::max);
            let sum = total(row.iter().map(|&v| (v - max).exp()));
            let lse = max + sum.ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        self.push("log_softmax", Tensor::from_parts(shape, out), Op::LogSoftmax(a), &[a])
    }

    /// Row-wise layer normalization with population variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("shape");
        if d < 2 {
            return Err(Error::dim("layer_norm", "normalized width must be at least 2"));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let (xv, gv, bv) = (self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let width = S::from_f64(d as f64);
        let mut xhat = vec![S::zero(); xv.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = total(row.iter().copied()) / width;
            let var = total(row.iter().map(|&v| (v - mean) * (v - mean))) / width;
            let is = S::one() / (var + S::from_f64(eps)).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", Tensor::from_parts(shape, out), op, &[x, gain, bias])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::Empty("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", alloc::format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut out = Vec::with_capacity(outer * total * base[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.value(v).numel() / outer;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push("concat", Tensor::from_parts(shape, out), op, inputs)
    }

    /// Column means of an `N × d` matrix as a `1 × d` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims("mean_rows", a)?;
        let x = self.value(a).data();
        let mut out = vec![S::zero(); d];
        for r in 0..n {
            for c in 0..d {
                out[c] += x[r * d + c];
            }
        }
        let count = S::from_f64(n as f64);
        out.iter_mut().for_each(|v| *v /= count);
        self.push("mean_rows", Tensor::from_parts(vec![1, d], out), Op::MeanRows(a), &[a])
    }

    /// Rows of `table` selected by `indices`, in order.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather_rows", table)?;
        if indices.is_empty() {
            return Err(Error::Empty("gather_rows"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: n,
            });
        }
        let x = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let op = Op::GatherRows {
            table,
            indices: indices.to_vec(),
        };
        self.push("gather_rows", Tensor::from_parts(vec![indices.len(), d], out), op, &[table])
    }

    /// Places row `r` of `src` at row `indices[r]` of a zero `rows × d` matrix.
    pub fn scatter_rows(&mut self, src: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("scatter_rows", src)?;
        if n != indices.len() {
            return Err(Error::shape("scatter_rows", self.shape(src), &[indices.len()]));
        }
        let mut seen = vec![false; rows];
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "scatter_rows",
                    index: i,
                    len: rows,
                });
            }
            if core::mem::replace(&mut seen[i], true) {
                return Err(Error::dim("scatter_rows", "duplicate target row"));
            }
        }
        let x = self.value(src).data();
        let mut out = vec![S::zero(); rows * d];
        for (r, &i) in indices.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&x[r * d..(r + 1) * d]);
        }
        let op = Op::ScatterRows {
            src,
            indices: indices.to_vec(),
        };
        self.push("scatter_rows", Tensor::from_parts(vec![rows, d], out), op, &[src])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > d {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: d,
            });
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&x[r * d + start..r * d + start + len]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![n, len], out), Op::SliceCols { input: a, start }, &[a])
    }

    /// Repeats a vector (`[d]` or `1 × d`) as `rows` identical rows.
    pub fn tile_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let s = self.shape(a);
        let ok = s.len() == 1 || (s.len() == 2 && s[0] == 1);
        if !ok || rows == 0 {
            return Err(Error::dim("tile_rows", alloc::format!("cannot tile shape {s:?} to {rows} rows")));
        }
        let x = self.value(a).data();
        let d = x.len();
        let mut out = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            out.extend_from_slice(x);
        }
        self.push("tile_rows", Tensor::from_parts(vec![rows, d], out), Op::TileRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = total(self.value(a).data().iter().copied());
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Single entry at flat `index` as a `[1]` scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.value(a).numel();
        if index >= n {
            return Err(Error::IndexOutOfRange { op: "pick", index, len: n });
        }
        let v = self.value(a).data()[index];
        self.push("pick", Tensor::scalar(v), Op::Pick { input: a, index }, &[a])
    }

    /// Adds `d loss / d node` into the gradient slot of every node that
    /// requires a gradient. Leaf slots accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("backward"));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads, loss, 1)[0] += S::one();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.numel();
        let out = nodes[i].value.data();
        let one = S::one();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if wants(*a) {
                    let bd = val(*b);
                    let da = accumulate(grads, *a, m * k);
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] += total(g[r * n..(r + 1) * n].iter().zip(brow).map(|(&x, &y)| x * y));
                        }
                    }
                }
                if wants(*b) {
                    let ad = val(*a);
                    let db = accumulate(grads, *b, k * n);
                    for r in 0..m {
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += arp * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let da = accumulate(grads, *a, m * n);
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(nodes[i].op, Op::Sub(..));
                if wants(*a) {
                    add_into(accumulate(grads, *a, g.len()), g);
                }
                if wants(*b) {
                    let db = accumulate(grads, *b, g.len());
                    if negate {
                        db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v);
                    } else {
                        add_into(db, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = val(*b);
                    let da = accumulate(grads, *a, g.len());
                    for ((d, &v), &y) in da.iter_mut().zip(g).zip(bd) {
                        *d += v * y;
                    }
                }
                if wants(*b) {
                    let ad = val(*a);
                    let db = accumulate(grads, *b, g.len());
                    for ((d, &v), &x) in db.iter_mut().zip(g).zip(ad) {
                        *d += v * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let k = S::from_f64(*c);
                accumulate(grads, *a, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += k * v);
            }
            Op::Sigmoid(a) => {
                let da = accumulate(grads, *a, g.len());
                for ((d, &v), &y) in da.iter_mut().zip(g).zip(out) {
                    *d += v * y * (one - y);
                }
            }
            Op::Tanh(a) => {
                let da = accumulate(grads, *a, g.len());
                for ((d, &v), &y) in da.iter_mut().zip(g).zip(out) {
                    *d += v * (one - y * y);
                }
            }
            Op::Exp(a) => {
                let da = accumulate(grads, *a, g.len());
                for ((d, &v), &y) in da.iter_mut().zip(g).zip(out) {
                    *d += v * y;
                }
            }
            Op::Log(a) => {
                let x = val(*a);
                let da = accumulate(grads, *a, g.len());
                for ((d, &v), &x) in da.iter_mut().zip(g).zip(x) {
                    *d += v / x;
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                let da = accumulate(grads, *a, g.len());
                for ((d, &v), &x) in da.iter_mut().zip(g).zip(x) {
                    if x > S::zero() {
                        *d += v;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = slice_geometry(nodes[i].value.shape(), *axis);
                let da = accumulate(grads, *input, g.len());
                for o in 0..outer {
                    for q in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + q;
                        let dot = total((0..n).map(|j| g[idx(j)] * out[idx(j)]));
                        for j in 0..n {
                            da[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = *nodes[i].value.shape().last().expect("shape");
                let da = accumulate(grads, *a, g.len());
                for ((drow, grow), yrow) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let gsum = total(grow.iter().copied());
                    for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gv - y.exp() * gsum;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.numel();
                let rows = g.len() / d;
                if wants(*gain) {
                    let dg = accumulate(grads, *gain, d);
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if wants(*bias) {
                    let db = accumulate(grads, *bias, d);
                    for r in 0..rows {
                        add_into(db, &g[r * d..(r + 1) * d]);
                    }
                }
                if wants(*x) {
                    let gv = val(*gain);
                    let width = S::from_f64(d as f64);
                    let dx = accumulate(grads, *x, g.len());
                    for r in 0..rows {
                        let gh: Vec<S> = (0..d).map(|c| g[r * d + c] * gv[c]).collect();
                        let mean_gh = total(gh.iter().copied()) / width;
                        let mean_ghx = total((0..d).map(|c| gh[c] * xhat[r * d + c])) / width;
                        for c in 0..d {
                            dx[r * d + c] += inv_std[r] * (gh[c] - mean_gh - xhat[r * d + c] * mean_ghx);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = nodes[i].value.shape()[..*axis].iter().product();
                let mut offset = 0;
                let row_len = g.len() / outer;
                for v in inputs {
                    let n = len(*v);
                    let chunk = n / outer;
                    if wants(*v) {
                        let dv = accumulate(grads, *v, n);
                        for o in 0..outer {
                            let src = &g[o * row_len + offset..o * row_len + offset + chunk];
                            add_into(&mut dv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::MeanRows(a) => {
                let n = nodes[a.0].value.shape()[0];
                let d = g.len();
                let count = S::from_f64(n as f64);
                let da = accumulate(grads, *a, n * d);
                for r in 0..n {
                    for c in 0..d {
                        da[r * d + c] += g[c] / count;
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let d = nodes[i].value.cols();
                let dt = accumulate(grads, *table, len(*table));
                for (r, &idx) in indices.iter().enumerate() {
                    add_into(&mut dt[idx * d..(idx + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::ScatterRows { src, indices } => {
                let d = nodes[i].value.cols();
                let ds = accumulate(grads, *src, len(*src));
                for (r, &idx) in indices.iter().enumerate() {
                    add_into(&mut ds[r * d..(r + 1) * d], &g[idx * d..(idx + 1) * d]);
                }
            }
            Op::SliceCols { input, start } => {
                let (n, w) = (nodes[i].value.shape()[0], nodes[i].value.shape()[1]);
                let d = nodes[input.0].value.cols();
                let da = accumulate(grads, *input, n * d);
                for r in 0..n {
                    add_into(&mut da[r * d + start..r * d + start + w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::TileRows(a) => {
                let d = len(*a);
                let da = accumulate(grads, *a, d);
                for row in g.chunks(d) {
                    add_into(da, row);
                }
            }
            Op::Reshape(a) => {
                add_into(accumulate(grads, *a, g.len()), g);
            }
            Op::Sum(a) => {
                accumulate(grads, *a, len(*a)).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Pick { input, index } => {
                accumulate(grads, *input, len(*input))[*index] += g[0];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(t: &mut Tape<'_>, r: usize, c: usize, d: &[f64], grad: bool) -> Var {
        t.leaf(Tensor::matrix(r, c, d.to_vec()).unwrap(), grad)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let b_data: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let i3 = t.constant(Tensor::identity(3));
        let b = mat(&mut t, 3, 2, &b_data, false);
        let c = t.matmul(i3, b).unwrap();
        assert_eq!(t.value(c).data(), &b_data[..]);

        let a = mat(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let v = mat(&mut t, 2, 1, &[0.0, 1.0], false);
        let p = t.matmul(a, v).unwrap();
        assert_eq!(t.value(p).data(), &[2.0, 4.0]);
        assert_eq!(t.shape(p), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        match t.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(alloc::vec![0.0; 3]).unwrap());
        let s = t.softmax(z, 0).unwrap();
        for &p in t.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let raw = [0.3, -1.7, 2.2, 0.05];
        let z1 = t.constant(Tensor::vector(raw.to_vec()).unwrap());
        let z2 = t.constant(Tensor::vector(raw.iter().map(|v| v + 123.25).collect()).unwrap());
        let (s1, s2) = (t.softmax(z1, 0).unwrap(), t.softmax(z2, 0).unwrap());
        assert!(t.value(s1).max_abs_diff(t.value(s2)) <= 1e-12);
        assert!(t.softmax(z1, 1).is_err());
    }

    #[test]
    fn softmax_over_leading_axis_sums_columns() {
        let mut t = Tape::new();
        let z = mat(&mut t, 2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0], false);
        let s = t.softmax(z, 0).unwrap();
        let v = t.value(s);
        for c in 0..3 {
            assert!((v.get(0, c) + v.get(1, c) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_bias() {
        let mut t = Tape::new();
        let x = mat(&mut t, 1, 4, &[5.0; 4], false);
        let g = t.constant(Tensor::full(vec![4], 1.0));
        let b = t.constant(Tensor::zeros(vec![4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| *v == 0.0));
        let narrow = mat(&mut t, 1, 1, &[1.0], false);
        let g1 = t.constant(Tensor::full(vec![1], 1.0));
        let b1 = t.constant(Tensor::zeros(vec![1]));
        assert!(matches!(t.layer_norm(narrow, g1, b1, 1e-5), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5]);
        let a = t.constant(Tensor::vector(alloc::vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::vector(alloc::vec![3.0]).unwrap());
        let c = t.concat(&[a, b], 0).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        assert!(t.add(a, b).is_err());
        let table = t.constant(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            t.gather_rows(table, &[0, 3]),
            Err(Error::IndexOutOfRange { index: 3, len: 3, .. })
        ));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = mat(&mut t, 2, 2, &[1.0, -2.0, 3.0, 0.5], true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 4]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.75), true);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut t = Tape::new();
        let x = mat(&mut t, 1, 3, &[0.2, -0.4, 0.9], true);
        let y = t.tanh(x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let once = t.grad(x).unwrap();
        t.backward(s).unwrap();
        let twice = t.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn scatter_then_gather_roundtrip() {
        let mut t = Tape::new();
        let src = mat(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0], true);
        let full = t.scatter_rows(src, &[3, 1], 4).unwrap();
        assert_eq!(t.value(full).data(), &[0.0, 0.0, 3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        let back = t.gather_rows(full, &[3, 1]).unwrap();
        assert_eq!(t.value(back).data(), t.value(src).data());
        assert!(t.scatter_rows(src, &[1, 1], 4).is_err());
    }
}
