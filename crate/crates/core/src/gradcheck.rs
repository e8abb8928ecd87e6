//! Central finite-difference audit of tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::{Dd, Real};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative error used by every gradient audit: `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences for every coordinate of every input and returns the worst
/// relative error.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_detailed(f, inputs, step)?.error)
}

/// Location and values of the worst coordinate found by a gradient check.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WorstCoordinate {
    pub error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Like [`grad_check`], also reporting where the worst error occurred.
pub fn grad_check_detailed<F>(f: F, inputs: &[Tensor], step: f64) -> Result<WorstCoordinate>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    let mut perturbed = inputs.to_vec();
    compare(&analytic, |k, j| {
        let orig = inputs[k].data()[j];
        let mut eval = |x: f64| -> Result<f64> {
            perturbed[k].data_mut()[j] = x;
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf_ref(t, false)).collect();
            let out = f(&mut tape, &vars)?;
            scalar(&tape, out)
        };
        let (plus, minus) = (eval(orig + step)?, eval(orig - step)?);
        perturbed[k].data_mut()[j] = orig;
        Ok((plus - minus) / (2.0 * step))
    })
}

/// A scalar function of tape inputs that can run on any [`Real`].
pub trait ScalarFn {
    fn eval<S: Real>(&self, tape: &mut Tape<'_, S>, inputs: &[Var]) -> Result<Var>;
}

/// [`grad_check_detailed`] with the central differences evaluated in
/// double-double arithmetic.
///
/// In `f64` the difference `f(x + h) - f(x - h)` carries an absolute
/// round-off near `ε·|f| / h`, which swamps gradients below about `1e-6`.
/// The analytic side still runs on an ordinary `f64` tape.
pub fn grad_check_precise<F: ScalarFn>(f: &F, inputs: &[Tensor], step: f64) -> Result<WorstCoordinate> {
    let analytic = analytic_grads(&|tape: &mut Tape<'_>, vars: &[Var]| f.eval(tape, vars), inputs)?;
    let mut perturbed: Vec<Tensor<Dd>> = inputs.iter().map(Tensor::cast).collect();
    let h = Dd::from_f64(step);
    compare(&analytic, |k, j| {
        let orig = perturbed[k].data()[j];
        let mut eval = |x: Dd| -> Result<Dd> {
            perturbed[k].data_mut()[j] = x;
            let mut tape = Tape::<Dd>::default();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf_ref(t, false)).collect();
            let out = f.eval(&mut tape, &vars)?;
            scalar(&tape, out)
        };
        let (plus, minus) = (eval(orig + h)?, eval(orig - h)?);
        perturbed[k].data_mut()[j] = orig;
        Ok(((plus - minus) / (h + h)).to_f64())
    })
}

fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_ref(t, true)).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    tape.backward(out)?;
    Ok(inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect())
}

/// Visits every coordinate `(input k, flat index j)`, asking `numeric`
/// for its central difference.
fn compare(
    analytic: &[Tensor],
    mut numeric: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<WorstCoordinate> {
    let mut worst = WorstCoordinate::default();
    for (k, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.data().iter().enumerate() {
            let n = numeric(k, j)?;
            let error = relative_error(a, n);
            if error > worst.error {
                worst = WorstCoordinate {
                    error,
                    input: k,
                    index: j,
                    analytic: a,
                    numeric: n,
                };
            }
        }
    }
    Ok(worst)
}

fn scalar<S: Real>(tape: &Tape<'_, S>, v: Var) -> Result<S> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(alloc::format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::matrix(2, 3, alloc::vec![0.1, -0.2, 0.3, 1.5, -2.5, 0.7]).unwrap();
        let err = grad_check(|t, v| t.sum(v[0]), &[x], DEFAULT_STEP).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    /// `Σ x² + 1000·Σ y`: central differences are exact, so only round-off remains.
    struct OffsetSquare;

    impl ScalarFn for OffsetSquare {
        fn eval<S: Real>(&self, tape: &mut Tape<'_, S>, v: &[Var]) -> Result<Var> {
            let sq = tape.mul(v[0], v[0])?;
            let sq = tape.sum(sq)?;
            let big = tape.sum(v[1])?;
            let big = tape.scale(big, 1000.0)?;
            tape.add(sq, big)
        }
    }

    #[test]
    fn precise_check_resolves_tiny_gradients() {
        let x = Tensor::vector(alloc::vec![1e-8, 0.5, -1.25]).unwrap();
        let y = Tensor::vector(alloc::vec![0.3, 0.7]).unwrap();
        let f64_check = grad_check(|t, v| OffsetSquare.eval(t, v), &[x.clone(), y.clone()], DEFAULT_STEP).unwrap();
        assert!(f64_check > 1e-3, "{f64_check}");
        let w = grad_check_precise(&OffsetSquare, &[x, y], DEFAULT_STEP).unwrap();
        assert!(w.error <= 1e-12, "{w:?}");
    }

    #[test]
    fn rejects_vector_valued_functions() {
        let x = Tensor::vector(alloc::vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|t, v| t.tanh(v[0]), &[x], DEFAULT_STEP).is_err());
    }
}
