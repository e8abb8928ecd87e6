//! Gradient descent with global-norm clipping.

use crate::error::{Error, Result};
use crate::params::{global_norm, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_CLIP: f64 = 5.0;

/// One descent step `θ ← θ − lr·g`, with `g` rescaled so that its global
/// norm is at most `clip`. Returns the norm before clipping.
///
/// Gradients are applied in manifest order, so the update is bit-reproducible.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], lr: f64, clip: f64) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm"));
    }
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
    let ids: alloc::vec::Vec<_> = params.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let p = params.get_mut(id);
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * scale * d;
        }
    }
    Ok(norm)
}

/// Element-wise sum of two gradient lists.
pub fn accumulate(into: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in into.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn step_is_clipped_to_norm() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![0.0, 0.0]).unwrap());
        let g = [Tensor::vector(vec![30.0, 40.0]).unwrap()];
        let norm = sgd_step(&mut ps, &g, 1.0, 5.0).unwrap();
        assert_eq!(norm, 50.0);
        let w = ps.iter().next().unwrap().1.data().to_vec();
        assert!((w[0] + 3.0).abs() < 1e-12 && (w[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::vector(vec![1.5, -2.0]).unwrap());
        let before = ps.clone();
        sgd_step(&mut ps, &[Tensor::zeros(vec![2])], 0.1, 5.0).unwrap();
        assert_eq!(ps, before);
    }
}
