//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape, Tensor};

/// Uniform values in [-1, 1].
pub fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0f32..=1.0))
}

/// Uniform values in [-1, 1] on a 2^-8 grid. Products and short sums of
/// these are exact in f32, which keeps finite differences of linear kernels
/// free of rounding noise.
pub fn dyadic_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-256i32..=256) as f32 / 256.0)
}

/// Finite-difference step for [`dyadic_tensor`] inputs, 2^-10 (about 1e-3).
pub const DYADIC_EPS: f32 = 1.0 / 1024.0;

/// Uniform values in [0, 1].
pub fn rand_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| rng.random_range(0.0f32..=1.0))
}

/// Relative error with a 1e-2 absolute floor on the denominator, for
/// gradients of unit scale.
pub fn fd_rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Worst relative error over a set of gradient entries. Entries smaller than
/// 1% of the largest numeric magnitude are measured against that floor.
pub fn max_rel_err(pairs: &[(f64, f64)]) -> f64 {
    let scale = pairs.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let floor = (1e-2 * scale).max(1e-12);
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `|a - n| / |n|` over the whole set of entries, for deep piecewise-linear
/// chains where single entries can straddle an activation kink.
pub fn norm_rel_err(pairs: &[(f64, f64)]) -> f64 {
    let diff: f64 = pairs.iter().map(|&(a, n)| (a - n).powi(2)).sum();
    let norm: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
    (diff / norm.max(1e-24)).sqrt()
}
