use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use super::DenseMatrix;

/// Xavier/Glorot uniform initialization on `[-a, a]`, `a = sqrt(6 / (rows + cols))`.
pub fn xavier_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DenseMatrix {
    assert!(rows >= 1 && cols >= 1, "xavier_init needs a non-empty shape");
    let bound = xavier_bound(rows, cols);
    let dist = Uniform::new_inclusive(-bound, bound);
    DenseMatrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Uniform bound for embedding tables feeding `tanh(<h⊙z, h'⊙z>)` attention.
///
/// `a = sqrt(3) · d^(-1/4)` gives each coordinate variance `1/sqrt(d)`, so a
/// self-loop pre-activation `Σ h_i² z_i²` has expectation 1 whatever the
/// table height. Xavier's bound shrinks with the entity count instead.
pub fn embedding_bound(dim: usize) -> f64 {
    3f64.sqrt() * (dim as f64).powf(-0.25)
}

/// `U[-g·a, g·a]` with `a` from [`embedding_bound`].
pub fn embedding_init<R: Rng + ?Sized>(rows: usize, dim: usize, gain: f64, rng: &mut R) -> DenseMatrix {
    assert!(rows >= 1 && dim >= 1, "embedding_init needs a non-empty shape");
    let bound = gain * embedding_bound(dim);
    let dist = Uniform::new_inclusive(-bound, bound);
    DenseMatrix::from_fn(rows, dim, |_, _| dist.sample(rng))
}
