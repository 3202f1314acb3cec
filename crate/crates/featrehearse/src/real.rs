//! Floating-point abstraction for the differentiable parts of the pipeline.
//!
//! Production code runs in f32. Gradient checks instantiate the same code in
//! f64 so finite differences have enough precision to be meaningful.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Scalar type usable by the model, losses and optimizers.
pub trait Real:
    Float
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Denominator guard used by every normalization in the pipeline.
    fn norm_eps() -> Self {
        Self::from_f64(1e-12)
    }
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// v / (||v||_2 + eps), in place.
pub fn normalize_in_place<F: Real>(v: &mut [F]) {
    let norm = l2_norm(v);
    let scale = F::one() / (norm + F::norm_eps());
    for x in v.iter_mut() {
        *x = *x * scale;
    }
}

pub fn l2_norm<F: Real>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_unit_length() {
        let mut v = [3.0f64, 4.0];
        normalize_in_place(&mut v);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-9);
        assert!((v[0] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn normalize_zero_stays_finite() {
        let mut v = [0.0f32; 4];
        normalize_in_place(&mut v);
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(v, [0.0; 4]);
    }
}
