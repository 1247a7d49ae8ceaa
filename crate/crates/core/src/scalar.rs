//! Floating-point scalar abstraction.
//!
//! All numeric pipelines in this crate are generic over [`Scalar`] so the
//! same code runs in `f32` or `f64`. The CLI instantiates `f64`; the
//! embedding cache stores `f32` on disk regardless of the in-memory type.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use serde::{de::DeserializeOwned, Serialize};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + x.neg().exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable for large |x|.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        let e = x.neg().exp();
        T::one() / (T::one() + e)
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-5.0_f64, -1.0, 0.0, 0.3, 2.0, 10.0] {
            assert_relative_eq!(softplus(x), (1.0 + x.exp()).ln(), max_relative = 1e-12);
        }
    }

    #[test]
    fn softplus_stable_for_large_inputs() {
        assert!(softplus(1000.0_f64).is_finite());
        assert_relative_eq!(softplus(1000.0_f64), 1000.0, max_relative = 1e-12);
        assert_eq!(softplus(-1000.0_f64), 0.0);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-8.0_f64, -0.5, 0.0, 0.5, 8.0] {
            assert_relative_eq!(sigmoid(x) + sigmoid(-x), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn generic_over_f32_and_f64() {
        assert_relative_eq!(sigmoid(0.0_f32), 0.5_f32);
        assert_relative_eq!(sigmoid(0.0_f64), 0.5_f64);
    }
}
