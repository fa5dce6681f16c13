//! Scalar abstraction shared by the geometry, detector and evaluator code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the numeric core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion from `f64`, used for constants and features.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    #[inline]
    fn half() -> Self {
        Self::of(0.5)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax over a slice, max-shifted.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for &x in &[-5.0f64, -1.0, 0.0, 0.5, 3.0] {
            let naive = (1.0 + x.exp()).ln();
            assert!((softplus(x) - naive).abs() < 1e-12);
        }
        assert!(softplus(1000.0f64).is_finite());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0f64, 2.0, -3.0, 1000.0]);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
