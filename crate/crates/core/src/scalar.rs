//! Scalar abstraction shared by every numeric module.
//!
//! All of the math in this crate is written once against [`Scalar`] and
//! instantiated for `f64` (the default used by the CLI and the tests) and
//! `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floor applied to every argument of `ln` in the loss family.
pub const LOG_FLOOR: f64 = 1e-12;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Lossless-enough conversion from an `f64` literal or stored value.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn half() -> Self {
        Self::of(0.5)
    }

    fn two() -> Self {
        Self::of(2.0)
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + Serialize + DeserializeOwned + 'static
{
}

/// Logistic sigmoid, evaluated without overflow for large `|z|`.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(max(x, LOG_FLOOR))`.
pub fn clamped_ln<T: Scalar>(x: T) -> T {
    x.max(T::of(LOG_FLOOR)).ln()
}

/// Log-sum-exp of a slice; `-inf` for an empty slice.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}
