//! Floating-point scalar abstraction shared by every numeric routine.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar type the library is generic over: `f32` or `f64`.
///
/// Training defaults to `f64` (see the aliases at the crate root); `f32`
/// works for inference and storage-sensitive paths.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
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
    /// Lossy conversion from `f64`; every `f64` maps to some value of `Self`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn half() -> Self {
        Self::of(0.5)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub(crate) fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub(crate) fn all_finite<T: Scalar>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Arithmetic mean and sample standard deviation (n - 1 denominator).
pub fn mean_std<T: Scalar>(values: &[T]) -> (T, T) {
    if values.is_empty() {
        return (T::nan(), T::nan());
    }
    let n = T::of_usize(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let ss: T = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - T::one())).sqrt())
}
