//! Scalar abstraction shared by the similarity, pass@k and cost code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Lossy conversion used when importing wire values.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Cosine similarity. A zero-norm operand yields zero.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    if denom == T::zero() {
        T::zero()
    } else {
        dot / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_basis_vectors() {
        let e1 = [1.0f32, 0.0, 0.0];
        let e2 = [0.0f32, 1.0, 0.0];
        assert_eq!(cosine(&e1, &e1), 1.0);
        assert_eq!(cosine(&e1, &e2), 0.0);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let a = [1.0f64, 2.0, 3.0];
        let b = [2.0f64, 4.0, 6.0];
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_has_zero_similarity() {
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 1.0]), 0.0);
    }
}
