//! Scalar abstraction for the numeric kernels.
//!
//! Everything that computes (scores, quantiles, distances, weights) is
//! generic over [`Real`]; `f64` and `f32` both qualify. Concrete aliases for
//! the common `f64` instantiation live at the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar used throughout the crate.
///
/// Randomness is always drawn in `f64` and converted, so `f32` and `f64`
/// pipelines built from the same seed see the same underlying draws.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts from `f64`, panicking only for values outside the type's
    /// range (never the case for the probabilities and distances used here).
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 value not representable in scalar type")
    }

    /// Widens to `f64` for reporting and aggregation.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
}

/// Total order on finite scalars; `NaN` sorts last so it can never win a
/// minimum or be selected as a neighbor.
pub fn cmp_real<T: Real>(a: &T, b: &T) -> std::cmp::Ordering {
    a.partial_cmp(b).unwrap_or_else(|| {
        if a.is_nan() && b.is_nan() {
            std::cmp::Ordering::Equal
        } else if a.is_nan() {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Less
        }
    })
}

/// Sum without requiring a `Sum` bound on `T`.
pub fn sum<T: Real>(iter: impl IntoIterator<Item = T>) -> T {
    iter.into_iter().fold(T::zero(), |acc, x| acc + x)
}

/// Squared Euclidean distance between two equal-length vectors.
pub fn dist_sq<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc = acc + d * d;
    }
    acc
}

/// Euclidean distance.
pub fn dist<T: Real>(a: &[T], b: &[T]) -> T {
    dist_sq(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cmp_real_orders_nan_last() {
        let mut v = vec![2.0f64, f64::NAN, 1.0];
        v.sort_by(cmp_real);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 2.0);
        assert!(v[2].is_nan());
    }

    #[test]
    fn dist_matches_hand_value() {
        let a = [0.0f64, 3.0];
        let b = [4.0, 0.0];
        assert_eq!(dist(&a, &b), 5.0);
    }

    #[test]
    fn generic_over_f32() {
        let a = [0.0f32, 3.0];
        let b = [4.0, 0.0];
        assert_eq!(dist(&a, &b), 5.0f32);
    }
}
