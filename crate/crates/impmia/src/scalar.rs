//! Scalar abstraction for the numeric core.
//!
//! Model math, gradient blocks, and the coefficient solver are generic over
//! the floating-point type. The pipeline runs everything in `f64`; `f32` is
//! the reduced-precision storage mode for gradient blocks.

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + std::iter::Sum + std::fmt::Debug + Default + Send + Sync + 'static
{
    /// Tag written into file headers that record storage precision.
    const LABEL: &'static str;

    /// Lossy conversion from `f64` (the pipeline's working precision).
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float scalar")
    }

    /// Widen back to `f64`.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float scalar widens to f64")
    }
}

impl Scalar for f32 {
    const LABEL: &'static str = "f32";
}

impl Scalar for f64 {
    const LABEL: &'static str = "f64";
}

/// Euclidean norm of a slice.
pub fn norm2<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

/// Dot product of two equal-length slices.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_and_dot_agree_across_scalar_types() {
        let a64 = [3.0_f64, 4.0];
        let a32 = [3.0_f32, 4.0];
        assert_eq!(norm2(&a64), 5.0);
        assert_eq!(norm2(&a32), 5.0);
        assert_eq!(dot(&a64, &a64), 25.0);
    }
}
