//! Numeric abstraction shared by every module.
//!
//! All of the math in this crate is written once against [`Scalar`] and
//! instantiated for `f32` and `f64`. Random draws are always made in `f64`
//! and narrowed afterwards, so a given seed produces the same stream of
//! decisions regardless of the working precision.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point type usable throughout the crate: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or computed constant.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar widens to f64")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::c(n as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn logit<T: Scalar>(u: T) -> T {
    (u / (T::one() - u)).ln()
}

/// `x * sigmoid(x)`, the SiLU activation.
#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Derivative of [`silu`].
#[inline]
pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Formats a value with 17 significant digits so that it parses back to the
/// identical `f64`.
pub fn fmt_exact<T: Scalar>(x: T) -> String {
    format!("{:.16e}", x.f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_finite_at_extremes() {
        for z in [-800.0, -30.0, -1.0, 0.0, 1.0, 30.0, 800.0] {
            let s: f64 = sigmoid(z);
            assert!(s.is_finite());
            assert!((s + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
        assert_eq!(sigmoid(0.0f32), 0.5);
    }

    #[test]
    fn logit_inverts_sigmoid() {
        for z in [-10.0, -0.3, 0.0, 2.5, 12.0] {
            assert!((logit(sigmoid(z)) - z).abs() < 1e-9);
        }
    }

    #[test]
    fn silu_grad_matches_finite_difference() {
        let h = 1e-6;
        for x in [-4.0, -0.7, 0.0, 0.3, 5.0] {
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn exact_format_round_trips() {
        for x in [0.1f64, -1.0 / 3.0, 1e-300, 6.02214076e23, std::f64::consts::PI] {
            let back: f64 = fmt_exact(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
