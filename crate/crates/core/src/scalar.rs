use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar the numeric core is generic over.
///
/// `f32` is the training dtype, `f64` backs gradient checks and metrics.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Dtype tag recorded in checkpoints so a file cannot be silently
    /// reloaded at a different precision.
    const NAME: &'static str;

    fn from_f64_(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn from_usize_(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("usize converts")
    }

    fn to_f64_(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}
impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Error function via the Abramowitz–Stegun 7.1.26 rational approximation
/// (max absolute error 1.5e-7). Used by the snow particle rasterizer.
pub fn erf<T: Scalar>(x: T) -> T {
    let v = x.to_f64_();
    let sign = if v < 0.0 { -1.0 } else { 1.0 };
    let v = v.abs();
    let t = 1.0 / (1.0 + 0.3275911 * v);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    T::from_f64_(sign * (1.0 - poly * (-v * v).exp()))
}

/// Standard normal CDF.
pub fn norm_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64_(0.5);
    let inv_sqrt2 = T::from_f64_(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + erf(x * inv_sqrt2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_points() {
        // Values from standard tables.
        assert!((erf(0.0f64)).abs() < 1e-6);
        assert!((erf(1.0f64) - 0.8427007929).abs() < 1e-6);
        assert!((erf(-1.0f64) + 0.8427007929).abs() < 1e-6);
        assert!((erf(3.0f64) - 0.9999779095).abs() < 1e-6);
    }

    #[test]
    fn norm_cdf_symmetry() {
        let x = 0.7f64;
        assert!((norm_cdf(x) + norm_cdf(-x) - 1.0).abs() < 1e-9);
    }
}
