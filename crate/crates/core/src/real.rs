//! Scalar abstraction shared by plain `f64` evaluation and tape-recorded
//! differentiable evaluation.
//!
//! Every model objective in this crate (flow likelihood, GP marginal
//! likelihood, ELBO) is written once, generically over [`Real`], and then
//! evaluated either with `f64` (prediction, criteria) or with tape variables
//! (gradient-based fitting). Branch decisions inside generic code always go
//! through [`Real::value`] so the recorded expression matches the branch
//! actually taken.

use core::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Concrete numeric value (used for branching, never for gradients).
    fn value(self) -> f64;

    /// A constant in the same evaluation context as `self`.
    fn lit(self, c: f64) -> Self;

    fn exp(self) -> Self;

    /// Natural log; argument must be positive.
    fn ln(self) -> Self;

    /// `ln |x|`, defined for either sign (derivative 1/x).
    fn ln_abs(self) -> Self;

    fn sqrt(self) -> Self;

    /// `max(self, c)`; gradient passes through only when not clamped.
    fn clamp_min(self, c: f64) -> Self;
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lit(self, c: f64) -> f64 {
        c
    }
    #[inline]
    fn exp(self) -> f64 {
        libm::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        libm::log(self)
    }
    #[inline]
    fn ln_abs(self) -> f64 {
        libm::log(libm::fabs(self))
    }
    #[inline]
    fn sqrt(self) -> f64 {
        libm::sqrt(self)
    }
    #[inline]
    fn clamp_min(self, c: f64) -> f64 {
        if self > c {
            self
        } else {
            c
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<R: Real>(x: R) -> R {
    let one = x.lit(1.0);
    if x.value() >= 0.0 {
        let e = (-x).exp();
        one / (one + e)
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Numerically stable `ln(1 + exp(x))`.
pub fn softplus<R: Real>(x: R) -> R {
    if x.value() > 30.0 {
        x
    } else if x.value() < -30.0 {
        x.exp()
    } else {
        (x.lit(1.0) + x.exp()).ln()
    }
}

/// ln(2 pi)
pub const LN_TWO_PI: f64 = 1.837877066409345483560659472811235279722;

/// log N(x; 0, var)
pub fn gaussian_log_pdf0<R: Real>(x: R, var: R) -> R {
    let half = x.lit(0.5);
    let log_two_pi = x.lit(LN_TWO_PI);
    -half * (log_two_pi + var.ln()) - x * x / (x.lit(2.0) * var)
}
