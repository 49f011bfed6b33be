//! Estimation of bivariate structural causal models with spline-flow
//! likelihoods and (variational) Gaussian process regression.
//!
//! The crate fits additive-noise models `y = f(x) + e` and post-nonlinear
//! models `y = g(f(x) + e)` to scalar cause-effect data, where `f` is a GP
//! posterior mean, the noise density of `e` is a one-dimensional linear
//! rational spline flow, and `g` is a second monotone spline. Causal
//! direction is decided by residual independence (HSIC) or by comparing
//! per-direction log-likelihoods.
//!
//! The crate is `no_std` + `alloc`; file formats and the CLI live in the
//! companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod discovery;
pub mod error;
pub mod flow;
pub mod gp;
pub mod hsic;
pub mod linalg;
pub mod optim;
pub mod pnl;
pub mod quad;
pub mod svgp;

mod real;
mod special;
mod tape;
mod util;

pub use data::DataPair;
pub use discovery::{Criterion, Direction, ModelClass, Verdict};
pub use error::Error;
pub use flow::SplineFlow;
pub use gp::{ExactGpModel, SeKernel};
pub use optim::{FitConfig, FitResult};
pub use svgp::SvgpState;

/// Crate-wide result type.
pub type Result<T> = core::result::Result<T, Error>;
