//! Squared-exponential kernel, Gram matrices, and exact GP regression with
//! Gaussian noise: the additive-noise-model baseline.
//!
//! The kernel has unit signal variance; data are normalised upstream, which
//! is what justifies the missing amplitude.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg;
use crate::optim::{self, FitConfig, FitResult};
use crate::real::LN_TWO_PI;
use crate::util;
use crate::Result;

/// Squared exponential kernel k(x, x') = exp(-(x - x')^2 / (2 l^2)) with
/// l = exp(log_lengthscale).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeKernel {
    pub log_lengthscale: f64,
}

impl SeKernel {
    pub fn new(lengthscale: f64) -> Self {
        SeKernel {
            log_lengthscale: libm::log(lengthscale),
        }
    }

    pub fn lengthscale(&self) -> f64 {
        libm::exp(self.log_lengthscale)
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let l = self.lengthscale();
        let d = x - y;
        libm::exp(-d * d / (2.0 * l * l))
    }
}

/// Row-major Gram matrix, entry (i, j) = k(xs[i], ys[j]).
pub fn gram(kernel: &SeKernel, xs: &[f64], ys: &[f64]) -> Vec<f64> {
    let mut g = Vec::with_capacity(xs.len() * ys.len());
    for &x in xs {
        for &y in ys {
            g.push(kernel.eval(x, y));
        }
    }
    g
}

/// Exact GP regression model with Gaussian observation noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactGpModel {
    pub kernel: SeKernel,
    /// Noise variance is exp(noise_log_var).
    pub noise_log_var: f64,
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
}

impl ExactGpModel {
    pub fn noise_var(&self) -> f64 {
        libm::exp(self.noise_log_var)
    }

    fn check(&self) -> Result<()> {
        if self.train_x.len() != self.train_y.len() || self.train_x.is_empty() {
            return Err(Error::invalid("training vectors must have equal length >= 1"));
        }
        if !util::all_finite(&self.train_x) || !util::all_finite(&self.train_y) {
            return Err(Error::NonFinite("training data"));
        }
        if !self.kernel.log_lengthscale.is_finite() || !self.noise_log_var.is_finite() {
            return Err(Error::NonFinite("gp hyperparameters"));
        }
        Ok(())
    }

    fn noisy_gram(&self) -> Vec<f64> {
        let n = self.train_x.len();
        let mut a = gram(&self.kernel, &self.train_x, &self.train_x);
        let sn = self.noise_var();
        for i in 0..n {
            a[i * n + i] += sn;
        }
        a
    }
}

fn lml_from_chol(l: &[f64], n: usize, y: &[f64]) -> (f64, Vec<f64>) {
    let alpha = linalg::cholesky_solve(l, n, y);
    let quad: f64 = y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let lml = -0.5 * n as f64 * LN_TWO_PI - 0.5 * linalg::log_det_from_chol(l, n) - 0.5 * quad;
    (lml, alpha)
}

pub(crate) fn exact_log_marginal_with_jitter(model: &ExactGpModel, jitter: f64) -> Result<f64> {
    model.check()?;
    let n = model.train_x.len();
    let mut a = model.noisy_gram();
    for i in 0..n {
        a[i * n + i] += jitter;
    }
    linalg::cholesky_in_place(&mut a, n)?;
    Ok(lml_from_chol(&a, n, &model.train_y).0)
}

/// Exact log marginal likelihood
/// -(N/2) log 2pi - 1/2 log|K + s^2 I| - 1/2 y^T (K + s^2 I)^{-1} y,
/// via Cholesky with the jitter ladder.
pub fn exact_log_marginal(model: &ExactGpModel) -> Result<f64> {
    model.check()?;
    let n = model.train_x.len();
    let a = model.noisy_gram();
    let (l, _) = linalg::cholesky_jittered(&a, n)?;
    Ok(lml_from_chol(&l, n, &model.train_y).0)
}

/// Log marginal likelihood and its gradient with respect to
/// [log_lengthscale, noise_log_var], by the standard trace identity
/// d lml = 1/2 alpha^T dA alpha - 1/2 tr(A^{-1} dA).
pub fn lml_value_and_grad(model: &ExactGpModel) -> Result<(f64, [f64; 2])> {
    model.check()?;
    let n = model.train_x.len();
    let a = model.noisy_gram();
    let (l, _) = linalg::cholesky_jittered(&a, n)?;
    let (lml, alpha) = lml_from_chol(&l, n, &model.train_y);
    let a_inv = linalg::cholesky_inverse(&l, n);

    let ll = model.kernel.lengthscale();
    let sn = model.noise_var();
    let k = gram(&model.kernel, &model.train_x, &model.train_x);

    // dK/d(log l) entry = K_ij d_ij^2 / l^2
    let mut g_logl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = model.train_x[i] - model.train_x[j];
            let dk = k[i * n + j] * d * d / (ll * ll);
            g_logl += 0.5 * (alpha[i] * alpha[j] - a_inv[i * n + j]) * dk;
        }
    }
    // dA/d(log s^2) = s^2 I
    let mut g_noise = 0.0;
    for i in 0..n {
        g_noise += 0.5 * (alpha[i] * alpha[i] - a_inv[i * n + i]) * sn;
    }
    Ok((lml, [g_logl, g_noise]))
}

/// Posterior mean K_{*,x} (K + s^2 I)^{-1} y at the query points.
pub fn posterior_mean(model: &ExactGpModel, x_star: &[f64]) -> Result<Vec<f64>> {
    model.check()?;
    if !util::all_finite(x_star) {
        return Err(Error::NonFinite("query points"));
    }
    let n = model.train_x.len();
    let a = model.noisy_gram();
    let (l, _) = linalg::cholesky_jittered(&a, n)?;
    let alpha = linalg::cholesky_solve(&l, n, &model.train_y);
    Ok(x_star
        .iter()
        .map(|&xq| {
            model
                .train_x
                .iter()
                .zip(&alpha)
                .map(|(&xi, &ai)| model.kernel.eval(xq, xi) * ai)
                .sum()
        })
        .collect())
}

/// Fit the additive noise model by maximising the exact log marginal
/// likelihood over (log_lengthscale, noise_log_var) with Adam.
pub fn fit_anm(
    xs: &[f64],
    ys: &[f64],
    config: &FitConfig,
    rng_seed: u64,
) -> Result<(ExactGpModel, FitResult)> {
    if xs.len() != ys.len() || xs.len() < 5 {
        return Err(Error::invalid("fit_anm needs >= 5 paired points"));
    }
    if !util::all_finite(xs) || !util::all_finite(ys) {
        return Err(Error::NonFinite("fit_anm data"));
    }
    let n = xs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let z0: f64 = StandardNormal.sample(&mut rng);
    let z1: f64 = StandardNormal.sample(&mut rng);
    let init = vec![0.3 * z0, libm::log(0.5) + 0.3 * z1];

    let xs_v = xs.to_vec();
    let ys_v = ys.to_vec();
    let (theta, trace) = optim::minimize_with_grad(
        |p| {
            let model = ExactGpModel {
                kernel: SeKernel {
                    log_lengthscale: p[0],
                },
                noise_log_var: p[1],
                train_x: xs_v.clone(),
                train_y: ys_v.clone(),
            };
            let (lml, g) = lml_value_and_grad(&model)?;
            let inv_n = 1.0 / n as f64;
            Ok((-lml * inv_n, vec![-g[0] * inv_n, -g[1] * inv_n]))
        },
        init,
        config,
    )?;

    let model = ExactGpModel {
        kernel: SeKernel {
            log_lengthscale: theta[0],
        },
        noise_log_var: theta[1],
        train_x: xs.to_vec(),
        train_y: ys.to_vec(),
    };
    let lml = exact_log_marginal(&model)?;
    let mean = posterior_mean(&model, xs)?;
    let residuals: Vec<f64> = ys.iter().zip(&mean).map(|(y, m)| y - m).collect();
    Ok((
        model,
        FitResult {
            per_sample_loglik: lml / n as f64,
            residuals,
            trace,
        },
    ))
}
