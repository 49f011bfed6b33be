//! Post-nonlinear likelihood: a second spline flow acts as g^{-1}, so
//! log p(y | f) = log p_e(g^{-1}(y) - f) + log |d g^{-1}/dy|.
//!
//! The stored spline is g^{-1} (its forward map), since that is what the
//! likelihood needs; g itself is recovered by flow inversion for sampling
//! and plotting. The fit starts from an identity g^{-1}, i.e. from the
//! additive noise model.

use alloc::vec::Vec;

use crate::error::Error;
use crate::optim::{FitConfig, FitResult};
use crate::svgp::{self, SvgpFitOptions, SvgpState};
use crate::Result;

/// An SVGP state whose post flow is present.
#[derive(Debug, Clone)]
pub struct PnlModel {
    pub state: SvgpState,
}

impl PnlModel {
    pub fn new(state: SvgpState) -> Result<Self> {
        if state.post_flow.is_none() {
            return Err(Error::invalid("PnlModel requires a post flow"));
        }
        Ok(PnlModel { state })
    }

    /// g^{-1}(y) and log |d g^{-1}/dy|.
    pub fn g_inverse(&self, y: f64) -> Result<(f64, f64)> {
        self.state.post_flow.as_ref().unwrap().forward(y)
    }

    /// g(s), by inverting the stored g^{-1} spline.
    pub fn g(&self, s: f64) -> Result<f64> {
        Ok(self.state.post_flow.as_ref().unwrap().inverse(s)?.0)
    }
}

/// log p(y | f) = log p_e(g^{-1}(y) - f) + log |d g^{-1}/dy| (y).
pub fn pnl_log_lik(model: &PnlModel, y: f64, f: f64) -> Result<f64> {
    if !y.is_finite() || !f.is_finite() {
        return Err(Error::NonFinite("pnl_log_lik input"));
    }
    let (gy, log_jac) = model.g_inverse(y)?;
    Ok(model.state.noise_flow.log_density(gy - f)? + log_jac)
}

/// Estimated residuals r_i = g^{-1}(y_i) - posterior mean at x_i.
pub fn residuals(model: &PnlModel, xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let mean = model.state.predict_mean(xs)?;
    ys.iter()
        .zip(&mean)
        .map(|(&y, &mu)| Ok(model.g_inverse(y)?.0 - mu))
        .collect()
}

/// Joint fit of the post-nonlinear model: the same bound and Adam loop as
/// the additive fit, with the post flow's parameters included.
pub fn fit_pnl(
    xs: &[f64],
    ys: &[f64],
    config: &FitConfig,
    rng_seed: u64,
) -> Result<(PnlModel, FitResult)> {
    let init = svgp::init_state(xs, config, rng_seed, true)?;
    let (state, fit) = svgp::fit_svgp_from(init, &SvgpFitOptions::default(), xs, ys, config)?;
    Ok((PnlModel { state }, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::SplineFlow;
    use crate::gp::SeKernel;
    use crate::util;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_state(post: Option<SplineFlow>) -> SvgpState {
        let mut noise = SplineFlow::identity(5, 10.0);
        noise.base_log_var = -1.2;
        SvgpState::new(
            vec![-1.0, 0.5],
            vec![0.3, -0.4],
            vec![0.3, 0.1, 0.2],
            SeKernel::new(1.0),
            noise,
            post,
        )
        .unwrap()
    }

    #[test]
    fn identity_post_reduces_to_additive_likelihood() {
        let state = small_state(Some(SplineFlow::identity(5, 10.0)));
        let model = PnlModel::new(state).unwrap();
        for (y, f) in [(0.3, 0.1), (-1.2, 0.4), (2.0, -0.5)] {
            let pnl = pnl_log_lik(&model, y, f).unwrap();
            let anm = model.state.noise_flow.log_density(y - f).unwrap();
            assert!((pnl - anm).abs() < 1e-9, "{pnl} vs {anm}");
        }
    }

    /// Spline that equals y/2 on the central range: middle bin [-8, 8] to
    /// [-4, 4] with derivative 1/2 at both interior knots. Equal endpoint
    /// derivatives make the rational piece exactly affine.
    fn halving_post() -> SplineFlow {
        let mut f = SplineFlow::identity(3, 10.0);
        let floor = 1e-3 * 20.0 / 3.0;
        let w: [f64; 3] = [2.0, 16.0, 2.0];
        let h: [f64; 3] = [6.0, 8.0, 6.0];
        for i in 0..3 {
            f.raw_widths[i] = (w[i] - floor).ln();
            f.raw_heights[i] = (h[i] - floor).ln();
        }
        let raw_half = (0.499f64.exp() - 1.0).ln(); // softplus^-1(0.5 - 1e-3)
        f.raw_derivs[1] = raw_half;
        f.raw_derivs[2] = raw_half;
        f
    }

    #[test]
    fn affine_change_of_variables_oracle() {
        let state = small_state(Some(halving_post()));
        let model = PnlModel::new(state).unwrap();
        // Verify the half-slope construction itself.
        for y in [-6.0, -2.0, 0.0, 1.5, 6.0] {
            let (gy, ld) = model.g_inverse(y).unwrap();
            assert!((gy - y / 2.0).abs() < 1e-10, "g_inv({y}) = {gy}");
            assert!((ld - 0.5f64.ln()).abs() < 1e-10);
        }
        for (y, f) in [(-5.0, 0.2), (0.7, -0.3), (4.0, 1.0)] {
            let pnl = pnl_log_lik(&model, y, f).unwrap();
            let expect = model.state.noise_flow.log_density(y / 2.0 - f).unwrap()
                + 0.5f64.ln();
            assert!((pnl - expect).abs() < 1e-10, "{pnl} vs {expect}");
        }
    }

    #[test]
    fn likelihood_normalises_over_y() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut post = SplineFlow::identity(7, 10.0);
        for v in post
            .raw_widths
            .iter_mut()
            .chain(post.raw_heights.iter_mut())
            .chain(post.raw_derivs.iter_mut())
            .chain(post.raw_lambdas.iter_mut())
        {
            *v += rng.random_range(-1.0..1.0);
        }
        let state = small_state(Some(post));
        let model = PnlModel::new(state).unwrap();
        for f in [-0.5, 0.0, 0.8] {
            let n = 200_000usize;
            let (a, b) = (-50.0, 50.0);
            let h = (b - a) / n as f64;
            let mut integral = 0.0;
            for i in 0..=n {
                let y = a + h * i as f64;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                integral += w * pnl_log_lik(&model, y, f).unwrap().exp();
            }
            integral *= h;
            assert!(
                (integral - 1.0).abs() < 1e-3,
                "f={f}: integral {integral}"
            );
        }
    }

    #[test]
    fn scale_non_identifiability_by_reparameterisation() {
        // Compose the learned g with an affine map and compensate in f and
        // the noise: g'(s) = g(a s + b), f' = (f - b)/a, p'(e) = a p(a e).
        // Every pnl_log_lik(y, f) must be unchanged.
        let state = small_state(Some(halving_post()));
        let model = PnlModel::new(state).unwrap();
        let (a, b) = (1.7, -0.4);
        for (y, f) in [(-4.0, 0.3), (0.2, -0.8), (3.0, 0.5)] {
            let direct = pnl_log_lik(&model, y, f).unwrap();
            // Reparameterised evaluation by explicit composition.
            let (t_y, log_dt) = model.g_inverse(y).unwrap();
            let g_inv_prime = (t_y - b) / a;
            let log_jac_prime = log_dt - a.ln();
            let f_prime = (f - b) / a;
            let e_prime = g_inv_prime - f_prime; // = (T(y) - f)/a
            let log_noise_prime = model
                .state
                .noise_flow
                .log_density(a * e_prime)
                .unwrap()
                + a.ln();
            let reparam = log_noise_prime + log_jac_prime;
            assert!((direct - reparam).abs() < 1e-8, "{direct} vs {reparam}");
        }
    }

    #[test]
    fn frozen_identity_post_matches_plain_svgp_step_for_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 40;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (x * 1.2).sin() + 0.3 * e
            })
            .collect();
        let cfg = FitConfig {
            steps: 60,
            num_inducing: 4,
            flow_bins: 5,
            ..FitConfig::default()
        };
        let (_, plain) = svgp::fit_svgp(&xs, &ys, &cfg, 7).unwrap();
        let init = svgp::init_state(&xs, &cfg, 7, true).unwrap();
        let opts = SvgpFitOptions {
            train_post_flow: false,
            ..SvgpFitOptions::default()
        };
        let (_, frozen) = svgp::fit_svgp_from(init, &opts, &xs, &ys, &cfg).unwrap();
        assert_eq!(plain.trace.len(), frozen.trace.len());
        for (i, (a, b)) in plain.trace.iter().zip(&frozen.trace).enumerate() {
            assert!(
                (a - b).abs() < 1e-9,
                "step {i}: plain {a} vs frozen-post {b}"
            );
        }
    }

    #[test]
    fn noiseless_monotone_data_leaves_tiny_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 120;
        let raw_x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let raw_y: Vec<f64> = raw_x.iter().map(|x| (x + 3.0).ln()).collect();
        // Normalise both variables.
        let (mx, sx) = (util::mean(&raw_x), util::variance(&raw_x).sqrt());
        let (my, sy) = (util::mean(&raw_y), util::variance(&raw_y).sqrt());
        let xs: Vec<f64> = raw_x.iter().map(|v| (v - mx) / sx).collect();
        let ys: Vec<f64> = raw_y.iter().map(|v| (v - my) / sy).collect();
        let cfg = FitConfig {
            steps: 600,
            num_inducing: 10,
            flow_bins: 11,
            ..FitConfig::default()
        };
        let (model, fit) = fit_pnl(&xs, &ys, &cfg, 5).unwrap();
        let r = residuals(&model, &xs, &ys).unwrap();
        assert_eq!(r, fit.residuals);
        let var = util::variance(&r);
        assert!(var < 0.05, "residual variance {var}");
        // The latent scale is only identified up to an affine map, so the
        // residual mean can drift a little in the noiseless extreme.
        let rmean = util::mean(&r);
        assert!(rmean.abs() < 0.25, "residual mean {rmean}");
    }

    #[test]
    fn identity_generating_process_keeps_g_near_affine() {
        // Pure additive data: the learned g should stay close to affine
        // over the central data range after removing the best affine fit.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 150;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x.sin() + 0.3 * e
            })
            .collect();
        let cfg = FitConfig {
            steps: 600,
            num_inducing: 10,
            flow_bins: 11,
            ..FitConfig::default()
        };
        let (model, _) = fit_pnl(&xs, &ys, &cfg, 9).unwrap();
        // Sample g over the central range of s = g^{-1}(y).
        let lo_y = util::quantile(&ys, 0.1);
        let hi_y = util::quantile(&ys, 0.9);
        let s_lo = model.g_inverse(lo_y).unwrap().0;
        let s_hi = model.g_inverse(hi_y).unwrap().0;
        let grid: Vec<f64> = (0..60)
            .map(|i| s_lo + (s_hi - s_lo) * i as f64 / 59.0)
            .collect();
        let gvals: Vec<f64> = grid.iter().map(|&s| model.g(s).unwrap()).collect();
        // Least-squares affine fit.
        let sm = util::mean(&grid);
        let gm = util::mean(&gvals);
        let cov: f64 = grid
            .iter()
            .zip(&gvals)
            .map(|(s, g)| (s - sm) * (g - gm))
            .sum();
        let var: f64 = grid.iter().map(|s| (s - sm) * (s - sm)).sum();
        let slope = cov / var;
        let icept = gm - slope * sm;
        let sup: f64 = grid
            .iter()
            .zip(&gvals)
            .map(|(s, g)| (g - (slope * s + icept)).abs())
            .fold(0.0, f64::max);
        // Scale-free comparison: deviation relative to the g range.
        let range = gvals.last().unwrap() - gvals.first().unwrap();
        assert!(
            sup / range.abs() < 0.1,
            "sup deviation {sup} over range {range}"
        );
    }
}
