//! Sparse variational GP regression with a flow-parametrised additive-noise
//! likelihood: ELBO, analytic KL, Gauss-Hermite expectations, predictive
//! distribution, joint Adam fit.
//!
//! The bound is
//!   sum_i E_{q(f_i)}[log p(y_i | f_i)] - KL(q(u) || p(u)),
//! with q(u) = N(m, S), S = L L^T, and q(f_i) the Gaussian marginal obtained
//! by pushing q(u) through p(f_i | u). The KL uses Tr(K_zz^{-1} S), the
//! valid form for N(m, S) against N(0, K_zz), and is verified against a
//! Monte-Carlo oracle in the tests.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::flow::{FlowRaw, SplineFlow, SplineTransform};
use crate::gp::SeKernel;
use crate::linalg::{self, JITTER_LADDER};
use crate::optim::{self, FitConfig, FitResult, TapeLoss};
use crate::quad::GaussHermite;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::util;
use crate::Result;

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const SQRT_PI: f64 = 1.7724538509055160272981674833411451827975;

/// State of one sparse variational GP with spline-flow noise and an
/// optional second flow acting as the inverse post-nonlinearity.
#[derive(Debug, Clone)]
pub struct SvgpState {
    /// Inducing inputs, length M.
    pub z: Vec<f64>,
    /// Variational mean, length M.
    pub m: Vec<f64>,
    /// Lower Cholesky factor of S, packed row-major, length M(M+1)/2,
    /// strictly positive diagonal.
    chol_s: Vec<f64>,
    pub kernel: SeKernel,
    /// Density of the additive noise.
    pub noise_flow: SplineFlow,
    /// When present, its forward map is g^{-1} (see the pnl module).
    pub post_flow: Option<SplineFlow>,
}

pub(crate) fn tri_len(m: usize) -> usize {
    m * (m + 1) / 2
}

pub(crate) fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

impl SvgpState {
    pub fn new(
        z: Vec<f64>,
        m: Vec<f64>,
        chol_s: Vec<f64>,
        kernel: SeKernel,
        noise_flow: SplineFlow,
        post_flow: Option<SplineFlow>,
    ) -> Result<Self> {
        let mm = z.len();
        if mm == 0 || m.len() != mm || chol_s.len() != tri_len(mm) {
            return Err(Error::invalid("inconsistent svgp dimensions"));
        }
        if !util::all_finite(&z) || !util::all_finite(&m) || !util::all_finite(&chol_s) {
            return Err(Error::NonFinite("svgp state"));
        }
        for i in 0..mm {
            if !(chol_s[tri_index(i, i)] > 0.0) {
                return Err(Error::invalid("chol_S diagonal must be positive"));
            }
        }
        Ok(SvgpState {
            z,
            m,
            chol_s,
            kernel,
            noise_flow,
            post_flow,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.z.len()
    }

    /// Packed lower Cholesky factor of S (row-major, diagonal positive).
    pub fn chol_s(&self) -> &[f64] {
        &self.chol_s
    }

    /// Number of scalars in the packed parameter vector.
    pub fn num_params(&self) -> usize {
        let m = self.num_inducing();
        let flow = self.noise_flow.num_params();
        let post = self.post_flow.as_ref().map_or(0, |f| f.num_params());
        1 + 2 * m + tri_len(m) + flow + post
    }

    /// Flatten to the unconstrained parameter vector:
    /// [log_lengthscale, z, m, chol_S raw (ln on the diagonal), noise flow,
    /// post flow]. `unpack` inverts it.
    pub fn pack(&self) -> Vec<f64> {
        let mm = self.num_inducing();
        let mut p = Vec::with_capacity(self.num_params());
        p.push(self.kernel.log_lengthscale);
        p.extend_from_slice(&self.z);
        p.extend_from_slice(&self.m);
        for i in 0..mm {
            for j in 0..=i {
                let v = self.chol_s[tri_index(i, j)];
                p.push(if i == j { libm::log(v) } else { v });
            }
        }
        p.extend_from_slice(&self.noise_flow.pack());
        if let Some(pf) = &self.post_flow {
            p.extend_from_slice(&pf.pack());
        }
        p
    }

    /// Rebuild a state of this shape from a packed vector.
    pub fn unpack(&self, packed: &[f64]) -> SvgpState {
        assert_eq!(packed.len(), self.num_params());
        let mm = self.num_inducing();
        let mut pos = 0usize;
        let mut take = |n: usize| {
            let s = &packed[pos..pos + n];
            pos += n;
            s
        };
        let log_lengthscale = take(1)[0];
        let z = take(mm).to_vec();
        let m = take(mm).to_vec();
        let mut chol_s = vec![0.0; tri_len(mm)];
        {
            let raw = take(tri_len(mm));
            let mut r = 0usize;
            for i in 0..mm {
                for j in 0..=i {
                    chol_s[tri_index(i, j)] = if i == j {
                        libm::exp(raw[r])
                    } else {
                        raw[r]
                    };
                    r += 1;
                }
            }
        }
        let noise_flow = self.noise_flow.unpack(take(self.noise_flow.num_params()));
        let post_flow = self
            .post_flow
            .as_ref()
            .map(|pf| pf.unpack(take(pf.num_params())));
        SvgpState {
            z,
            m,
            chol_s,
            kernel: SeKernel { log_lengthscale },
            noise_flow,
            post_flow,
        }
    }

    fn params_f64(&self) -> SvgpParamsG<f64> {
        let mm = self.num_inducing();
        let mut chol_full = vec![0.0; mm * mm];
        for i in 0..mm {
            for j in 0..=i {
                chol_full[i * mm + j] = self.chol_s[tri_index(i, j)];
            }
        }
        SvgpParamsG {
            log_lengthscale: self.kernel.log_lengthscale,
            z: self.z.clone(),
            m: self.m.clone(),
            chol_s_full: chol_full,
            noise: self.noise_flow.transform(),
            post: self.post_flow.as_ref().map(|f| f.transform()),
        }
    }

    /// Marginal means and variances of q(f) at the query points.
    pub fn q_f_marginals(&self, xs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if !util::all_finite(xs) {
            return Err(Error::NonFinite("query points"));
        }
        let p = self.params_f64();
        let l = factor_kzz(&p)?;
        let mut means = Vec::with_capacity(xs.len());
        let mut vars = Vec::with_capacity(xs.len());
        for &x in xs {
            let (mu, var) = marginal_at(&p, &l, x);
            means.push(mu);
            vars.push(var);
        }
        Ok((means, vars))
    }

    /// Gauss-Hermite estimate of sum_i E_{q(f_i)}[log p(y_i | f_i)].
    pub fn expected_log_lik(&self, xs: &[f64], ys: &[f64], quad_nodes: usize) -> Result<f64> {
        if quad_nodes < 2 {
            return Err(Error::invalid("quad_nodes must be >= 2"));
        }
        let p = self.params_f64();
        let l = factor_kzz(&p)?;
        let gh = GaussHermite::new(quad_nodes);
        Ok(expected_log_lik_g(&p, &l, xs, ys, &gh))
    }

    /// Analytic KL(q(u) || p(u)).
    pub fn kl_term(&self) -> Result<f64> {
        let p = self.params_f64();
        let l = factor_kzz(&p)?;
        Ok(kl_g(&p, &l))
    }

    /// Evidence lower bound: expected log-likelihood minus KL.
    pub fn elbo(&self, xs: &[f64], ys: &[f64], quad_nodes: usize) -> Result<f64> {
        if xs.len() != ys.len() {
            return Err(Error::invalid("xs and ys must have equal length"));
        }
        let p = self.params_f64();
        let l = factor_kzz(&p)?;
        let gh = GaussHermite::new(quad_nodes);
        Ok(expected_log_lik_g(&p, &l, xs, ys, &gh) - kl_g(&p, &l))
    }

    /// Posterior mean of the latent f at the query points.
    pub fn predict_mean(&self, x_star: &[f64]) -> Result<Vec<f64>> {
        Ok(self.q_f_marginals(x_star)?.0)
    }

    /// Predictive mean/variance of f at the query points plus `n_samples`
    /// rows of replicated observations y* = g(f* + e), e ~ noise flow.
    pub fn predict(
        &self,
        x_star: &[f64],
        n_samples: usize,
        rng_seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
        let (means, vars) = self.q_f_marginals(x_star)?;
        let noise_t = self.noise_flow.transform();
        let post_t = self.post_flow.as_ref().map(|f| f.transform());
        let sigma = libm::sqrt(self.noise_flow.sigma2());
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut draws = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut row = Vec::with_capacity(x_star.len());
            for i in 0..x_star.len() {
                let zf: f64 = StandardNormal.sample(&mut rng);
                let zn: f64 = StandardNormal.sample(&mut rng);
                let f = means[i] + libm::sqrt(vars[i]) * zf;
                let eps = noise_t.forward_at(sigma * zn).0;
                let s = f + eps;
                let y = match &post_t {
                    // The stored forward map is g^{-1}, so g is its inverse.
                    Some(t) => t.inverse_at(s).0,
                    None => s,
                };
                row.push(y);
            }
            draws.push(row);
        }
        Ok((means, vars, draws))
    }
}

#[derive(Serialize, Deserialize)]
struct SvgpStateWire {
    z: Vec<f64>,
    m: Vec<f64>,
    /// Full M x M lower-triangular matrix, row-major.
    #[serde(rename = "chol_S")]
    chol_s: Vec<f64>,
    kernel: SeKernel,
    noise_flow: SplineFlow,
    post_flow: Option<SplineFlow>,
}

impl Serialize for SvgpState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        let mm = self.num_inducing();
        let mut full = vec![0.0; mm * mm];
        for i in 0..mm {
            for j in 0..=i {
                full[i * mm + j] = self.chol_s[tri_index(i, j)];
            }
        }
        SvgpStateWire {
            z: self.z.clone(),
            m: self.m.clone(),
            chol_s: full,
            kernel: self.kernel.clone(),
            noise_flow: self.noise_flow.clone(),
            post_flow: self.post_flow.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SvgpState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let wire = SvgpStateWire::deserialize(d)?;
        let mm = wire.z.len();
        if wire.chol_s.len() != mm * mm || wire.m.len() != mm {
            return Err(serde::de::Error::custom("inconsistent svgp dimensions"));
        }
        let mut packed = vec![0.0; tri_len(mm)];
        for i in 0..mm {
            for j in 0..=i {
                packed[tri_index(i, j)] = wire.chol_s[i * mm + j];
            }
        }
        SvgpState::new(
            wire.z,
            wire.m,
            packed,
            wire.kernel,
            wire.noise_flow,
            wire.post_flow,
        )
        .map_err(serde::de::Error::custom)
    }
}

/// Which parameter groups a fit may move.
#[derive(Debug, Clone, Copy)]
pub struct SvgpFitOptions {
    pub train_kernel: bool,
    pub train_inducing: bool,
    /// m and chol_S.
    pub train_variational: bool,
    /// The spline part of the noise flow (widths/heights/derivs/lambdas).
    pub train_noise_transform: bool,
    /// The noise flow's base log-variance.
    pub train_noise_base_var: bool,
    pub train_post_flow: bool,
}

impl Default for SvgpFitOptions {
    fn default() -> Self {
        SvgpFitOptions {
            train_kernel: true,
            train_inducing: true,
            train_variational: true,
            train_noise_transform: true,
            train_noise_base_var: true,
            train_post_flow: true,
        }
    }
}

impl SvgpFitOptions {
    /// Per-scalar trainability mask matching `SvgpState::pack` order.
    fn mask(&self, state: &SvgpState) -> Vec<bool> {
        let mm = state.num_inducing();
        let mut mask = Vec::with_capacity(state.num_params());
        mask.push(self.train_kernel);
        mask.extend(core::iter::repeat(self.train_inducing).take(mm));
        mask.extend(core::iter::repeat(self.train_variational).take(mm + tri_len(mm)));
        let k = state.noise_flow.num_bins;
        mask.extend(core::iter::repeat(self.train_noise_transform).take(4 * k + 1));
        mask.push(self.train_noise_base_var);
        if let Some(pf) = &state.post_flow {
            let kp = pf.num_bins;
            mask.extend(core::iter::repeat(self.train_post_flow).take(4 * kp + 1));
            // The post flow acts only as a transform; its base density is
            // unused, so its variance never trains.
            mask.push(false);
        }
        mask
    }
}

// ---------------------------------------------------------------------------
// Generic ELBO machinery shared by f64 evaluation and the tape.
// ---------------------------------------------------------------------------

pub(crate) struct SvgpParamsG<R> {
    pub log_lengthscale: R,
    pub z: Vec<R>,
    pub m: Vec<R>,
    /// Full M x M lower-triangular factor of S (upper entries zero).
    pub chol_s_full: Vec<R>,
    pub noise: SplineTransform<R>,
    pub post: Option<SplineTransform<R>>,
}

impl<R: Real> SvgpParamsG<R> {
    /// Read a full packed vector (same order as `SvgpState::pack`).
    pub fn from_slice(
        vals: &[R],
        num_inducing: usize,
        noise_bins: usize,
        noise_bound: f64,
        post: Option<(usize, f64)>,
    ) -> Self {
        let mm = num_inducing;
        let mut pos = 0usize;
        let log_lengthscale = vals[pos];
        pos += 1;
        let z = vals[pos..pos + mm].to_vec();
        pos += mm;
        let m = vals[pos..pos + mm].to_vec();
        pos += mm;
        let mut chol_full = vec![log_lengthscale.lit(0.0); mm * mm];
        for i in 0..mm {
            for j in 0..=i {
                let v = vals[pos];
                pos += 1;
                chol_full[i * mm + j] = if i == j { v.exp() } else { v };
            }
        }
        let (noise_raw, rest) = FlowRaw::split(&vals[pos..], noise_bins);
        let noise = SplineTransform::from_raw(noise_bins, noise_bound, &noise_raw);
        let post = post.map(|(kp, bp)| {
            let (post_raw, _) = FlowRaw::split(rest, kp);
            SplineTransform::from_raw(kp, bp, &post_raw)
        });
        SvgpParamsG {
            log_lengthscale,
            z,
            m,
            chol_s_full: chol_full,
            noise,
            post,
        }
    }
}

/// K_zz Cholesky factor with the jitter ladder. A failed attempt leaves
/// disconnected nodes on a tape, which backward sweeps ignore.
pub(crate) fn factor_kzz<R: Real>(p: &SvgpParamsG<R>) -> Result<Vec<R>> {
    let mm = p.z.len();
    let l = p.log_lengthscale.exp();
    let two_l2 = p.log_lengthscale.lit(2.0) * l * l;
    let mut kzz = vec![p.log_lengthscale.lit(0.0); mm * mm];
    for i in 0..mm {
        for j in 0..=i {
            let d = p.z[i] - p.z[j];
            let v = (-(d * d) / two_l2).exp();
            kzz[i * mm + j] = v;
            kzz[j * mm + i] = v;
        }
    }
    for &jitter in &JITTER_LADDER {
        let mut a = kzz.clone();
        for i in 0..mm {
            a[i * mm + i] = a[i * mm + i] + p.log_lengthscale.lit(jitter);
        }
        if let Ok(l) = linalg::cholesky_g(&a, mm) {
            return Ok(l);
        }
    }
    Err(Error::IllConditioned)
}

/// Marginal mean and variance of q(f) at one query point:
/// mean = k_iz K_zz^{-1} m,
/// var  = k_ii - k_iz K_zz^{-1} k_zi + k_iz K_zz^{-1} S K_zz^{-1} k_zi.
pub(crate) fn marginal_at<R: Real>(p: &SvgpParamsG<R>, l_kzz: &[R], x: f64) -> (R, R) {
    let mm = p.z.len();
    let l = p.log_lengthscale.exp();
    let two_l2 = p.log_lengthscale.lit(2.0) * l * l;
    let xl = p.log_lengthscale.lit(x);
    let kzi: Vec<R> = p
        .z
        .iter()
        .map(|&zj| {
            let d = zj - xl;
            (-(d * d) / two_l2).exp()
        })
        .collect();
    let w = linalg::solve_lower_g(l_kzz, mm, &kzi);
    let u = linalg::solve_lower_transpose_g(l_kzz, mm, &w);
    let mut mean = p.log_lengthscale.lit(0.0);
    for j in 0..mm {
        mean = mean + u[j] * p.m[j];
    }
    let mut var = p.log_lengthscale.lit(1.0);
    for j in 0..mm {
        var = var - w[j] * w[j];
    }
    // + || L_S^T u ||^2
    for i in 0..mm {
        let mut t = p.log_lengthscale.lit(0.0);
        for j in i..mm {
            t = t + p.chol_s_full[j * mm + i] * u[j];
        }
        var = var + t * t;
    }
    (mean, var.clamp_min(1e-12))
}

/// sum_i (1/sqrt(pi)) sum_k w_k log p(y_i | mu_i + sqrt(2) s_i t_k).
pub(crate) fn expected_log_lik_g<R: Real>(
    p: &SvgpParamsG<R>,
    l_kzz: &[R],
    xs: &[f64],
    ys: &[f64],
    gh: &GaussHermite,
) -> R {
    let proto = p.log_lengthscale;
    let sqrt2 = proto.lit(SQRT_2);
    let mut total = proto.lit(0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (mu, var) = marginal_at(p, l_kzz, x);
        let sd = var.sqrt();
        // Under the post-nonlinear likelihood the residual argument is
        // g^{-1}(y) - f and the Jacobian of g^{-1} enters once per point.
        let (target, jac) = match &p.post {
            Some(post) => {
                let (gy, ld) = post.forward_at(proto.lit(y));
                (gy, Some(ld))
            }
            None => (proto.lit(y), None),
        };
        let mut point = proto.lit(0.0);
        for (t, wq) in gh.nodes.iter().zip(&gh.weights) {
            let f = mu + sqrt2 * sd * proto.lit(*t);
            let ll = p.noise.log_density_at(target - f);
            point = point + proto.lit(wq / SQRT_PI) * ll;
        }
        if let Some(ld) = jac {
            point = point + ld;
        }
        total = total + point;
    }
    total
}

/// KL(N(m, S) || N(0, K_zz)) =
/// (Tr(K_zz^{-1} S) - M + log|K_zz| - log|S| + m^T K_zz^{-1} m) / 2.
pub(crate) fn kl_g<R: Real>(p: &SvgpParamsG<R>, l_kzz: &[R]) -> R {
    let mm = p.z.len();
    let proto = p.log_lengthscale;
    // Tr(K_zz^{-1} S) = ||L^{-1} L_S||_F^2, column by column.
    let mut trace = proto.lit(0.0);
    let mut col = vec![proto.lit(0.0); mm];
    for j in 0..mm {
        for i in 0..mm {
            col[i] = p.chol_s_full[i * mm + j];
        }
        let sol = linalg::solve_lower_g(l_kzz, mm, &col);
        for v in sol {
            trace = trace + v * v;
        }
    }
    let mut log_det_kzz = proto.lit(0.0);
    let mut log_det_s = proto.lit(0.0);
    for i in 0..mm {
        log_det_kzz = log_det_kzz + l_kzz[i * mm + i].ln();
        log_det_s = log_det_s + p.chol_s_full[i * mm + i].ln();
    }
    let vm = linalg::solve_lower_g(l_kzz, mm, &p.m);
    let mut quad = proto.lit(0.0);
    for v in vm {
        quad = quad + v * v;
    }
    let two = proto.lit(2.0);
    let half = proto.lit(0.5);
    half * (trace - proto.lit(mm as f64) + two * log_det_kzz - two * log_det_s + quad)
}

/// Negative mean ELBO as a tape loss over the trainable subvector.
pub struct SvgpObjective<'a> {
    xs: &'a [f64],
    ys: &'a [f64],
    gh: GaussHermite,
    full_values: Vec<f64>,
    mask: Vec<bool>,
    num_inducing: usize,
    noise_bins: usize,
    noise_bound: f64,
    post_shape: Option<(usize, f64)>,
}

impl<'a> SvgpObjective<'a> {
    pub fn new(
        template: &SvgpState,
        opts: &SvgpFitOptions,
        xs: &'a [f64],
        ys: &'a [f64],
        quad_nodes: usize,
    ) -> Self {
        SvgpObjective {
            xs,
            ys,
            gh: GaussHermite::new(quad_nodes),
            full_values: template.pack(),
            mask: opts.mask(template),
            num_inducing: template.num_inducing(),
            noise_bins: template.noise_flow.num_bins,
            noise_bound: template.noise_flow.bound,
            post_shape: template.post_flow.as_ref().map(|f| (f.num_bins, f.bound)),
        }
    }

    /// Trainable entries of the template, in pack order.
    pub fn initial_trainable(&self) -> Vec<f64> {
        self.full_values
            .iter()
            .zip(&self.mask)
            .filter(|(_, &t)| t)
            .map(|(&v, _)| v)
            .collect()
    }

    /// Write optimised trainable entries back into a full packed vector.
    pub fn merge(&self, trainable: &[f64]) -> Vec<f64> {
        let mut full = self.full_values.clone();
        let mut it = trainable.iter();
        for (slot, &t) in full.iter_mut().zip(&self.mask) {
            if t {
                *slot = *it.next().unwrap();
            }
        }
        full
    }

    fn mask_ref(&self) -> &[bool] {
        &self.mask
    }
}

impl<'a> TapeLoss for SvgpObjective<'a> {
    fn build<'t>(&mut self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        let mut vars: Vec<Var<'t>> = Vec::with_capacity(self.full_values.len());
        let mut it = params.iter();
        for (&v, &trainable) in self.full_values.iter().zip(&self.mask) {
            if trainable {
                vars.push(*it.next().unwrap());
            } else {
                vars.push(tape.leaf(v));
            }
        }
        let p = SvgpParamsG::from_slice(
            &vars,
            self.num_inducing,
            self.noise_bins,
            self.noise_bound,
            self.post_shape,
        );
        let l = factor_kzz(&p)?;
        let ell = expected_log_lik_g(&p, &l, self.xs, self.ys, &self.gh);
        let kl = kl_g(&p, &l);
        let n = tape.leaf(self.xs.len() as f64);
        Ok(-((ell - kl) / n))
    }
}

/// ELBO at a packed full parameter vector, plain f64; the finite-difference
/// oracle for the ELBO gradient runs against this.
pub fn elbo_at_packed(
    template: &SvgpState,
    packed: &[f64],
    xs: &[f64],
    ys: &[f64],
    quad_nodes: usize,
) -> Result<f64> {
    template.unpack(packed).elbo(xs, ys, quad_nodes)
}

/// ELBO value and gradient with respect to the full packed vector (the post
/// flow's unused base variance gets gradient zero).
pub fn elbo_value_and_grad(
    state: &SvgpState,
    xs: &[f64],
    ys: &[f64],
    quad_nodes: usize,
) -> Result<(f64, Vec<f64>)> {
    let opts = SvgpFitOptions::default();
    let mut obj = SvgpObjective::new(state, &opts, xs, ys, quad_nodes);
    let init = obj.initial_trainable();
    let (neg, g) = optim::tape_value_and_grad(&mut obj, &init)?;
    let n = xs.len() as f64;
    let mut full = Vec::with_capacity(state.num_params());
    let mut it = g.iter();
    for &t in obj.mask_ref() {
        full.push(if t { -it.next().unwrap() * n } else { 0.0 });
    }
    Ok((-neg * n, full))
}

/// Deterministic-plus-seeded initial state: inducing inputs at jittered
/// quantiles of xs, zero mean, 0.1 I covariance factor, identity flows.
pub fn init_state(
    xs: &[f64],
    config: &FitConfig,
    rng_seed: u64,
    with_post: bool,
) -> Result<SvgpState> {
    let mm = config.num_inducing;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut z: Vec<f64> = if mm == 1 {
        vec![util::median(xs)]
    } else {
        (0..mm)
            .map(|i| util::quantile(xs, i as f64 / (mm - 1) as f64))
            .collect()
    };
    let span = (util::quantile(xs, 1.0) - util::quantile(xs, 0.0)).max(1e-3);
    let spacing = span / mm as f64;
    for zi in z.iter_mut() {
        let u: f64 = StandardNormal.sample(&mut rng);
        *zi += 0.1 * spacing * u;
    }
    z.sort_unstable_by(f64::total_cmp);
    for i in 1..mm {
        if z[i] - z[i - 1] < 1e-6 {
            z[i] = z[i - 1] + 1e-6;
        }
    }

    let zk: f64 = StandardNormal.sample(&mut rng);
    let kernel = SeKernel {
        log_lengthscale: 0.3 * zk,
    };

    let mut chol_s = vec![0.0; tri_len(mm)];
    for i in 0..mm {
        chol_s[tri_index(i, i)] = 0.1;
    }

    let mut noise_flow = SplineFlow::identity(config.flow_bins, config.flow_bound);
    {
        let mut packed = noise_flow.pack();
        for v in packed.iter_mut() {
            let u: f64 = StandardNormal.sample(&mut rng);
            *v += 0.01 * u;
        }
        noise_flow = noise_flow.unpack(&packed);
    }
    let post_flow = with_post.then(|| SplineFlow::identity(config.flow_bins, config.flow_bound));

    SvgpState::new(z, vec![0.0; mm], chol_s, kernel, noise_flow, post_flow)
}

/// Fit from an explicit initial state under the given trainability options.
pub fn fit_svgp_from(
    init: SvgpState,
    opts: &SvgpFitOptions,
    xs: &[f64],
    ys: &[f64],
    config: &FitConfig,
) -> Result<(SvgpState, FitResult)> {
    if xs.len() != ys.len() {
        return Err(Error::invalid("xs and ys must have equal length"));
    }
    if xs.len() < init.num_inducing() {
        return Err(Error::invalid(
            "need at least as many points as inducing inputs",
        ));
    }
    if !util::all_finite(xs) || !util::all_finite(ys) {
        return Err(Error::NonFinite("fit data"));
    }
    let mut obj = SvgpObjective::new(&init, opts, xs, ys, config.quad_nodes);
    let start = obj.initial_trainable();
    let (trained, trace) = optim::minimize_tape(&mut obj, start, config)?;
    let state = init.unpack(&obj.merge(&trained));

    let n = xs.len() as f64;
    let elbo = state.elbo(xs, ys, config.quad_nodes)?;
    let mean = state.predict_mean(xs)?;
    let post_t = state.post_flow.as_ref().map(|f| f.transform());
    let residuals: Vec<f64> = ys
        .iter()
        .zip(&mean)
        .map(|(&y, &mu)| match &post_t {
            Some(t) => t.forward_at(y).0 - mu,
            None => y - mu,
        })
        .collect();
    Ok((
        state,
        FitResult {
            per_sample_loglik: elbo / n,
            residuals,
            trace,
        },
    ))
}

/// Joint fit of all SVGP parameters on (xs, ys) with the default init.
pub fn fit_svgp(
    xs: &[f64],
    ys: &[f64],
    config: &FitConfig,
    rng_seed: u64,
) -> Result<(SvgpState, FitResult)> {
    let init = init_state(xs, config, rng_seed, false)?;
    fit_svgp_from(init, &SvgpFitOptions::default(), xs, ys, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{self, ExactGpModel};
    use rand::Rng;

    fn identity_flow(k: usize) -> SplineFlow {
        SplineFlow::identity(k, 10.0)
    }

    /// State with z = xs, m = 0, S = K_zz: q(f) must recover the prior.
    fn prior_matching_state(xs: &[f64]) -> SvgpState {
        let mm = xs.len();
        let kernel = SeKernel::new(1.0);
        let kzz = gp::gram(&kernel, xs, xs);
        let (l, _) = linalg::cholesky_jittered(&kzz, mm).unwrap();
        let mut packed = vec![0.0; tri_len(mm)];
        for i in 0..mm {
            for j in 0..=i {
                packed[tri_index(i, j)] = l[i * mm + j];
            }
        }
        SvgpState::new(
            xs.to_vec(),
            vec![0.0; mm],
            packed,
            kernel,
            identity_flow(5),
            None,
        )
        .unwrap()
    }

    #[test]
    fn prior_recovered_when_q_matches_p() {
        let xs = [-1.0, -0.2, 0.4, 1.3, 2.0];
        let state = prior_matching_state(&xs);
        let (means, vars) = state.q_f_marginals(&xs).unwrap();
        for i in 0..xs.len() {
            assert!(means[i].abs() < 1e-8);
            assert!((vars[i] - 1.0).abs() < 1e-6, "var {}", vars[i]);
        }
        let kl = state.kl_term().unwrap();
        assert!(kl.abs() < 1e-9, "kl {kl}");
    }

    #[test]
    fn far_inducing_point_reverts_to_prior() {
        let state = SvgpState::new(
            vec![100.0],
            vec![3.0],
            vec![0.5],
            SeKernel::new(1.0),
            identity_flow(5),
            None,
        )
        .unwrap();
        let (means, vars) = state.q_f_marginals(&[0.0]).unwrap();
        assert!(means[0].abs() < 1e-6);
        assert!((vars[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn marginals_match_monte_carlo() {
        // Push q(u) through p(f|u) by sampling and compare moments.
        let mm = 3;
        let z = vec![-1.0, 0.3, 1.5];
        let m = vec![0.4, -0.2, 0.9];
        let chol = vec![0.6, 0.2, 0.5, -0.1, 0.3, 0.4];
        let kernel = SeKernel::new(0.9);
        let state = SvgpState::new(
            z.clone(),
            m.clone(),
            chol.clone(),
            kernel.clone(),
            identity_flow(5),
            None,
        )
        .unwrap();
        let queries = [-0.5, 0.8];
        let (means, vars) = state.q_f_marginals(&queries).unwrap();

        let kzz = gp::gram(&kernel, &z, &z);
        let (l, _) = linalg::cholesky_jittered(&kzz, mm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for (qi, &xq) in queries.iter().enumerate() {
            let kzi: Vec<f64> = z.iter().map(|&zj| kernel.eval(zj, xq)).collect();
            let a = linalg::cholesky_solve(&l, mm, &kzi);
            let cond_var =
                (1.0 - kzi.iter().zip(&a).map(|(k, ai)| k * ai).sum::<f64>()).max(0.0);
            let n = 1_000_000usize;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let eps: Vec<f64> = (0..mm).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut u = m.clone();
                for i in 0..mm {
                    for j in 0..=i {
                        u[i] += chol[tri_index(i, j)] * eps[j];
                    }
                }
                let cond_mean: f64 = a.iter().zip(&u).map(|(ai, ui)| ai * ui).sum();
                let zeta: f64 = StandardNormal.sample(&mut rng);
                let f = cond_mean + cond_var.sqrt() * zeta;
                sum += f;
                sumsq += f * f;
            }
            let mc_mean = sum / n as f64;
            let mc_var = sumsq / n as f64 - mc_mean * mc_mean;
            assert!(
                (means[qi] - mc_mean).abs() < 1e-2,
                "{} {}",
                means[qi],
                mc_mean
            );
            assert!((vars[qi] - mc_var).abs() < 1e-2, "{} {}", vars[qi], mc_var);
        }
    }

    #[test]
    fn expected_log_lik_matches_gaussian_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut noise = identity_flow(5);
        let sn2: f64 = 0.35;
        noise.base_log_var = sn2.ln();
        let state = SvgpState::new(
            vec![-1.0, 0.0, 1.0],
            vec![0.5, -0.1, 0.3],
            vec![0.4, 0.1, 0.3, 0.0, -0.2, 0.5],
            SeKernel::new(1.2),
            noise,
            None,
        )
        .unwrap();
        let (means, vars) = state.q_f_marginals(&xs).unwrap();
        let closed: f64 = (0..10)
            .map(|i| {
                let d: f64 = ys[i] - means[i];
                -0.5 * ((2.0 * std::f64::consts::PI * sn2).ln())
                    - d * d / (2.0 * sn2)
                    - vars[i] / (2.0 * sn2)
            })
            .sum();
        let quad = state.expected_log_lik(&xs, &ys, 20).unwrap();
        assert!((quad - closed).abs() < 1e-10, "{quad} vs {closed}");
    }

    #[test]
    fn tiny_variance_degenerates_to_plug_in() {
        let mut noise = identity_flow(5);
        noise.base_log_var = -1.0;
        let state = SvgpState::new(
            vec![0.0],
            vec![0.7],
            vec![1e-9],
            SeKernel::new(1.0),
            noise.clone(),
            None,
        )
        .unwrap();
        let xs = [0.0];
        let ys = [1.3];
        let (means, _) = state.q_f_marginals(&xs).unwrap();
        let expect = noise.log_density(ys[0] - means[0]).unwrap();
        let quad = state.expected_log_lik(&xs, &ys, 20).unwrap();
        assert!((quad - expect).abs() < 1e-6, "{quad} vs {expect}");
    }

    #[test]
    fn quadrature_converges_in_node_count() {
        // A flow fitted by maximum likelihood to unimodal samples gives a
        // smooth log-density; node refinement must then be converged well
        // below 1e-6. (Spiky multimodal flows converge more slowly, which
        // is why the default node count is 20 and not lower.)
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<f64> = (0..800)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                0.4 * e + 0.05 * e * e
            })
            .collect();
        let fcfg = FitConfig {
            steps: 400,
            flow_bins: 7,
            ..FitConfig::default()
        };
        let (noise, _) = crate::flow::fit_mle(&samples, &fcfg, 4).unwrap();
        // Post-convergence regime: inducing inputs at the data, small S,
        // so the posterior variances (and quadrature windows) are small.
        let n = 12;
        let xs: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin() + 0.1).collect();
        let m: Vec<f64> = xs.iter().map(|x| 0.9 * x.sin()).collect();
        let mut chol = vec![0.0; tri_len(n)];
        for i in 0..n {
            chol[tri_index(i, i)] = 0.01;
        }
        let state =
            SvgpState::new(xs.clone(), m, chol, SeKernel::new(1.0), noise, None).unwrap();
        let e8 = state.expected_log_lik(&xs, &ys, 8).unwrap();
        let e32 = state.expected_log_lik(&xs, &ys, 32).unwrap();
        assert!((e8 - e32).abs() < 1e-6, "8 nodes {e8} vs 32 nodes {e32}");
    }

    #[test]
    fn scalar_kl_hand_value() {
        // M=1, K_zz=[[1]], m=[1], S=[[1]] -> KL = 1/2.
        let state = SvgpState::new(
            vec![0.0],
            vec![1.0],
            vec![1.0],
            SeKernel::new(1.0),
            identity_flow(5),
            None,
        )
        .unwrap();
        let kl = state.kl_term().unwrap();
        assert!((kl - 0.5).abs() < 1e-9, "kl {kl}");
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..3 {
            let mm = 3;
            let z = vec![-1.2, 0.1, 0.9];
            let m: Vec<f64> = (0..mm).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut chol = vec![0.0; tri_len(mm)];
            for i in 0..mm {
                for j in 0..=i {
                    chol[tri_index(i, j)] = if i == j {
                        rng.random_range(0.3..1.0)
                    } else {
                        rng.random_range(-0.3..0.3)
                    };
                }
            }
            let kernel = SeKernel::new(rng.random_range(0.6..1.5));
            let state = SvgpState::new(
                z.clone(),
                m.clone(),
                chol.clone(),
                kernel.clone(),
                identity_flow(5),
                None,
            )
            .unwrap();
            let kl = state.kl_term().unwrap();
            assert!(kl >= -1e-9);

            // MC estimate of E_q[log q(u) - log p(u)].
            let kzz = gp::gram(&kernel, &z, &z);
            let (lp, _) = linalg::cholesky_jittered(&kzz, mm).unwrap();
            let logdet_p = linalg::log_det_from_chol(&lp, mm);
            let logdet_q = 2.0 * (0..mm).map(|i| chol[tri_index(i, i)].ln()).sum::<f64>();
            let n = 1_000_000usize;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let eps: Vec<f64> = (0..mm).map(|_| StandardNormal.sample(&mut rng)).collect();
                let mut u = m.clone();
                for i in 0..mm {
                    for j in 0..=i {
                        u[i] += chol[tri_index(i, j)] * eps[j];
                    }
                }
                let lq = -0.5 * (mm as f64) * crate::real::LN_TWO_PI
                    - 0.5 * logdet_q
                    - 0.5 * eps.iter().map(|e| e * e).sum::<f64>();
                let a = linalg::cholesky_solve(&lp, mm, &u);
                let quad_p: f64 = u.iter().zip(&a).map(|(ui, ai)| ui * ai).sum();
                let lpu = -0.5 * (mm as f64) * crate::real::LN_TWO_PI
                    - 0.5 * logdet_p
                    - 0.5 * quad_p;
                let d = lq - lpu;
                sum += d;
                sumsq += d * d;
            }
            let mc = sum / n as f64;
            let se = ((sumsq / n as f64 - mc * mc) / n as f64).sqrt();
            assert!(
                (kl - mc).abs() < 3.0 * se + 1e-4,
                "trial {trial}: kl {kl} mc {mc} se {se}"
            );
        }
    }

    #[test]
    fn elbo_is_expected_log_lik_when_kl_zero() {
        let xs = [-1.0, 0.0, 0.5, 1.5];
        let ys = [0.3, -0.1, 0.4, 0.2];
        let state = prior_matching_state(&xs);
        let elbo = state.elbo(&xs, &ys, 20).unwrap();
        let ell = state.expected_log_lik(&xs, &ys, 20).unwrap();
        assert!((elbo - ell).abs() < 1e-9);
    }

    #[test]
    fn elbo_never_exceeds_exact_lml_for_gaussian_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for trial in 0..5 {
            let n = 12;
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ys: Vec<f64> = xs.iter().map(|x| x.sin() + 0.2).collect();
            let sn2: f64 = rng.random_range(0.05..0.5);
            let logl: f64 = rng.random_range(-0.5..0.5);
            let mut noise = identity_flow(5);
            noise.base_log_var = sn2.ln();
            // Random variational parameters; the bound holds for any of them.
            let mm = n;
            let mut chol = vec![0.0; tri_len(mm)];
            for i in 0..mm {
                for j in 0..=i {
                    chol[tri_index(i, j)] = if i == j {
                        rng.random_range(0.05..0.6)
                    } else {
                        rng.random_range(-0.2..0.2)
                    };
                }
            }
            let m: Vec<f64> = (0..mm).map(|_| rng.random_range(-1.0..1.0)).collect();
            let state = SvgpState::new(
                xs.clone(),
                m,
                chol,
                SeKernel {
                    log_lengthscale: logl,
                },
                noise,
                None,
            )
            .unwrap();
            let elbo = state.elbo(&xs, &ys, 20).unwrap();
            let exact = gp::exact_log_marginal(&ExactGpModel {
                kernel: SeKernel {
                    log_lengthscale: logl,
                },
                noise_log_var: sn2.ln(),
                train_x: xs.clone(),
                train_y: ys.clone(),
            })
            .unwrap();
            assert!(
                elbo <= exact + 1e-8,
                "trial {trial}: elbo {elbo} > lml {exact}"
            );
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                x.sin() + 0.3 * e
            })
            .collect();
        let cfg = FitConfig {
            num_inducing: 4,
            flow_bins: 5,
            ..FitConfig::default()
        };
        // A briefly trained state, so parameters are generic.
        let short = FitConfig {
            steps: 30,
            ..cfg.clone()
        };
        let init = init_state(&xs, &cfg, 5, false).unwrap();
        let (state, _) =
            fit_svgp_from(init, &SvgpFitOptions::default(), &xs, &ys, &short).unwrap();

        let packed = state.pack();
        let (_, grad) = elbo_value_and_grad(&state, &xs, &ys, 8).unwrap();
        let fd = optim::finite_diff_grad(
            |p| elbo_at_packed(&state, p, &xs, &ys, 8).unwrap(),
            &packed,
            1e-5,
        );
        for i in 0..packed.len() {
            let scale = fd[i].abs().max(grad[i].abs()).max(1e-4);
            let rel = (grad[i] - fd[i]).abs() / scale;
            assert!(
                rel < 1e-4,
                "param {i}: tape {} vs fd {} (rel {rel})",
                grad[i],
                fd[i]
            );
        }
    }

    #[test]
    fn variance_shrinks_as_inducing_point_approaches_query() {
        let mut prev = f64::INFINITY;
        for zpos in [3.0, 2.0, 1.0, 0.5, 0.1, 0.0] {
            let state = SvgpState::new(
                vec![zpos],
                vec![0.0],
                vec![0.05],
                SeKernel::new(1.0),
                identity_flow(5),
                None,
            )
            .unwrap();
            let (_, vars) = state.q_f_marginals(&[0.0]).unwrap();
            assert!(vars[0] <= prev + 1e-12, "z={zpos}: {} > {prev}", vars[0]);
            prev = vars[0];
        }
    }

    #[test]
    fn fit_improves_bound_and_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (1.5 * x).cos() + 0.2 * e
            })
            .collect();
        let cfg = FitConfig {
            steps: 300,
            num_inducing: 8,
            flow_bins: 7,
            ..FitConfig::default()
        };
        let (_, fit) = fit_svgp(&xs, &ys, &cfg, 11).unwrap();
        // Smoothed trace decreases (loss is -elbo/N).
        let w = 50;
        let head: f64 = fit.trace[..w].iter().sum::<f64>() / w as f64;
        let tail: f64 = fit.trace[fit.trace.len() - w..].iter().sum::<f64>() / w as f64;
        assert!(tail < head, "head {head} tail {tail}");
        let (_, fit2) = fit_svgp(&xs, &ys, &cfg, 11).unwrap();
        assert_eq!(fit.trace, fit2.trace);
        assert_eq!(fit.residuals, fit2.residuals);
        let rmean = util::mean(&fit.residuals);
        assert!(rmean.abs() < 0.1, "residual mean {rmean}");
    }

    #[test]
    fn predict_is_deterministic_and_var_nonnegative() {
        let xs: Vec<f64> = (0..30).map(|i| -2.0 + 4.0 * i as f64 / 29.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x / 2.0 - 0.5).collect();
        let cfg = FitConfig {
            steps: 150,
            num_inducing: 6,
            flow_bins: 5,
            ..FitConfig::default()
        };
        let (state, _) = fit_svgp(&xs, &ys, &cfg, 2).unwrap();
        let grid = [-1.5, 0.0, 1.5];
        let (m1, v1, s1) = state.predict(&grid, 3, 9).unwrap();
        let (m2, v2, s2) = state.predict(&grid, 3, 9).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
        assert!(v1.iter().all(|&v| v >= 0.0));
        assert_eq!(v1, v2);
        assert_eq!(s1.len(), 3);
        assert_eq!(s1[0].len(), 3);
    }

    #[test]
    fn state_serialises_with_full_chol_matrix() {
        let state = SvgpState::new(
            vec![0.0, 1.0],
            vec![0.1, -0.2],
            vec![0.5, 0.2, 0.7],
            SeKernel::new(1.0),
            identity_flow(3),
            None,
        )
        .unwrap();
        let json = serde_json::to_string(&state).unwrap();
        assert!(json.contains("\"chol_S\""));
        let back: SvgpState = serde_json::from_str(&json).unwrap();
        assert_eq!(back.chol_s(), state.chol_s());
        assert_eq!(back.z, state.z);
        let xs = [0.0, 0.5, 1.0];
        let ys = [0.1, 0.0, -0.1];
        let a = state.elbo(&xs, &ys, 8).unwrap();
        let b = back.elbo(&xs, &ys, 8).unwrap();
        assert_eq!(a, b);
    }
}
