//! One-dimensional normalising flow: a monotone linear rational spline
//! transform over a zero-mean Gaussian base with learnable variance.
//!
//! The transform T acts on [-B, B] and is the identity outside. K bins of
//! varying width partition the interval; inside each bin T is built from
//! two monotone linear-rational pieces joined at an interior point set by a
//! per-bin parameter lambda in (0, 1). Bin widths/heights, knot derivatives
//! and the lambdas are stored unconstrained (softmax / softplus / sigmoid
//! mapped), so every optimisation is unconstrained.
//!
//! Per bin, with left/right knot values (ya, yb), knot derivatives
//! (d0, d1), slope s = h/w and weights wa = 1, wb = sqrt(d0/d1),
//!
//!   wc = (lambda * d0 + (1 - lambda) * wb * d1) / s,
//!   yc = ((1 - lambda) * ya + lambda * wb * yb) / ((1 - lambda) + lambda * wb),
//!
//! the two pieces in the normalised coordinate t = (u - xk)/w are
//!
//!   T = (ya (lambda - t) + wc yc t) / ((lambda - t) + wc t),        t <= lambda,
//!   T = (wc yc (1 - t) + wb yb (t - lambda)) / (wc (1 - t) + wb (t - lambda)),
//!
//! which matches the knot values and derivatives and is strictly increasing
//! for positive derivatives. The inverse is again linear rational, so both
//! directions and their log-derivatives are closed form.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::optim::{self, FitConfig, TapeLoss};
use crate::real::{gaussian_log_pdf0, sigmoid, softplus, Real};
use crate::tape::{Tape, Var};
use crate::util;
use crate::Result;

/// Floor on knot derivatives.
const MIN_DERIV: f64 = 1e-3;
/// Bin width/height floor as a fraction of the uniform width 2B/K.
const MIN_BIN_FRACTION: f64 = 1e-3;
/// Lambda is kept inside [0.025, 0.975] so neither rational piece collapses.
const LAMBDA_LO: f64 = 0.025;
const LAMBDA_SPAN: f64 = 0.95;

/// Parameters of one monotone linear-rational-spline diffeomorphism plus a
/// zero-mean Gaussian base with learnable variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplineFlow {
    pub num_bins: usize,
    pub bound: f64,
    pub raw_widths: Vec<f64>,
    pub raw_heights: Vec<f64>,
    /// K + 1 values, one derivative per knot.
    pub raw_derivs: Vec<f64>,
    pub raw_lambdas: Vec<f64>,
    /// Base variance is exp(base_log_var); the base mean is fixed at zero.
    pub base_log_var: f64,
}

impl SplineFlow {
    /// Identity transform with a standard-normal base: uniform bins, unit
    /// derivatives, lambda one half, variance one.
    pub fn identity(num_bins: usize, bound: f64) -> Self {
        assert!(num_bins >= 1 && bound > 0.0);
        // softplus(raw) + MIN_DERIV == 1
        let raw_unit_deriv = libm::log(libm::exp(1.0 - MIN_DERIV) - 1.0);
        SplineFlow {
            num_bins,
            bound,
            raw_widths: vec![0.0; num_bins],
            raw_heights: vec![0.0; num_bins],
            raw_derivs: vec![raw_unit_deriv; num_bins + 1],
            raw_lambdas: vec![0.0; num_bins],
            base_log_var: 0.0,
        }
    }

    pub fn sigma2(&self) -> f64 {
        libm::exp(self.base_log_var)
    }

    /// Total number of unconstrained parameters: 4K + 2.
    pub fn num_params(&self) -> usize {
        4 * self.num_bins + 2
    }

    /// Flatten in the order widths, heights, derivs, lambdas, base_log_var.
    pub fn pack(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend_from_slice(&self.raw_widths);
        p.extend_from_slice(&self.raw_heights);
        p.extend_from_slice(&self.raw_derivs);
        p.extend_from_slice(&self.raw_lambdas);
        p.push(self.base_log_var);
        p
    }

    /// Rebuild from a packed vector with this flow's bin count and bound.
    pub fn unpack(&self, packed: &[f64]) -> SplineFlow {
        assert_eq!(packed.len(), self.num_params());
        let k = self.num_bins;
        SplineFlow {
            num_bins: k,
            bound: self.bound,
            raw_widths: packed[0..k].to_vec(),
            raw_heights: packed[k..2 * k].to_vec(),
            raw_derivs: packed[2 * k..3 * k + 1].to_vec(),
            raw_lambdas: packed[3 * k + 1..4 * k + 1].to_vec(),
            base_log_var: packed[4 * k + 1],
        }
    }

    fn check_finite(&self) -> Result<()> {
        let ok = util::all_finite(&self.raw_widths)
            && util::all_finite(&self.raw_heights)
            && util::all_finite(&self.raw_derivs)
            && util::all_finite(&self.raw_lambdas)
            && self.base_log_var.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("flow parameters"))
        }
    }

    pub(crate) fn raw_f64(&self) -> FlowRaw<f64> {
        FlowRaw {
            raw_widths: self.raw_widths.clone(),
            raw_heights: self.raw_heights.clone(),
            raw_derivs: self.raw_derivs.clone(),
            raw_lambdas: self.raw_lambdas.clone(),
            base_log_var: self.base_log_var,
        }
    }

    pub(crate) fn transform(&self) -> SplineTransform<f64> {
        SplineTransform::from_raw(self.num_bins, self.bound, &self.raw_f64())
    }

    /// x = T(u) and log |dT/du| at u. Outside [-B, B] the transform is the
    /// identity with zero log-derivative.
    pub fn forward(&self, u: f64) -> Result<(f64, f64)> {
        self.check_finite()?;
        if !u.is_finite() {
            return Err(Error::NonFinite("forward input"));
        }
        Ok(self.transform().forward_at(u))
    }

    /// u = T^{-1}(x) and log |dT^{-1}/dx| at x.
    pub fn inverse(&self, x: f64) -> Result<(f64, f64)> {
        self.check_finite()?;
        if !x.is_finite() {
            return Err(Error::NonFinite("inverse input"));
        }
        Ok(self.transform().inverse_at(x))
    }

    /// log q(x) = log N(T^{-1}(x); 0, sigma^2) + log |dT^{-1}/dx|.
    pub fn log_density(&self, x: f64) -> Result<f64> {
        self.check_finite()?;
        if !x.is_finite() {
            return Err(Error::NonFinite("log_density input"));
        }
        Ok(self.transform().log_density_at(x))
    }

    /// n i.i.d. draws of T(u), u ~ N(0, sigma^2). Deterministic per seed.
    pub fn sample(&self, n: usize, rng_seed: u64) -> Vec<f64> {
        let t = self.transform();
        let sigma = libm::sqrt(self.sigma2());
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                t.forward_at(sigma * z).0
            })
            .collect()
    }
}

/// Maximum-likelihood fit of a spline flow to scalar samples.
///
/// Starts from the identity flow with a small seeded perturbation and
/// minimises the mean negative log-likelihood with Adam.
pub fn fit_mle(
    samples: &[f64],
    config: &FitConfig,
    rng_seed: u64,
) -> Result<(SplineFlow, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(Error::invalid("fit_mle needs at least 2 samples"));
    }
    if !util::all_finite(samples) {
        return Err(Error::NonFinite("fit_mle samples"));
    }
    let first = samples[0];
    if samples.iter().all(|&s| s == first) {
        return Err(Error::DegenerateSample);
    }
    let template = SplineFlow::identity(config.flow_bins, config.flow_bound);
    let mut init = template.pack();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for p in init.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *p += 0.01 * z;
    }
    let mut objective = MleObjective {
        samples,
        num_bins: config.flow_bins,
        bound: config.flow_bound,
    };
    let (packed, trace) = optim::minimize_tape(&mut objective, init, config)?;
    Ok((template.unpack(&packed), trace))
}

/// Mean negative log-likelihood of samples under the flow, as a tape loss
/// over the packed parameter vector.
pub struct MleObjective<'a> {
    pub samples: &'a [f64],
    pub num_bins: usize,
    pub bound: f64,
}

impl<'a> TapeLoss for MleObjective<'a> {
    fn build<'t>(&mut self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        let (raw, rest) = FlowRaw::split(params, self.num_bins);
        debug_assert!(rest.is_empty());
        let t = SplineTransform::from_raw(self.num_bins, self.bound, &raw);
        let mut total = tape.leaf(0.0);
        for &x in self.samples {
            total = total + t.log_density_at(tape.leaf(x));
        }
        let n = tape.leaf(self.samples.len() as f64);
        Ok(-(total / n))
    }
}

/// Mean negative log-likelihood at a packed parameter vector, plain f64.
/// The finite-difference oracle for the flow gradient runs against this.
pub fn nll_at(num_bins: usize, bound: f64, packed: &[f64], samples: &[f64]) -> f64 {
    let (raw, _) = FlowRaw::split(packed, num_bins);
    let t = SplineTransform::from_raw(num_bins, bound, &raw);
    -samples.iter().map(|&x| t.log_density_at(x)).sum::<f64>() / samples.len() as f64
}

/// Unconstrained flow parameters, generic over the scalar kind.
pub(crate) struct FlowRaw<R> {
    pub raw_widths: Vec<R>,
    pub raw_heights: Vec<R>,
    pub raw_derivs: Vec<R>,
    pub raw_lambdas: Vec<R>,
    pub base_log_var: R,
}

impl<R: Real> FlowRaw<R> {
    /// Consume 4K + 2 scalars from the front of `params`.
    pub fn split(params: &[R], num_bins: usize) -> (FlowRaw<R>, &[R]) {
        let k = num_bins;
        let raw = FlowRaw {
            raw_widths: params[0..k].to_vec(),
            raw_heights: params[k..2 * k].to_vec(),
            raw_derivs: params[2 * k..3 * k + 1].to_vec(),
            raw_lambdas: params[3 * k + 1..4 * k + 1].to_vec(),
            base_log_var: params[4 * k + 1],
        };
        (raw, &params[4 * k + 2..])
    }
}

/// Derived spline quantities, computed once per evaluation context.
pub(crate) struct SplineTransform<R> {
    bound: f64,
    /// K + 1 knot positions in u, from -B to B.
    knots_x: Vec<R>,
    /// K + 1 knot positions in x.
    knots_y: Vec<R>,
    widths: Vec<R>,
    lambdas: Vec<R>,
    wb: Vec<R>,
    wc: Vec<R>,
    yc: Vec<R>,
    pub sigma2: R,
}

fn softmax_scaled<R: Real>(raw: &[R], total: f64, floor: f64) -> Vec<R> {
    let max = raw
        .iter()
        .map(|r| r.value())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<R> = raw.iter().map(|&r| (r - r.lit(max)).exp()).collect();
    let mut sum = exps[0].lit(0.0);
    for &e in &exps {
        sum = sum + e;
    }
    let free = total - floor * raw.len() as f64;
    exps.iter()
        .map(|&e| e.lit(floor) + e.lit(free) * e / sum)
        .collect()
}

impl<R: Real> SplineTransform<R> {
    pub fn from_raw(num_bins: usize, bound: f64, raw: &FlowRaw<R>) -> Self {
        let k = num_bins;
        let proto = raw.base_log_var;
        let floor = MIN_BIN_FRACTION * 2.0 * bound / k as f64;
        let widths = softmax_scaled(&raw.raw_widths, 2.0 * bound, floor);
        let heights = softmax_scaled(&raw.raw_heights, 2.0 * bound, floor);
        let derivs: Vec<R> = raw
            .raw_derivs
            .iter()
            .map(|&d| d.lit(MIN_DERIV) + softplus(d))
            .collect();
        let lambdas: Vec<R> = raw
            .raw_lambdas
            .iter()
            .map(|&l| l.lit(LAMBDA_LO) + l.lit(LAMBDA_SPAN) * sigmoid(l))
            .collect();

        let mut knots_x = Vec::with_capacity(k + 1);
        let mut knots_y = Vec::with_capacity(k + 1);
        let mut ax = proto.lit(-bound);
        let mut ay = proto.lit(-bound);
        knots_x.push(ax);
        knots_y.push(ay);
        for i in 0..k {
            ax = ax + widths[i];
            ay = ay + heights[i];
            knots_x.push(ax);
            knots_y.push(ay);
        }

        let one = proto.lit(1.0);
        let mut wb = Vec::with_capacity(k);
        let mut wc = Vec::with_capacity(k);
        let mut yc = Vec::with_capacity(k);
        for i in 0..k {
            let (d0, d1) = (derivs[i], derivs[i + 1]);
            let lam = lambdas[i];
            let s = heights[i] / widths[i];
            let wbi = (d0 / d1).sqrt();
            let wci = (lam * d0 + (one - lam) * wbi * d1) / s;
            let ya = knots_y[i];
            let yb = knots_y[i + 1];
            let yci = ((one - lam) * ya + lam * wbi * yb) / ((one - lam) + lam * wbi);
            wb.push(wbi);
            wc.push(wci);
            yc.push(yci);
        }

        SplineTransform {
            bound,
            knots_x,
            knots_y,
            widths,
            lambdas,
            wb,
            wc,
            yc,
            sigma2: raw.base_log_var.exp(),
        }
    }

    fn find_bin(knots: &[R], v: f64) -> usize {
        let mut lo = 0usize;
        let mut hi = knots.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if v < knots[mid].value() {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// (T(u), log |dT/du|); identity with zero log-derivative outside the box.
    pub fn forward_at(&self, u: R) -> (R, R) {
        let uv = u.value();
        if uv <= -self.bound || uv >= self.bound {
            return (u, u.lit(0.0));
        }
        let k = Self::find_bin(&self.knots_x, uv);
        let (xk, w) = (self.knots_x[k], self.widths[k]);
        let (ya, yb) = (self.knots_y[k], self.knots_y[k + 1]);
        let (lam, wb, wc, yc) = (self.lambdas[k], self.wb[k], self.wc[k], self.yc[k]);
        let one = u.lit(1.0);
        let two = u.lit(2.0);
        let t = (u - xk) / w;
        if t.value() <= lam.value() {
            let den = (lam - t) + wc * t;
            let x = (ya * (lam - t) + wc * yc * t) / den;
            let log_det = (wc * lam * (yc - ya) / w).ln() - two * den.ln();
            (x, log_det)
        } else {
            let den = wc * (one - t) + wb * (t - lam);
            let x = (wc * yc * (one - t) + wb * yb * (t - lam)) / den;
            let log_det = (wb * wc * (one - lam) * (yb - yc) / w).ln() - two * den.ln();
            (x, log_det)
        }
    }

    /// (T^{-1}(x), log |dT^{-1}/dx|); identity outside the box.
    pub fn inverse_at(&self, x: R) -> (R, R) {
        let xv = x.value();
        if xv <= -self.bound || xv >= self.bound {
            return (x, x.lit(0.0));
        }
        let k = Self::find_bin(&self.knots_y, xv);
        let (xk, w) = (self.knots_x[k], self.widths[k]);
        let (ya, yb) = (self.knots_y[k], self.knots_y[k + 1]);
        let (lam, wb, wc, yc) = (self.lambdas[k], self.wb[k], self.wc[k], self.yc[k]);
        let one = x.lit(1.0);
        let two = x.lit(2.0);
        if xv <= yc.value() {
            let den = (wc - one) * x + ya - wc * yc;
            let t = lam * (ya - x) / den;
            let u = xk + t * w;
            let log_det = (lam * wc * (yc - ya) * w).ln() - two * den.ln_abs();
            (u, log_det)
        } else {
            let den = (wc - wb) * x + wb * yb - wc * yc;
            let t = ((wc - lam * wb) * x + lam * wb * yb - wc * yc) / den;
            let u = xk + t * w;
            let log_det = (wb * wc * (one - lam) * (yb - yc) * w).ln() - two * den.ln_abs();
            (u, log_det)
        }
    }

    /// log q(x) under the flow (base N(0, sigma^2) pushed through T).
    pub fn log_density_at(&self, x: R) -> R {
        let (u, log_det_inv) = self.inverse_at(x);
        gaussian_log_pdf0(u, self.sigma2) + log_det_inv
    }
}
