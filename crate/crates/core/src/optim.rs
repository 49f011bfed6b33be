//! Scalar-parameter-vector optimisation: Adam over a differentiable loss,
//! the tape-loss plumbing shared by every fit in the crate, and the
//! finite-difference gradient oracle.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tape::{Tape, Var};
use crate::Result;

/// Fit hyperparameters. The defaults reproduce the reference settings:
/// 21 spline bins on [-10, 10], 20 inducing points, 20 quadrature nodes,
/// 1000 full-batch steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub quad_nodes: usize,
    pub num_inducing: usize,
    pub flow_bins: usize,
    pub flow_bound: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            steps: 1000,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            quad_nodes: 20,
            num_inducing: 20,
            flow_bins: 21,
            flow_bound: 10.0,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.quad_nodes < 2 {
            return Err(Error::invalid("quad_nodes must be >= 2"));
        }
        if self.num_inducing == 0 || self.flow_bins == 0 {
            return Err(Error::invalid("num_inducing and flow_bins must be >= 1"));
        }
        if !(self.flow_bound > 0.0) {
            return Err(Error::invalid("flow_bound must be > 0"));
        }
        Ok(())
    }
}

/// Summary of one completed fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Final objective per sample: exact log marginal likelihood for the
    /// additive model, the evidence lower bound otherwise.
    pub per_sample_loglik: f64,
    /// y_i minus the posterior mean (through the inverse post-nonlinearity
    /// where one is present).
    pub residuals: Vec<f64>,
    /// Loss value per optimisation step (the minimised negative objective).
    pub trace: Vec<f64>,
}

/// First/second-moment accumulators for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One Adam update with bias correction. Rejects non-finite gradients,
/// naming the offending parameter.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    config: &FitConfig,
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { index: i });
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let bc1 = 1.0 - libm::pow(b1, t);
    let bc2 = 1.0 - libm::pow(b2, t);
    for i in 0..params.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grads[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= config.learning_rate * m_hat / (libm::sqrt(v_hat) + config.adam_eps);
    }
    Ok(())
}

/// Central finite differences of `loss` at `params`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(
    mut loss: F,
    params: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; params.len()];
    let mut p = params.to_vec();
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + step;
        let hi = loss(&p);
        p[i] = orig - step;
        let lo = loss(&p);
        p[i] = orig;
        g[i] = (hi - lo) / (2.0 * step);
    }
    g
}

/// A loss expressed as a tape recording over its trainable parameters.
pub trait TapeLoss {
    fn build<'t>(&mut self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>>;
}

/// Evaluate a tape loss once: value and gradient.
pub fn tape_value_and_grad<L: TapeLoss>(loss: &mut L, at: &[f64]) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = at.iter().map(|&v| tape.leaf(v)).collect();
    let out = loss.build(&tape, &vars)?;
    let mut scratch = Vec::new();
    let g = tape.gradient(out, at.len(), &mut scratch);
    Ok((out.val(), g))
}

/// Minimise a tape loss with Adam. Returns the final parameters and the
/// per-step loss trace. A non-finite loss aborts with the step index.
pub fn minimize_tape<L: TapeLoss>(
    loss: &mut L,
    init: Vec<f64>,
    config: &FitConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    config.validate()?;
    let mut params = init;
    let mut state = AdamState::new(params.len());
    let mut trace = Vec::with_capacity(config.steps);
    let tape = Tape::new();
    let mut scratch: Vec<f64> = Vec::new();
    for step in 0..config.steps {
        tape.clear();
        let vars: Vec<Var<'_>> = params.iter().map(|&v| tape.leaf(v)).collect();
        let out = loss.build(&tape, &vars)?;
        let val = out.val();
        if !val.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.push(val);
        let grads = tape.gradient(out, params.len(), &mut scratch);
        adam_step(&mut params, &grads, &mut state, config)?;
    }
    Ok((params, trace))
}

/// Minimise a loss given by a value-and-gradient closure (used where the
/// gradient is hand-derived rather than taped).
pub fn minimize_with_grad<F>(
    mut eval: F,
    init: Vec<f64>,
    config: &FitConfig,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let mut params = init;
    let mut state = AdamState::new(params.len());
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (val, grads) = eval(&params)?;
        if !val.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.push(val);
        adam_step(&mut params, &grads, &mut state, config)?;
    }
    Ok((params, trace))
}
