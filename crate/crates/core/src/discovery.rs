//! End-to-end direction decision: fit both directions under the additive
//! or post-nonlinear model, compute residual-independence and likelihood
//! criteria, aggregate over seeded runs by the median, and the combined
//! two-model heuristic.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{normalise_column, DataPair};
use crate::error::Error;
use crate::flow;
use crate::gp;
use crate::hsic;
use crate::optim::FitConfig;
use crate::pnl;
use crate::svgp;
use crate::util;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    XToY,
    YToX,
    Undecided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Lower HSIC statistic wins (the benchmark default).
    HsicStat,
    /// Higher HSIC p-value wins.
    HsicP,
    /// Higher total log-likelihood (bound) wins.
    Likelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    Anm,
    Pnl,
    Combined,
}

/// Criterion values for one fit direction; log-likelihoods are per sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DirectionScores {
    pub hsic_stat: f64,
    pub hsic_p: f64,
    /// Conditional term: exact log marginal likelihood (additive model) or
    /// the evidence lower bound (post-nonlinear model).
    pub cond_loglik: f64,
    /// Marginal flow density of the conditioning variable.
    pub marg_loglik: f64,
    /// cond_loglik + marg_loglik.
    pub total_loglik: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub direction: Direction,
    pub criterion: Criterion,
    pub model_class: ModelClass,
    pub forward: DirectionScores,
    pub backward: DirectionScores,
    pub runs_used: usize,
}

/// Rescale both variables to zero mean and unit variance; raw data are
/// retained. Idempotent because it always restarts from the raw columns.
pub fn normalise(pair: &DataPair) -> Result<DataPair> {
    let mut out = pair.clone();
    out.norm_x = normalise_column(&pair.raw_x)?;
    out.norm_y = normalise_column(&pair.raw_y)?;
    Ok(out)
}

/// Deterministic per-run seed; both direction fits inside one run share
/// it, which is what makes verdicts exactly mirror under a variable swap.
pub fn run_seed(base_seed: u64, pair_id: u32, run_index: u32) -> u64 {
    util::mix_seed(&[base_seed, pair_id as u64, run_index as u64])
}

/// Fit effect-on-cause in one direction and fill all criterion values.
fn fit_direction(
    cause: &[f64],
    effect: &[f64],
    model_class: ModelClass,
    config: &FitConfig,
    seed: u64,
) -> Result<DirectionScores> {
    let (cond_loglik, residuals) = match model_class {
        ModelClass::Anm => {
            let (_, fit) = gp::fit_anm(cause, effect, config, seed)?;
            (fit.per_sample_loglik, fit.residuals)
        }
        ModelClass::Pnl => {
            let (_, fit) = pnl::fit_pnl(cause, effect, config, seed)?;
            (fit.per_sample_loglik, fit.residuals)
        }
        ModelClass::Combined => {
            return Err(Error::invalid("fit_direction takes anm or pnl"));
        }
    };
    let h = hsic::hsic_test(cause, &residuals)?;
    let (marg_flow, _) = flow::fit_mle(cause, config, seed)?;
    let t = marg_flow.transform();
    let marg_loglik =
        cause.iter().map(|&c| t.log_density_at(c)).sum::<f64>() / cause.len() as f64;
    Ok(DirectionScores {
        hsic_stat: h.statistic,
        hsic_p: h.p_value,
        cond_loglik,
        marg_loglik,
        total_loglik: cond_loglik + marg_loglik,
    })
}

fn decide(criterion: Criterion, fwd: &DirectionScores, bwd: &DirectionScores) -> Direction {
    let (f, b, lower_wins) = match criterion {
        Criterion::HsicStat => (fwd.hsic_stat, bwd.hsic_stat, true),
        Criterion::HsicP => (fwd.hsic_p, bwd.hsic_p, false),
        Criterion::Likelihood => (fwd.total_loglik, bwd.total_loglik, false),
    };
    if f == b {
        Direction::Undecided
    } else if (f < b) == lower_wins {
        Direction::XToY
    } else {
        Direction::YToX
    }
}

fn median_scores(scores: &[DirectionScores]) -> DirectionScores {
    let field = |sel: fn(&DirectionScores) -> f64| {
        let v: Vec<f64> = scores.iter().map(sel).collect();
        util::median(&v)
    };
    DirectionScores {
        hsic_stat: field(|s| s.hsic_stat),
        hsic_p: field(|s| s.hsic_p),
        cond_loglik: field(|s| s.cond_loglik),
        marg_loglik: field(|s| s.marg_loglik),
        total_loglik: field(|s| s.total_loglik),
    }
}

/// Fit both directions once (the seed comes from the config) and decide.
pub fn discover(
    pair: &DataPair,
    model_class: ModelClass,
    criterion: Criterion,
    config: &FitConfig,
) -> Result<Verdict> {
    discover_median(pair, model_class, criterion, 1, config)
}

/// Median-aggregated decision over independently seeded runs. Runs whose
/// optimisation diverges are discarded; every run failing is an error.
pub fn discover_median(
    pair: &DataPair,
    model_class: ModelClass,
    criterion: Criterion,
    runs: usize,
    config: &FitConfig,
) -> Result<Verdict> {
    if runs == 0 {
        return Err(Error::invalid("runs must be >= 1"));
    }
    if model_class == ModelClass::Combined {
        return Err(Error::invalid(
            "combined decisions go through discover_combined",
        ));
    }
    let pair = normalise(pair)?;
    let pair_id = pair.pair_id.unwrap_or(0);
    let mut fwd = Vec::with_capacity(runs);
    let mut bwd = Vec::with_capacity(runs);
    let mut last_err = None;
    for run in 0..runs {
        let seed = run_seed(config.seed, pair_id, run as u32);
        let f = fit_direction(&pair.norm_x, &pair.norm_y, model_class, config, seed);
        let b = fit_direction(&pair.norm_y, &pair.norm_x, model_class, config, seed);
        match (f, b) {
            (Ok(f), Ok(b)) => {
                fwd.push(f);
                bwd.push(b);
            }
            (Err(e), _) | (_, Err(e)) => last_err = Some(e),
        }
    }
    if fwd.is_empty() {
        return Err(last_err.unwrap_or(Error::Diverged { step: 0 }));
    }
    let forward = median_scores(&fwd);
    let backward = median_scores(&bwd);
    Ok(Verdict {
        direction: decide(criterion, &forward, &backward),
        criterion,
        model_class,
        forward,
        backward,
        runs_used: fwd.len(),
    })
}

/// Two-model heuristic: if either additive-model direction looks
/// independent enough (HSIC p-value above the threshold), the additive
/// model decides; otherwise the post-nonlinear model does.
pub fn discover_combined(
    pair: &DataPair,
    threshold_t: f64,
    runs: usize,
    config: &FitConfig,
) -> Result<Verdict> {
    if !(0.0..=1.0).contains(&threshold_t) {
        return Err(Error::invalid("threshold must lie in [0, 1]"));
    }
    let anm = discover_median(pair, ModelClass::Anm, Criterion::HsicStat, runs, config)?;
    let max_p = anm.forward.hsic_p.max(anm.backward.hsic_p);
    let mut verdict = if max_p > threshold_t {
        anm
    } else {
        discover_median(pair, ModelClass::Pnl, Criterion::HsicStat, runs, config)?
    };
    verdict.model_class = ModelClass::Combined;
    Ok(verdict)
}

/// Routing decision of the combined heuristic from already-computed
/// additive-model scores (used by the benchmark's threshold sweep).
pub fn combined_picks_anm(anm_verdict: &Verdict, threshold_t: f64) -> bool {
    anm_verdict.forward.hsic_p.max(anm_verdict.backward.hsic_p) > threshold_t
}
