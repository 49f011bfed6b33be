//! Cause-effect data pairs and the synthetic benchmark generator.
//!
//! File parsing lives in the companion crate; this module holds the pair
//! type itself and the pure, seeded generator for the artificial dataset:
//! x ~ N(2, 1), s = x^2 + e with e from a two-component shifted
//! exponential mixture, y = log(s + 4).

use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discovery::Direction;
use crate::error::Error;
use crate::util;
use crate::Result;

/// Raw and normalised samples of one scalar cause-effect pair plus
/// benchmark metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPair {
    pub raw_x: Vec<f64>,
    pub raw_y: Vec<f64>,
    pub norm_x: Vec<f64>,
    pub norm_y: Vec<f64>,
    pub pair_id: Option<u32>,
    pub true_direction: Option<Direction>,
    pub weight: Option<f64>,
}

impl DataPair {
    /// Build from raw columns; normalised columns are filled immediately.
    pub fn from_raw(raw_x: Vec<f64>, raw_y: Vec<f64>) -> Result<Self> {
        if raw_x.len() != raw_y.len() || raw_x.is_empty() {
            return Err(Error::invalid("pair columns must have equal length >= 1"));
        }
        if !util::all_finite(&raw_x) || !util::all_finite(&raw_y) {
            return Err(Error::NonFinite("pair data"));
        }
        let norm_x = normalise_column(&raw_x)?;
        let norm_y = normalise_column(&raw_y)?;
        Ok(DataPair {
            raw_x,
            raw_y,
            norm_x,
            norm_y,
            pair_id: None,
            true_direction: None,
            weight: None,
        })
    }

    pub fn len(&self) -> usize {
        self.raw_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_x.is_empty()
    }

    /// Exchange the two variables (metadata direction flips too).
    pub fn swapped(&self) -> DataPair {
        DataPair {
            raw_x: self.raw_y.clone(),
            raw_y: self.raw_x.clone(),
            norm_x: self.norm_y.clone(),
            norm_y: self.norm_x.clone(),
            pair_id: self.pair_id,
            true_direction: self.true_direction.map(|d| match d {
                Direction::XToY => Direction::YToX,
                Direction::YToX => Direction::XToY,
                Direction::Undecided => Direction::Undecided,
            }),
            weight: self.weight,
        }
    }
}

/// Zero-mean unit-variance rescaling of one column.
pub(crate) fn normalise_column(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 2 {
        return Err(Error::invalid("need at least 2 values to normalise"));
    }
    let first = v[0];
    if v.iter().all(|&x| x == first) {
        return Err(Error::DegenerateSample);
    }
    let m = util::mean(v);
    let s = libm::sqrt(util::variance(v));
    Ok(v.iter().map(|&x| (x - m) / s).collect())
}

/// Density of the unnormalised noise: 0.7 Exp(1) shifted to -3 plus
/// 0.3 Exp(1) shifted to +7.
pub fn synthetic_noise_density(e: f64) -> f64 {
    let mut p = 0.0;
    if e >= -3.0 {
        p += 0.7 * libm::exp(-(e + 3.0));
    }
    if e >= 7.0 {
        p += 0.3 * libm::exp(-(e - 7.0));
    }
    p
}

fn sample_noise(rng: &mut ChaCha8Rng) -> f64 {
    let pick: f64 = rng.random_range(0.0..1.0);
    let u: f64 = rng.random_range(0.0..1.0);
    let exp1 = -libm::log(1.0 - u);
    if pick < 0.7 {
        -3.0 + exp1
    } else {
        7.0 + exp1
    }
}

/// Draw n samples of the artificial cause-effect process. The true
/// direction is x -> y by construction.
pub fn generate_synthetic(n: usize, rng_seed: u64) -> Result<DataPair> {
    if n == 0 {
        return Err(Error::invalid("generate_synthetic needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut raw_x = Vec::with_capacity(n);
    let mut raw_y = Vec::with_capacity(n);
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = 2.0 + z;
        let e = sample_noise(&mut rng);
        let s = x * x + e;
        // e >= -3 and x^2 >= 0 guarantee s + 4 >= 1.
        assert!(s + 4.0 > 0.0);
        raw_x.push(x);
        raw_y.push(libm::log(s + 4.0));
    }
    let mut pair = DataPair::from_raw(raw_x, raw_y)?;
    pair.true_direction = Some(Direction::XToY);
    Ok(pair)
}
