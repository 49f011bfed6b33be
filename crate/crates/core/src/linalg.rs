//! Dense symmetric linear algebra: Cholesky factorisation with a jitter
//! ladder, triangular solves, and their tape-generic counterparts.
//!
//! Matrices are square, row-major `Vec<f64>` (or `Vec<R>`); only the lower
//! triangle of a factor is meaningful.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::real::Real;
use crate::Result;

/// Jitter ladder tried on Cholesky failure: nothing, then 1e-8 .. 1e-4 in
/// decade steps.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// In-place lower Cholesky of a symmetric positive definite matrix.
/// Fails if a pivot is not strictly positive.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::IllConditioned);
        }
        let d = libm::sqrt(d);
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    // Zero the strict upper triangle so factors are unambiguous.
    for i in 0..n {
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Cholesky with the jitter ladder. Returns the factor and the jitter that
/// succeeded.
pub fn cholesky_jittered(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    for &jitter in &JITTER_LADDER {
        let mut m = a.to_vec();
        for i in 0..n {
            m[i * n + i] += jitter;
        }
        if cholesky_in_place(&mut m, n).is_ok() {
            return Ok((m, jitter));
        }
    }
    Err(Error::IllConditioned)
}

/// Solve L x = b for lower-triangular L.
pub fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solve L^T x = b for lower-triangular L.
pub fn solve_lower_transpose(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Solve (L L^T) x = b.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let y = solve_lower(l, n, b);
    solve_lower_transpose(l, n, &y)
}

/// Full inverse from a Cholesky factor, via n unit-vector solves.
pub fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    inv
}

pub fn log_det_from_chol(l: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        s += libm::log(l[i * n + i]);
    }
    2.0 * s
}

// ---------------------------------------------------------------------------
// Tape-generic versions, used inside recorded objectives. Pivot checks go
// through concrete values, so a failed attempt can simply be abandoned on
// the tape and retried with more jitter.
// ---------------------------------------------------------------------------

pub(crate) fn cholesky_g<R: Real>(a: &[R], n: usize) -> Result<Vec<R>> {
    let mut l = a.to_vec();
    for j in 0..n {
        let mut d = l[j * n + j];
        for k in 0..j {
            d = d - l[j * n + k] * l[j * n + k];
        }
        if !(d.value() > 0.0) || !d.value().is_finite() {
            return Err(Error::IllConditioned);
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = l[i * n + j];
            for k in 0..j {
                s = s - l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

pub(crate) fn solve_lower_g<R: Real>(l: &[R], n: usize, b: &[R]) -> Vec<R> {
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s = s - l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

pub(crate) fn solve_lower_transpose_g<R: Real>(l: &[R], n: usize, b: &[R]) -> Vec<R> {
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s = s - l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}
