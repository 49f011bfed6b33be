//! Gauss-Hermite quadrature nodes and weights.
//!
//! Physicists' convention: sum_k w_k f(t_k) approximates the integral of
//! exp(-t^2) f(t) over the real line. Expectations under N(mu, s^2) use
//! E[f] = (1/sqrt(pi)) sum_k w_k f(mu + sqrt(2) s t_k).

use alloc::vec;
use alloc::vec::Vec;

const PI_POW_MINUS_QUARTER: f64 = 0.7511255444649424828587030047762276930524;

#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Compute an n-point rule by Newton iteration on the orthonormal
    /// Hermite recurrence. Accurate well past n = 64.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = (n + 1) / 2;
        let mut z = 0.0_f64;
        for i in 0..m {
            // Initial guesses from Numerical-Recipes-style asymptotics.
            z = match i {
                0 => {
                    libm::sqrt((2 * n + 1) as f64)
                        - 1.85575 * libm::pow((2 * n + 1) as f64, -0.16667)
                }
                1 => z - 1.14 * libm::pow(n as f64, 0.426) / z,
                2 => 1.86 * z - 0.86 * nodes[0],
                3 => 1.91 * z - 0.91 * nodes[1],
                _ => 2.0 * z - nodes[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                // Orthonormal recurrence; p1 = h_n(z), p2 = h_{n-1}(z).
                let mut p1 = PI_POW_MINUS_QUARTER;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * libm::sqrt(2.0 / (j + 1) as f64) * p2
                        - libm::sqrt(j as f64 / (j + 1) as f64) * p3;
                }
                pp = libm::sqrt(2.0 * n as f64) * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if libm::fabs(z - z1) <= 1e-15 {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        GaussHermite { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}
