//! Reverse-mode automatic differentiation over scalars.
//!
//! A [`Tape`] is a Wengert list: each recorded node stores its parent
//! indices and the local partial derivatives, precomputed at recording
//! time. Values are evaluated eagerly, so model code can branch on them
//! while recording. One backward sweep accumulates adjoints for every
//! leaf.
//!
//! The tape is rebuilt on every optimisation step (`clear` keeps the
//! allocation), which is what makes value-dependent branching sound.

use alloc::vec::Vec;
use core::cell::RefCell;

use crate::real::Real;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A scalar recorded on a [`Tape`]. Copyable; carries its value so reads
/// never touch the tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Drop all nodes but keep the allocation.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an independent variable. Leaves created first are the ones
    /// whose adjoints [`Tape::gradient`] returns.
    pub fn leaf(&self, val: f64) -> Var<'_> {
        let idx = self.push(0, 0, 0.0, 0.0);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    fn push(&self, p0: u32, p1: u32, d0: f64, d1: f64) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(Node {
            parents: [p0, p1],
            partials: [d0, d1],
        });
        idx
    }

    fn unary(&self, a: &Var<'_>, val: f64, da: f64) -> Var<'_> {
        let idx = self.push(a.idx, a.idx, da, 0.0);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    fn binary(&self, a: &Var<'_>, b: &Var<'_>, val: f64, da: f64, db: f64) -> Var<'_> {
        let idx = self.push(a.idx, b.idx, da, db);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    /// Adjoints of the first `n_leaves` nodes with respect to `output`.
    /// `scratch` is reused across calls to avoid reallocation.
    pub fn gradient(&self, output: Var<'_>, n_leaves: usize, scratch: &mut Vec<f64>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        scratch.clear();
        scratch.resize(nodes.len(), 0.0);
        scratch[output.idx as usize] = 1.0;
        for i in (0..nodes.len()).rev() {
            let a = scratch[i];
            if a != 0.0 {
                let n = nodes[i];
                // Self-referencing leaves have zero partials; harmless.
                scratch[n.parents[0] as usize] += a * n.partials[0];
                scratch[n.parents[1] as usize] += a * n.partials[1];
            }
        }
        scratch[..n_leaves].to_vec()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl<'t> Var<'t> {
    pub fn val(&self) -> f64 {
        self.val
    }
}

impl<'t> core::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(&self, &rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> core::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(&self, &rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> core::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(&self, &rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> core::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.val;
        self.tape.binary(
            &self,
            &rhs,
            self.val * inv,
            inv,
            -self.val * inv * inv,
        )
    }
}

impl<'t> core::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(&self, -self.val, -1.0)
    }
}

impl<'t> PartialEq for Var<'t> {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl<'t> PartialOrd for Var<'t> {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn value(self) -> f64 {
        self.val
    }

    fn lit(self, c: f64) -> Self {
        self.tape.leaf(c)
    }

    fn exp(self) -> Self {
        let e = libm::exp(self.val);
        self.tape.unary(&self, e, e)
    }

    fn ln(self) -> Self {
        self.tape.unary(&self, libm::log(self.val), 1.0 / self.val)
    }

    fn ln_abs(self) -> Self {
        self.tape
            .unary(&self, libm::log(libm::fabs(self.val)), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = libm::sqrt(self.val);
        self.tape.unary(&self, s, 0.5 / s)
    }

    fn clamp_min(self, c: f64) -> Self {
        if self.val > c {
            self
        } else {
            self.tape.unary(&self, c, 0.0)
        }
    }
}
