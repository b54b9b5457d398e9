//! Reverse-mode tape over a generic scalar element.
//!
//! Nodes record local partials at forward time; a sweep walks the node list
//! backwards once. Replaying the same tape reproduces values bit-exactly and
//! the reverse order is the strict reverse of the recording order, so
//! gradients are deterministic.

use super::dual::SQRT_PI;
use super::{DiffError, PlainReal, Real};
use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

struct Node<S> {
    value: S,
    parents: [u32; 2],
    partials: [S; 2],
    arity: u8,
    op: &'static str,
}

pub struct Tape<S: PlainReal> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a tape node. Cheap to copy; all arithmetic on it records.
#[derive(Clone, Copy)]
pub struct Var<'t, S: PlainReal> {
    tape: &'t Tape<S>,
    idx: u32,
}

impl<S: PlainReal> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(n)) }
    }

    /// Drop all recorded nodes so the allocation can be reused.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<S>) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(node);
        idx
    }

    /// Input slot: its adjoint after a sweep is the derivative of the output
    /// with respect to this value.
    pub fn var(&self, value: S) -> Var<'_, S> {
        let idx = self.push(Node {
            value,
            parents: [0, 0],
            partials: [S::zero(), S::zero()],
            arity: 0,
            op: "var",
        });
        Var { tape: self, idx }
    }

    pub fn constant(&self, value: S) -> Var<'_, S> {
        let idx = self.push(Node {
            value,
            parents: [0, 0],
            partials: [S::zero(), S::zero()],
            arity: 0,
            op: "const",
        });
        Var { tape: self, idx }
    }

    pub fn value(&self, v: Var<'_, S>) -> S {
        self.nodes.borrow()[v.idx as usize].value
    }

    /// Reverse sweep from `output` seeded with one. Returns the adjoint of
    /// every node; index with [`Var::index`].
    pub fn sweep(&self, output: Var<'_, S>) -> Result<Vec<S>, DiffError> {
        let mut buf = Vec::new();
        self.sweep_into(output, &mut buf)?;
        Ok(buf)
    }

    /// Like [`Tape::sweep`] but reuses `buf` for the adjoints.
    pub fn sweep_into(&self, output: Var<'_, S>, buf: &mut Vec<S>) -> Result<(), DiffError> {
        let nodes = self.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            if !n.value.val().is_finite() {
                return Err(DiffError::NonFinite { node: i, op: n.op });
            }
        }
        buf.clear();
        buf.resize(nodes.len(), S::zero());
        buf[output.idx as usize] = S::one();
        for i in (0..nodes.len()).rev() {
            let a = buf[i];
            let n = &nodes[i];
            for p in 0..n.arity as usize {
                let contrib = a * n.partials[p];
                buf[n.parents[p] as usize] = buf[n.parents[p] as usize] + contrib;
            }
        }
        Ok(())
    }
}

impl<S: PlainReal> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'t, S: PlainReal> Var<'t, S> {
    pub fn index(&self) -> usize {
        self.idx as usize
    }

    pub fn value(&self) -> S {
        self.tape.value(*self)
    }

    fn unary(self, value: S, partial: S, op: &'static str) -> Self {
        let idx = self.tape.push(Node {
            value,
            parents: [self.idx, 0],
            partials: [partial, S::zero()],
            arity: 1,
            op,
        });
        Var { tape: self.tape, idx }
    }

    fn binary(self, rhs: Self, value: S, pl: S, pr: S, op: &'static str) -> Self {
        let idx = self.tape.push(Node {
            value,
            parents: [self.idx, rhs.idx],
            partials: [pl, pr],
            arity: 2,
            op,
        });
        Var { tape: self.tape, idx }
    }
}

impl<'t, S: PlainReal> Add for Var<'t, S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let v = self.value() + rhs.value();
        self.binary(rhs, v, S::one(), S::one(), "add")
    }
}

impl<'t, S: PlainReal> Sub for Var<'t, S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let v = self.value() - rhs.value();
        self.binary(rhs, v, S::one(), -S::one(), "sub")
    }
}

impl<'t, S: PlainReal> Mul for Var<'t, S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        self.binary(rhs, a * b, b, a, "mul")
    }
}

impl<'t, S: PlainReal> Div for Var<'t, S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let inv = S::one() / b;
        let q = a * inv;
        self.binary(rhs, q, inv, -q * inv, "div")
    }
}

impl<'t, S: PlainReal> Neg for Var<'t, S> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value(), -S::one(), "neg")
    }
}

impl<'t, S: PlainReal> Real for Var<'t, S> {
    fn val(&self) -> f64 {
        self.value().val()
    }

    fn lift(&self, c: f64) -> Self {
        self.tape.constant(S::from_f64(c))
    }

    fn tanh(self) -> Self {
        let t = self.value().tanh();
        self.unary(t, S::one() - t * t, "tanh")
    }

    fn exp(self) -> Self {
        let e = self.value().exp();
        self.unary(e, e, "exp")
    }

    fn sqrt(self) -> Self {
        let s = self.value().sqrt();
        self.unary(s, S::from_f64(0.5) / s, "sqrt")
    }

    fn erf(self) -> Self {
        let x = self.value();
        let e = x.erf();
        let d = S::from_f64(2.0 / SQRT_PI) * (-(x * x)).exp();
        self.unary(e, d, "erf")
    }

    fn powi(self, k: i32) -> Self {
        let x = self.value();
        let f = x.powi(k);
        let df = S::from_f64(k as f64) * x.powi(k - 1);
        self.unary(f, df, "powi")
    }

    fn clamp_sub(self, lo: f64, hi: f64) -> Self {
        let v = self.value();
        if v.val() < lo {
            self.unary(S::from_f64(lo), S::zero(), "clamp")
        } else if v.val() > hi {
            self.unary(S::from_f64(hi), S::zero(), "clamp")
        } else {
            self.unary(v.clamp_sub(lo, hi), S::one(), "clamp")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn deterministic_sweep() {
        let run = || {
            let tape = Tape::<f64>::new();
            let x = tape.var(1.3);
            let y = tape.var(-0.4);
            let z = (x * y + x.exp()).tanh() * (y * y + x.lift(2.0)).sqrt();
            tape.sweep(z).unwrap()[..2].to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same tape, same inputs must be bit-identical");
    }

    #[test]
    fn clear_reuses_allocation() {
        let tape = Tape::<f64>::new();
        let x = tape.var(2.0);
        let y = x * x;
        assert_relative_eq!(tape.sweep(y).unwrap()[x.index()], 4.0);
        tape.clear();
        let x = tape.var(3.0);
        let y = x * x * x;
        assert_relative_eq!(tape.sweep(y).unwrap()[x.index()], 27.0);
    }
}
