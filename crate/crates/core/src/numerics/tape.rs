//! Scalar reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node holding its value and the local
//! partial derivatives with respect to its operands. [`Tape::backward`] then
//! sweeps the nodes in reverse creation order, which is a valid topological
//! order because operands always exist before their results.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    parents: [(usize, f64); 2],
    arity: u8,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input (leaf) value.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [(0, 0.0); 2], 0)
    }

    fn push(&self, value: f64, parents: [(usize, f64); 2], arity: u8) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            value,
            parents,
            arity,
        });
        Var {
            tape: self,
            index,
            value,
        }
    }

    /// Adjoint of `output` with respect to every recorded node.
    pub fn backward(&self, output: Var<'_>) -> Result<Vec<f64>> {
        let nodes = self.nodes.borrow();
        if let Some(i) = nodes.iter().position(|n| !n.value.is_finite()) {
            return Err(Error::NumericOverflow(format!("tape node {i}")));
        }
        let mut adjoint = vec![0.0; nodes.len()];
        adjoint[output.index] = 1.0;
        for i in (0..=output.index).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for &(p, d) in &node.parents[..node.arity as usize] {
                adjoint[p] += a * d;
            }
        }
        if adjoint.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("tape adjoints".into()));
        }
        Ok(adjoint)
    }
}

impl<'t> Var<'t> {
    #[inline]
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn index(self) -> usize {
        self.index
    }

    fn unary(self, value: f64, d: f64) -> Var<'t> {
        self.tape.push(value, [(self.index, d), (0, 0.0)], 1)
    }

    fn binary(self, other: Var<'t>, value: f64, da: f64, db: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape));
        self.tape
            .push(value, [(self.index, da), (other.index, db)], 2)
    }

    pub fn constant(self, value: f64) -> Var<'t> {
        self.tape.var(value)
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(self.value.ln(), 1.0 / self.value)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.value.sqrt();
        self.unary(s, 0.5 / s)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.value.powi(n - 1)
        };
        self.unary(self.value.powi(n), d)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(self.value * self.value, 2.0 * self.value)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        if self.value > 0.0 {
            self.unary(self.value, 1.0)
        } else {
            self.unary(slope * self.value, slope)
        }
    }

    /// Sum of a nonempty sequence.
    pub fn sum<I: IntoIterator<Item = Var<'t>>>(items: I) -> Option<Var<'t>> {
        items.into_iter().reduce(|a, b| a + b)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.value;
        self.binary(rhs, self.value * inv, inv, -self.value * inv * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.value / rhs, 1.0 / rhs)
    }
}

/// Gradient of a scalar function of `params`, built from [`Var`] operations.
///
/// Fails with [`Error::NumericOverflow`] if any intermediate is non-finite.
pub fn gradient<F>(f: F, params: &[f64]) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let inputs: Vec<Var<'_>> = params.iter().map(|&p| tape.var(p)).collect();
    let out = f(&tape, &inputs);
    let adjoint = tape.backward(out)?;
    Ok(inputs.iter().map(|v| adjoint[v.index]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check::central_difference;

    #[test]
    fn square_at_three() {
        let g = gradient(|_, p| p[0] * p[0], &[3.0]).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = gradient(|t, _| t.var(4.2), &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn overflow_is_reported() {
        let r = gradient(|_, p| (p[0] * 1000.0).exp(), &[1.0]);
        assert!(matches!(r, Err(Error::NumericOverflow(_))));
    }

    #[test]
    fn composite_matches_finite_differences() {
        fn f_tape<'t>(_: &'t Tape, p: &[Var<'t>]) -> Var<'t> {
            let a = (p[0] * p[1]).tanh() + (p[2] / (p[0].square() + 1.0)).exp();
            let b = (p[1] - p[2]).leaky_relu(0.01).powi(3) + (p[0].square() + 2.0).ln().sqrt();
            -(a * b)
        }
        fn f_plain(p: &[f64]) -> f64 {
            let a = (p[0] * p[1]).tanh() + (p[2] / (p[0] * p[0] + 1.0)).exp();
            let d = p[1] - p[2];
            let lr = if d > 0.0 { d } else { 0.01 * d };
            let b = lr.powi(3) + (p[0] * p[0] + 2.0).ln().sqrt();
            -(a * b)
        }
        let p = [0.3, 1.1, -0.4];
        let g = gradient(f_tape, &p).unwrap();
        let fd = central_difference(f_plain, &p, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}
