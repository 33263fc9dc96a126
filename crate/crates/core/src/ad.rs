//! Tape-based reverse-mode automatic differentiation.
//!
//! Numeric code in this crate is written once, generically over [`Real`].
//! Evaluated with `f64` it is a plain forward computation; evaluated with
//! [`Var`] every operation is recorded on a [`Tape`] and [`Tape::gradient`]
//! propagates adjoints backward in a single reverse sweep.
//!
//! Nodes are n-ary: a node stores a list of `(parent, partial)` edges, so
//! fused primitives such as [`Real::dot`] and [`Real::affine`] record one
//! node instead of a chain of binary products and sums.
//!
//! ```
//! use calmocap_core::ad::{Real, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x + x.sin();
//! let grads = tape.gradient(y);
//! assert!((grads.wrt(x) - (6.0 + 3.0f64.cos())).abs() < 1e-12);
//! ```

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar type the differentiable engine is generic over.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Primal value.
    fn value(self) -> f64;
    /// A constant living alongside `self` (same tape for [`Var`]).
    fn lift(self, v: f64) -> Self;

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn erf(self) -> Self;
    fn square(self) -> Self;

    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self;

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    /// `bias + Σ coeffs[i] · xs[i]`.
    fn affine(bias: f64, coeffs: &[f64], xs: &[Self]) -> Self;

    /// `Σ a[i] · b[i]`.
    fn dot(a: &[Self], b: &[Self]) -> Self;

    /// `Σ xs[i]`; `xs` must be nonempty.
    fn sum(xs: &[Self]) -> Self;
}

pub fn softplus_f64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus_f64`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn erf_f64(x: f64) -> f64 {
    statrs::function::erf::erf(x)
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lift(self, v: f64) -> Self {
        v
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn erf(self) -> Self {
        erf_f64(self)
    }
    #[inline]
    fn square(self) -> Self {
        self * self
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    #[inline]
    fn sin_cos(self) -> (Self, Self) {
        f64::sin_cos(self)
    }
    #[inline]
    fn affine(bias: f64, coeffs: &[f64], xs: &[Self]) -> Self {
        debug_assert_eq!(coeffs.len(), xs.len());
        coeffs.iter().zip(xs).fold(bias, |acc, (c, x)| acc + c * x)
    }
    #[inline]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    #[inline]
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
}

const CONSTANT: u32 = u32::MAX;

#[derive(Default)]
struct TapeInner {
    /// `ends[i]` is one past the last edge of node `i`.
    ends: Vec<u32>,
    edge_src: Vec<u32>,
    edge_weight: Vec<f64>,
}

impl TapeInner {
    #[inline]
    fn edge(&mut self, parent: u32, weight: f64) {
        if parent != CONSTANT {
            self.edge_src.push(parent);
            self.edge_weight.push(weight);
        }
    }

    #[inline]
    fn close(&mut self) -> u32 {
        let idx = self.ends.len() as u32;
        self.ends.push(self.edge_src.len() as u32);
        idx
    }
}

/// Records operations on [`Var`]s for a later reverse sweep.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                ends: Vec::with_capacity(nodes),
                edge_src: Vec::with_capacity(edges),
                edge_weight: Vec::with_capacity(edges),
            }),
        }
    }

    /// An independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().close();
        Var { tape: self, idx, val: value }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    /// A constant; it records no node and receives no adjoint.
    pub fn constant(&self, value: f64) -> Var<'_> {
        Var { tape: self, idx: CONSTANT, val: value }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edge_count(&self) -> usize {
        self.inner.borrow().edge_src.len()
    }

    /// Drops every recorded node, keeping allocations.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.ends.clear();
        inner.edge_src.clear();
        inner.edge_weight.clear();
    }

    /// Adjoints of `output` with respect to every node recorded so far.
    pub fn gradient(&self, output: Var<'_>) -> Gradients {
        self.gradient_seeded(&[(output, 1.0)])
    }

    /// Reverse sweep for `Σ seed_i · output_i`.
    pub fn gradient_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Gradients {
        let inner = self.inner.borrow();
        let mut adj = vec![0.0; inner.ends.len()];
        for (out, w) in seeds {
            debug_assert!(std::ptr::eq(out.tape, self));
            if out.idx != CONSTANT {
                adj[out.idx as usize] += w;
            }
        }
        for node in (0..inner.ends.len()).rev() {
            let g = adj[node];
            if g == 0.0 {
                continue;
            }
            let start = if node == 0 { 0 } else { inner.ends[node - 1] as usize };
            let end = inner.ends[node] as usize;
            for e in start..end {
                adj[inner.edge_src[e] as usize] += inner.edge_weight[e] * g;
            }
        }
        Gradients { adj }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        if v.idx == CONSTANT {
            0.0
        } else {
            self.adj[v.idx as usize]
        }
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|&v| self.wrt(v)).collect()
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == CONSTANT {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONSTANT
    }

    #[inline]
    fn unary(self, val: f64, partial: f64) -> Self {
        if self.idx == CONSTANT {
            return Var { tape: self.tape, idx: CONSTANT, val };
        }
        let mut t = self.tape.inner.borrow_mut();
        t.edge(self.idx, partial);
        let idx = t.close();
        Var { tape: self.tape, idx, val }
    }

    #[inline]
    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "mixing tapes");
        if self.idx == CONSTANT && other.idx == CONSTANT {
            return Var { tape: self.tape, idx: CONSTANT, val };
        }
        let mut t = self.tape.inner.borrow_mut();
        t.edge(self.idx, da);
        t.edge(other.idx, db);
        let idx = t.close();
        Var { tape: self.tape, idx, val }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.val;
        let q = self.val * inv;
        self.binary(o, q, inv, -q * inv)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        self.unary(self.val + c, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn sub(self, c: f64) -> Self {
        self.unary(self.val - c, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        self.unary(self.val * c, c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn div(self, c: f64) -> Self {
        self.unary(self.val / c, 1.0 / c)
    }
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn value(self) -> f64 {
        self.val
    }
    #[inline]
    fn lift(self, v: f64) -> Self {
        self.tape.constant(v)
    }
    #[inline]
    fn sin(self) -> Self {
        let (s, c) = self.val.sin_cos();
        self.unary(s, c)
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = self.val.sin_cos();
        self.unary(c, -s)
    }
    #[inline]
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.val.sin_cos();
        (self.unary(s, c), self.unary(c, -s))
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        self.unary(r, 0.5 / r)
    }
    #[inline]
    fn abs(self) -> Self {
        let s = if self.val > 0.0 {
            1.0
        } else if self.val < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.val.abs(), s)
    }
    #[inline]
    fn erf(self) -> Self {
        let d = 2.0 / PI.sqrt() * (-self.val * self.val).exp();
        self.unary(erf_f64(self.val), d)
    }
    #[inline]
    fn square(self) -> Self {
        self.unary(self.val * self.val, 2.0 * self.val)
    }
    #[inline]
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.val), sigmoid(self.val))
    }

    fn affine(bias: f64, coeffs: &[f64], xs: &[Self]) -> Self {
        debug_assert_eq!(coeffs.len(), xs.len());
        let tape = xs[0].tape;
        let mut val = bias;
        let mut t = tape.inner.borrow_mut();
        let before = t.edge_src.len();
        for (c, x) in coeffs.iter().zip(xs) {
            val += c * x.val;
            t.edge(x.idx, *c);
        }
        if t.edge_src.len() == before {
            return Var { tape, idx: CONSTANT, val };
        }
        let idx = t.close();
        Var { tape, idx, val }
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let tape = a[0].tape;
        let mut val = 0.0;
        let mut t = tape.inner.borrow_mut();
        let before = t.edge_src.len();
        for (x, y) in a.iter().zip(b) {
            val += x.val * y.val;
            t.edge(x.idx, y.val);
            t.edge(y.idx, x.val);
        }
        if t.edge_src.len() == before {
            return Var { tape, idx: CONSTANT, val };
        }
        let idx = t.close();
        Var { tape, idx, val }
    }

    fn sum(xs: &[Self]) -> Self {
        let tape = xs[0].tape;
        let mut val = 0.0;
        let mut t = tape.inner.borrow_mut();
        let before = t.edge_src.len();
        for x in xs {
            val += x.val;
            t.edge(x.idx, 1.0);
        }
        if t.edge_src.len() == before {
            return Var { tape, idx: CONSTANT, val };
        }
        let idx = t.close();
        Var { tape, idx, val }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6 * x.abs().max(1.0);
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn check_unary<G, F>(g: G, f: F, x: f64)
    where
        G: for<'a> Fn(Var<'a>) -> Var<'a>,
        F: Fn(f64) -> f64,
    {
        let tape = Tape::new();
        let v = tape.var(x);
        let y = g(v);
        assert!((y.value() - f(x)).abs() < 1e-12);
        let d = tape.gradient(y).wrt(v);
        let want = fd(&f, x);
        assert!((d - want).abs() < 1e-6 * want.abs().max(1.0), "x={x}: {d} vs {want}");
    }

    #[test]
    fn unary_derivatives_match_finite_differences() {
        for &x in &[-2.3, -0.4, 0.7, 1.9] {
            check_unary(|v| v.sin(), f64::sin, x);
            check_unary(|v| v.cos(), f64::cos, x);
            check_unary(|v| v.exp(), f64::exp, x);
            check_unary(|v| v.erf(), erf_f64, x);
            check_unary(|v| v.softplus(), softplus_f64, x);
            check_unary(|v| v.square(), |x| x * x, x);
            check_unary(|v| v.abs(), f64::abs, x);
        }
        for &x in &[0.3, 1.0, 4.5] {
            check_unary(|v| v.ln(), f64::ln, x);
            check_unary(|v| v.sqrt(), f64::sqrt, x);
        }
    }

    #[test]
    fn fused_nodes_match_binary_composition() {
        let tape = Tape::new();
        let a = tape.vars(&[1.5, -0.5, 2.0]);
        let b = tape.vars(&[0.25, 3.0, -1.0]);
        let d = Real::dot(&a, &b);
        let g = tape.gradient(d);
        for i in 0..3 {
            assert_eq!(g.wrt(a[i]), b[i].value());
            assert_eq!(g.wrt(b[i]), a[i].value());
        }
        let s = Real::affine(2.0, &[1.0, -2.0, 0.5], &a);
        assert!((s.value() - (2.0 + 1.5 + 1.0 + 1.0)).abs() < 1e-15);
        let g = tape.gradient(s);
        assert_eq!(g.wrt(a[1]), -2.0);
    }

    #[test]
    fn constants_receive_no_adjoint_and_record_nothing() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let c = tape.constant(5.0);
        let before = tape.len();
        let k = c * c + 1.0;
        assert_eq!(tape.len(), before);
        let y = x * k;
        let g = tape.gradient(y);
        assert_eq!(g.wrt(x), 26.0);
        assert_eq!(g.wrt(c), 0.0);
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let tape = Tape::new();
        let x = tape.var(0.5);
        let y = x * x;
        let z = y * y + y / x;
        // z = x^4 + x, dz/dx = 4x^3 + 1
        let g = tape.gradient(z).wrt(x);
        assert!((g - (4.0 * 0.125 + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((softplus_f64(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus_f64(-800.0) >= 0.0);
        assert!((inverse_softplus(softplus_f64(0.3)) - 0.3).abs() < 1e-12);
        assert!((inverse_softplus(softplus_f64(40.0)) - 40.0).abs() < 1e-9);
    }
}
