//! Scalar reverse-mode differentiation.
//!
//! Model and loss code is written once against [`Real`]. Evaluated with `f64`
//! it is a plain forward pass; evaluated with [`Var`] every operation is
//! recorded on a [`Tape`] and [`Tape::gradient`] returns exact derivatives
//! with a single reverse sweep.
//!
//! Nodes are n-ary: a node stores a contiguous run of `(parent, partial)`
//! edges, so dot products and affine maps cost one node instead of `2n`.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by `f64` and taped [`Var`]s.
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
    fn value(self) -> f64;

    /// A constant living in the same context as `self` (same tape for `Var`).
    fn constant(self, v: f64) -> Self;

    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn asinh(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn sigmoid(self) -> Self;
    fn abs(self) -> Self;

    /// `Σ aᵢ·bᵢ`; both slices must be non-empty and of equal length.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert!(!a.is_empty() && a.len() == b.len());
        let mut acc = a[0] * b[0];
        for (x, y) in a.iter().zip(b).skip(1) {
            acc = acc + *x * *y;
        }
        acc
    }

    /// `Σ wᵢ·xᵢ + bias` with constant weights.
    fn affine(xs: &[Self], weights: &[f64], bias: Self) -> Self {
        debug_assert_eq!(xs.len(), weights.len());
        let mut acc = bias;
        for (x, w) in xs.iter().zip(weights) {
            acc = acc + *x * *w;
        }
        acc
    }

    fn sum(xs: &[Self]) -> Self {
        debug_assert!(!xs.is_empty());
        let mut acc = xs[0];
        for x in &xs[1..] {
            acc = acc + *x;
        }
        acc
    }

    /// `max(self, floor)` where the floor branch is a constant.
    fn clamp_min(self, floor: f64) -> Self {
        if self.value() < floor {
            self.constant(floor)
        } else {
            self
        }
    }
}

/// Element with the smallest value; ties go to the earliest index.
pub fn select_min<S: Real>(xs: &[S]) -> S {
    let mut best = xs[0];
    for &x in &xs[1..] {
        if x.value() < best.value() {
            best = x;
        }
    }
    best
}

/// Element with the largest value; ties go to the earliest index.
pub fn select_max<S: Real>(xs: &[S]) -> S {
    let mut best = xs[0];
    for &x in &xs[1..] {
        if x.value() > best.value() {
            best = x;
        }
    }
    best
}

impl Real for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn constant(self, v: f64) -> Self {
        v
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn asinh(self) -> Self {
        f64::asinh(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    fn affine(xs: &[Self], weights: &[f64], bias: Self) -> Self {
        bias + xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>()
    }
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
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

#[derive(Default)]
struct TapeInner {
    /// `(edge_start, edge_end)` per node.
    nodes: Vec<(u32, u32)>,
    edges: Vec<(u32, f64)>,
}

/// Wengert list of recorded operations.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::with_capacity(nodes),
                edges: Vec::with_capacity(nodes * 3),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// An independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, std::iter::empty())
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push<I>(&self, value: f64, parents: I) -> Var<'_>
    where
        I: IntoIterator<Item = (u32, f64)>,
    {
        let mut inner = self.inner.borrow_mut();
        let start = inner.edges.len() as u32;
        inner.edges.extend(parents);
        let end = inner.edges.len() as u32;
        let idx = inner.nodes.len() as u32;
        inner.nodes.push((start, end));
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        debug_assert!(std::ptr::eq(output.tape, self));
        let inner = self.inner.borrow();
        let mut adj = vec![0.0; inner.nodes.len()];
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let (s, e) = inner.nodes[i];
            for &(p, w) in &inner.edges[s as usize..e as usize] {
                adj[p as usize] += g * w;
            }
        }
        adj
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.val)
    }
}

impl<'t> Var<'t> {
    pub fn index(self) -> usize {
        self.idx as usize
    }

    fn unary(self, value: f64, d: f64) -> Self {
        self.tape.push(value, [(self.idx, d)])
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        self.tape.push(value, [(self.idx, da), (other.idx, db)])
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }

    fn constant(self, v: f64) -> Self {
        self.tape.var(v)
    }

    fn sqrt(self) -> Self {
        let r = self.val.sqrt();
        // d/dx √x is unbounded at 0; the zero subgradient keeps norms of
        // exactly-zero vectors finite.
        let d = if r > 0.0 { 0.5 / r } else { 0.0 };
        self.unary(r, d)
    }

    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }

    fn asinh(self) -> Self {
        self.unary(self.val.asinh(), 1.0 / 1f64.hypot(self.val))
    }

    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid(self.val);
        self.unary(s, s * (1.0 - s))
    }

    fn abs(self) -> Self {
        let d = if self.val > 0.0 {
            1.0
        } else if self.val < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.val.abs(), d)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert!(!a.is_empty() && a.len() == b.len());
        let tape = a[0].tape;
        let value = a.iter().zip(b).map(|(x, y)| x.val * y.val).sum();
        tape.push(
            value,
            a.iter()
                .zip(b)
                .flat_map(|(x, y)| [(x.idx, y.val), (y.idx, x.val)]),
        )
    }

    fn affine(xs: &[Self], weights: &[f64], bias: Self) -> Self {
        debug_assert_eq!(xs.len(), weights.len());
        let value = bias.val + xs.iter().zip(weights).map(|(x, w)| x.val * w).sum::<f64>();
        bias.tape.push(
            value,
            std::iter::once((bias.idx, 1.0))
                .chain(xs.iter().zip(weights).map(|(x, &w)| (x.idx, w))),
        )
    }

    fn sum(xs: &[Self]) -> Self {
        debug_assert!(!xs.is_empty());
        let value = xs.iter().map(|x| x.val).sum();
        xs[0].tape.push(value, xs.iter().map(|x| (x.idx, 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x.constant(7.0) + 1.0;
        let g = tape.gradient(y);
        assert_eq!(g[x.index()], 0.0);
    }

    #[test]
    fn quadratic_probe() {
        for theta in [-2.5, 0.0, 0.3, 4.0] {
            let tape = Tape::new();
            let x = tape.var(theta);
            let y = x * x;
            assert_eq!(tape.gradient(y)[x.index()], 2.0 * theta);
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        type F = fn(f64) -> f64;
        let cases: [(&str, F, fn(Var) -> Var); 6] = [
            ("tanh", f64::tanh, |v| v.tanh()),
            ("asinh", f64::asinh, |v| v.asinh()),
            ("ln", f64::ln, |v| v.ln()),
            ("exp", f64::exp, |v| v.exp()),
            ("sigmoid", sigmoid, |v| v.sigmoid()),
            ("sqrt", f64::sqrt, |v| v.sqrt()),
        ];
        for (name, f, g) in cases {
            for x in [0.3, 1.7, 4.2] {
                let tape = Tape::new();
                let v = tape.var(x);
                let out = g(v);
                assert!((out.value() - f(x)).abs() < 1e-15);
                let ad = tape.gradient(out)[v.index()];
                let fd = central_diff(f, x);
                assert!((ad - fd).abs() < 1e-7 * fd.abs().max(1.0), "{name} at {x}");
            }
        }
    }

    #[test]
    fn nary_nodes_match_binary_chain() {
        let a = [0.5, -1.25, 2.0];
        let b = [1.5, 0.25, -0.75];
        let tape = Tape::new();
        let av = tape.vars(&a);
        let bv = tape.vars(&b);
        let d = Var::dot(&av, &bv);
        let g = tape.gradient(d);
        for i in 0..3 {
            assert_eq!(g[av[i].index()], b[i]);
            assert_eq!(g[bv[i].index()], a[i]);
        }
        let bias = tape.var(0.1);
        let aff = Var::affine(&av, &b, bias);
        assert!((aff.value() - (0.1 + f64::dot(&a, &b))).abs() < 1e-15);
        let g = tape.gradient(aff);
        assert_eq!(g[bias.index()], 1.0);
        assert_eq!(g[av[2].index()], b[2]);
    }

    #[test]
    fn selection_ties_pick_first_index() {
        let tape = Tape::new();
        let xs = tape.vars(&[0.4, 0.2, 0.2, 0.9, 0.9]);
        assert_eq!(select_min(&xs).index(), xs[1].index());
        assert_eq!(select_max(&xs).index(), xs[3].index());
    }

    #[test]
    fn clamp_blocks_gradient_below_floor() {
        let tape = Tape::new();
        let x = tape.var(1e-9);
        let y = x.clamp_min(1e-7).ln();
        assert_eq!(tape.gradient(y)[x.index()], 0.0);
        assert!((y.value() - (1e-7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sqrt_at_zero_is_finite() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = (x * x).sqrt();
        assert_eq!(tape.gradient(y)[x.index()], 0.0);
    }
}
