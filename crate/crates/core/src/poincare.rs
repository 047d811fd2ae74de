//! Poincaré-ball geometry with curvature `-c`.
//!
//! The ball is `{x : c‖x‖² < 1}`. Every operation that yields a point keeps
//! it at norm at most `(1 - BALL_EPS)/√c`.
//!
//! The typed functions ([`mobius_add`], [`exp0`], ...) validate their inputs
//! and work on owned `f64` vectors. The [`kernels`] module holds the same
//! formulas generic over [`Real`](crate::autodiff::Real) so the model can run them on a tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative margin kept between any point and the ball boundary.
pub const BALL_EPS: f64 = 1e-5;

/// Magnitude `c > 0` of the (negative) sectional curvature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Curvature(c))
        } else {
            Err(Error::InvalidInput(format!("curvature must be finite and > 0, got {c}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Euclidean radius `1/√c` of the ball.
    pub fn radius(self) -> f64 {
        1.0 / self.0.sqrt()
    }

    /// Largest norm a stored point may have.
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.0.sqrt()
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;
    fn try_from(c: f64) -> Result<Self> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// A point strictly inside the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincarePoint(Vec<f64>);

impl PoincarePoint {
    pub fn new(coords: Vec<f64>, c: Curvature) -> Result<Self> {
        check_finite(&coords)?;
        if c.get() * norm_sq(&coords) >= 1.0 {
            return Err(Error::Domain(format!(
                "point with norm {} is not inside the ball of radius {}",
                norm_sq(&coords).sqrt(),
                c.radius()
            )));
        }
        Ok(PoincarePoint(coords))
    }

    pub fn origin(dim: usize) -> Self {
        PoincarePoint(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.0).sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Negation `-x`, which stays inside the ball.
    pub fn negated(&self) -> Self {
        PoincarePoint(self.0.iter().map(|x| -x).collect())
    }
}

/// A tangent vector; finite entries, no norm bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_finite(&coords)?;
        Ok(TangentVector(coords))
    }

    pub fn zeros(dim: usize) -> Self {
        TangentVector(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.0).sqrt()
    }

    pub fn scaled(&self, k: f64) -> Self {
        TangentVector(self.0.iter().map(|x| x * k).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_finite(xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!("non-finite coordinate at index {i}"))),
        None => Ok(()),
    }
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("dimension {a} vs {b}")))
    }
}

pub(crate) fn norm_sq(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

/// Rescale `x` onto the ball margin when `c‖x‖² ≥ (1-ε)²`; interior points are
/// returned unchanged. Idempotent bit-for-bit.
pub fn project_to_ball(x: &[f64], c: Curvature) -> PoincarePoint {
    PoincarePoint(project_coords(x.to_vec(), c.get()))
}

pub(crate) fn project_coords(mut x: Vec<f64>, c: f64) -> Vec<f64> {
    let limit = (1.0 - BALL_EPS) / c.sqrt();
    let n = norm_sq(&x).sqrt();
    if n > limit {
        let k = limit / n;
        x.iter_mut().for_each(|v| *v *= k);
        // Rounding can leave the rescaled point a few ulps above the margin.
        while norm_sq(&x).sqrt() > limit {
            x.iter_mut().for_each(|v| *v *= 1.0 - 4.0 * f64::EPSILON);
        }
    }
    x
}

/// Möbius addition `v ⊕_c w`.
pub fn mobius_add(v: &PoincarePoint, w: &PoincarePoint, c: Curvature) -> Result<PoincarePoint> {
    check_dims(v.dim(), w.dim())?;
    check_finite(v.coords())?;
    check_finite(w.coords())?;
    let sum = kernels::mobius_add(v.coords(), w.coords(), c.get());
    check_finite(&sum)?;
    Ok(PoincarePoint(project_coords(sum, c.get())))
}

/// Exponential map at the origin.
pub fn exp0(e: &TangentVector, c: Curvature) -> PoincarePoint {
    PoincarePoint(kernels::exp0(e.coords(), c.get()))
}

/// Logarithmic map at the origin, inverse of [`exp0`] on the ball.
pub fn log0(h: &PoincarePoint, c: Curvature) -> Result<TangentVector> {
    let n = h.norm();
    let sc = c.get().sqrt();
    if sc * n >= 1.0 {
        return Err(Error::Domain(format!("log0 of boundary point (norm {n})")));
    }
    if n == 0.0 {
        return Ok(TangentVector::zeros(h.dim()));
    }
    let k = (sc * n).atanh() / (sc * n);
    Ok(TangentVector(h.coords().iter().map(|x| x * k).collect()))
}

/// `λ_x = 2 / (1 - c‖x‖²)`.
pub fn conformal_factor(x: &PoincarePoint, c: Curvature) -> Result<f64> {
    let d = 1.0 - c.get() * norm_sq(x.coords());
    if d <= 0.0 {
        return Err(Error::Domain("conformal factor at boundary point".into()));
    }
    Ok(2.0 / d)
}

/// Signed distance of `h` to the gyroplane through `o` with normal `r`.
pub fn signed_distance(
    h: &PoincarePoint,
    o: &PoincarePoint,
    r: &TangentVector,
    c: Curvature,
) -> Result<f64> {
    check_dims(h.dim(), o.dim())?;
    check_dims(h.dim(), r.dim())?;
    if r.norm() == 0.0 {
        return Err(Error::DegenerateHyperplane);
    }
    for p in [h, o] {
        if c.get() * norm_sq(p.coords()) >= 1.0 {
            return Err(Error::Domain("point outside the ball".into()));
        }
    }
    Ok(kernels::signed_distance(h.coords(), o.coords(), r.coords(), c.get()))
}

/// Formulas generic over [`Real`]. Inputs are assumed valid.
pub mod kernels {
    use super::BALL_EPS;
    use crate::autodiff::Real;

    /// Smallest admissible `1 - c‖m‖²` inside the hyperplane distance.
    const MIN_GAP: f64 = 1e-15;

    pub fn mobius_add<S: Real>(v: &[S], w: &[S], c: f64) -> Vec<S> {
        let vw = S::dot(v, w);
        let v2 = S::dot(v, v);
        let w2 = S::dot(w, w);
        let a = vw * (2.0 * c) + w2 * c + 1.0;
        let b = -(v2 * c) + 1.0;
        let den = vw * (2.0 * c) + v2 * w2 * (c * c) + 1.0;
        let a = a / den;
        let b = b / den;
        v.iter().zip(w).map(|(&x, &y)| x * a + y * b).collect()
    }

    /// `tanh(√c‖e‖) e / (√c‖e‖)`, clipped to the ball margin.
    pub fn exp0<S: Real>(e: &[S], c: f64) -> Vec<S> {
        let n = S::dot(e, e).sqrt();
        if n.value() == 0.0 {
            // exp0 has unit Jacobian at the origin.
            return e.to_vec();
        }
        let sc = c.sqrt();
        let clip = (1.0 - BALL_EPS).atanh();
        let k = if sc * n.value() >= clip {
            (n * sc).constant(1.0 - BALL_EPS) / (n * sc)
        } else {
            (n * sc).tanh() / (n * sc)
        };
        e.iter().map(|&x| x * k).collect()
    }

    pub fn conformal_factor<S: Real>(x: &[S], c: f64) -> S {
        let d = -(S::dot(x, x) * c) + 1.0;
        d.constant(2.0) / d
    }

    /// `ζ = λ_o‖r‖/√c · asinh(2√c⟨m, r⟩ / ((1 - c‖m‖²)‖r‖))`, `m = (-o) ⊕ h`.
    pub fn signed_distance<S: Real>(h: &[S], o: &[S], r: &[S], c: f64) -> S {
        let neg_o: Vec<S> = o.iter().map(|&x| -x).collect();
        let m = mobius_add(&neg_o, h, c);
        let mr = S::dot(&m, r);
        let gap = (-(S::dot(&m, &m) * c) + 1.0).clamp_min(MIN_GAP);
        let rn = S::dot(r, r).sqrt();
        let lambda = conformal_factor(o, c);
        let sc = c.sqrt();
        let arg = mr * (2.0 * sc) / (gap * rn);
        lambda * rn * arg.asinh() / sc
    }

    pub fn norm<S: Real>(x: &[S]) -> S {
        S::dot(x, x).sqrt()
    }
}
