//! Regularizers for incremental steps: relation distillation over old
//! hyperplanes and the embedding-radius constraint.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::head::{HyperbolicHead, Model, Params};
use crate::poincare::{kernels, PoincarePoint};
use crate::taxonomy::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegWeights {
    pub w_dist: f64,
    pub w_rel: f64,
    pub tau: f64,
    pub k: usize,
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights {
            w_dist: 0.01,
            w_rel: 10.0,
            tau: 10.0,
            k: 3,
        }
    }
}

impl RegWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_dist", self.w_dist), ("w_rel", self.w_rel)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be a finite value >= 0"));
            }
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::config("tau", "must be a finite value >= 0"));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        Ok(())
    }
}

/// Frozen reference distances of one old class.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub slot: usize,
    /// The `k` nearest other hyperplanes, nearest first.
    pub positives: Vec<(usize, f64)>,
    /// Distances to every other old class, in slot order.
    pub reference: Vec<(usize, f64)>,
    pub d_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSets {
    /// Old classes in slot order; a prefix of any later model's classes.
    pub classes: Vec<NodeId>,
    pub anchors: Vec<Anchor>,
}

/// `|ζ_{y2}(o_{y1})|` on slots of a parameter view.
pub fn distance_slots<S: Real>(p: &Params<'_, S>, y1: usize, y2: usize) -> S {
    kernels::signed_distance(p.offset(y1), p.offset(y2), p.orientation(y2), p.c).abs()
}

/// Distance from the offset of `y1` to the hyperplane of `y2`.
pub fn hyperplane_distance(y1: NodeId, y2: NodeId, head: &HyperbolicHead) -> Result<f64> {
    for y in [y1, y2] {
        if y == NodeId::ROOT {
            return Err(Error::ExcludedClass("background has no hyperplane".into()));
        }
    }
    if y1 == y2 {
        return Err(Error::InvalidInput("distance of a class to itself".into()));
    }
    let (a, b) = (head.slot(y1)?, head.slot(y2)?);
    crate::poincare::signed_distance(&head.offsets[a], &head.offsets[b], &head.orientations[b], head.curvature)
        .map(f64::abs)
}

/// Nearest-hyperplane positives for every class of the frozen model.
pub fn build_anchor_sets(old: &Model, k: usize) -> Result<AnchorSets> {
    let n = old.classes().len();
    if n < 2 {
        return Err(Error::config("k", "relation distillation needs at least 2 old classes"));
    }
    if k == 0 || k >= n {
        return Err(Error::config("k", format!("must lie in 1..{n} for {n} old classes")));
    }
    let p = old.view();
    let anchors = (0..n)
        .map(|y| {
            let reference: Vec<(usize, f64)> =
                (0..n).filter(|&i| i != y).map(|i| (i, distance_slots(&p, y, i))).collect();
            let mut sorted = reference.clone();
            sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            sorted.truncate(k);
            let d_max = reference.iter().map(|r| r.1).fold(0.0, f64::max);
            Anchor {
                slot: y,
                positives: sorted,
                reference,
                d_max,
            }
        })
        .collect();
    Ok(AnchorSets {
        classes: old.classes().to_vec(),
        anchors,
    })
}

fn log_sum_exp<S: Real>(xs: &[S]) -> S {
    let m = xs.iter().map(|x| x.value()).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<S> = xs.iter().map(|&x| (x - m).exp()).collect();
    S::sum(&shifted).ln() + m
}

/// InfoNCE term of one anchor given current distances to its candidates.
/// `positive[i]` marks the positives among `dists`.
pub fn anchor_term<S: Real>(dists: &[S], positive: &[bool], d_max: f64, tau: f64) -> S {
    let scale = tau / d_max.max(f64::MIN_POSITIVE);
    let logits: Vec<S> = dists.iter().map(|&d| -(d * scale) + 1.0).collect();
    let pos: Vec<S> = logits
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(&l, _)| l)
        .collect();
    log_sum_exp(&logits) - log_sum_exp(&pos)
}

/// Mean InfoNCE relation loss over the anchors.
pub fn relation_loss_slots<S: Real>(p: &Params<'_, S>, anchors: &AnchorSets, tau: f64) -> S {
    let terms: Vec<S> = anchors
        .anchors
        .iter()
        .map(|a| {
            let dists: Vec<S> = a.reference.iter().map(|&(i, _)| distance_slots(p, a.slot, i)).collect();
            let positive: Vec<bool> = a
                .reference
                .iter()
                .map(|&(i, _)| a.positives.iter().any(|&(j, _)| j == i))
                .collect();
            anchor_term(&dists, &positive, a.d_max, tau)
        })
        .collect();
    S::sum(&terms) / terms.len() as f64
}

/// Check that `model` still carries every anchored class in the same slot.
pub fn check_anchors(model: &Model, anchors: &AnchorSets) -> Result<()> {
    let n = anchors.classes.len();
    if model.classes().len() < n || model.classes()[..n] != anchors.classes[..] {
        return Err(Error::Structural("new head lost or reordered old classes".into()));
    }
    Ok(())
}

pub fn relation_loss(model: &Model, anchors: &AnchorSets, tau: f64) -> Result<f64> {
    check_anchors(model, anchors)?;
    Ok(relation_loss_slots(&model.view(), anchors, tau))
}

/// `(‖h_new‖ - ‖h_old‖)²` for one pixel.
pub fn radius_term<S: Real>(h_new: &[S], old_norm: f64) -> S {
    let d = kernels::norm(h_new) - old_norm;
    d * d
}

/// Mean squared difference of embedding radii.
pub fn distance_correlation_loss(new: &[PoincarePoint], old: &[PoincarePoint]) -> Result<f64> {
    if new.len() != old.len() {
        return Err(Error::Shape(format!("{} new vs {} old embeddings", new.len(), old.len())));
    }
    if new.is_empty() {
        return Err(Error::Shape("empty embedding batch".into()));
    }
    let total: f64 = new
        .iter()
        .zip(old)
        .map(|(a, b)| radius_term(a.coords(), b.norm()))
        .sum();
    Ok(total / new.len() as f64)
}
