//! Hierarchical supervision: tree-min BCE, per-level cross-entropy and their
//! weighted sum.
//!
//! The slot-level functions are generic over [`Real`] so the same code
//! produces loss values and, on a tape, their gradients. Scores are sigmoid
//! outputs aligned with [`SlotIndex::classes`]; the training path works on
//! the logits so that `1 - s` keeps full precision for saturated scores.

use serde::{Deserialize, Serialize};

use crate::autodiff::{select_max, select_min, Real};
use crate::error::{Error, Result};
use crate::taxonomy::{LabelExpansion, SlotIndex, TaxonomyTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub score_floor: f64,
}

impl Default for HierLossConfig {
    fn default() -> Self {
        HierLossConfig {
            alpha: 5.0,
            beta: 1.0,
            score_floor: 1e-7,
        }
    }
}

impl HierLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be a finite value >= 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be a finite value >= 0"));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::config("alpha", "alpha and beta cannot both be 0"));
        }
        if !(self.score_floor > 0.0 && self.score_floor < 0.5) {
            return Err(Error::config("score_floor", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Per-pixel supervision in slot space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// A current leaf: its reflexive ancestors are positives.
    Leaf(usize),
    /// Every class is a negative; no per-level term.
    Background,
    /// Excluded from every loss.
    Ignore,
}

fn neg_log<S: Real>(x: S, floor: f64) -> S {
    -x.clamp_min(floor).ln()
}

/// Tree-min loss of one pixel. `leaf = None` makes every class a negative.
pub fn tree_min_slots<S: Real>(scores: &[S], leaf: Option<usize>, idx: &SlotIndex, floor: f64) -> S {
    let mut positive = vec![false; idx.len()];
    if let Some(leaf) = leaf {
        for &a in &idx.ancestors[leaf] {
            positive[a] = true;
        }
    }
    let mut gathered = Vec::with_capacity(8);
    let terms: Vec<S> = (0..idx.len())
        .map(|v| {
            gathered.clear();
            if positive[v] {
                gathered.extend(idx.ancestors[v].iter().map(|&u| scores[u]));
                neg_log(select_min(&gathered), floor)
            } else {
                gathered.extend(idx.descendants[v].iter().map(|&u| scores[u]));
                neg_log(-select_max(&gathered) + 1.0, floor)
            }
        })
        .collect();
    S::sum(&terms)
}

/// [`tree_min_slots`] evaluated from logits. Equal in exact arithmetic since
/// the sigmoid is monotone; negatives use `σ(-z)` instead of `1 - σ(z)`.
pub fn tree_min_logits<S: Real>(logits: &[S], leaf: Option<usize>, idx: &SlotIndex, floor: f64) -> S {
    let mut positive = vec![false; idx.len()];
    if let Some(leaf) = leaf {
        for &a in &idx.ancestors[leaf] {
            positive[a] = true;
        }
    }
    let mut gathered = Vec::with_capacity(8);
    let terms: Vec<S> = (0..idx.len())
        .map(|v| {
            gathered.clear();
            if positive[v] {
                gathered.extend(idx.ancestors[v].iter().map(|&u| logits[u]));
                neg_log(select_min(&gathered).sigmoid(), floor)
            } else {
                gathered.extend(idx.descendants[v].iter().map(|&u| logits[u]));
                neg_log((-select_max(&gathered)).sigmoid(), floor)
            }
        })
        .collect();
    S::sum(&terms)
}

/// Per-level cross-entropy of one pixel whose ground truth is `leaf`.
pub fn level_ce_slots<S: Real>(scores: &[S], leaf: usize, idx: &SlotIndex, floor: f64) -> S {
    let path = &idx.ancestors[leaf];
    let leaf_level = idx.level[leaf] as usize;
    let subtree_max = |v: usize| {
        let xs: Vec<S> = idx.descendants[v].iter().map(|&u| scores[u]).collect();
        select_max(&xs)
    };
    let mut terms = Vec::with_capacity(leaf_level);
    for l in 1..=leaf_level {
        let nodes = &idx.levels[l - 1];
        if nodes.len() < 2 {
            continue;
        }
        let gt = path[leaf_level - l];
        let mut gt_score = None;
        let maxes: Vec<S> = nodes
            .iter()
            .map(|&v| {
                let m = subtree_max(v);
                if v == gt {
                    gt_score = Some(m);
                }
                m
            })
            .collect();
        let mass = gt_score.expect("ground truth lies on its level") / S::sum(&maxes);
        terms.push(neg_log(mass, floor));
    }
    if terms.is_empty() {
        scores[leaf].constant(0.0)
    } else {
        S::sum(&terms)
    }
}

/// `α·L_TM + β·L_CE` for one pixel given its logits, `None` when the pixel
/// is excluded.
pub fn pixel_loss<S: Real>(logits: &[S], target: Target, idx: &SlotIndex, cfg: &HierLossConfig) -> Option<S> {
    match target {
        Target::Ignore => None,
        Target::Background => Some(tree_min_logits(logits, None, idx, cfg.score_floor) * cfg.alpha),
        Target::Leaf(leaf) => {
            let tm = tree_min_logits(logits, Some(leaf), idx, cfg.score_floor);
            if cfg.beta == 0.0 {
                Some(tm * cfg.alpha)
            } else {
                let scores: Vec<S> = logits.iter().map(|&z| z.sigmoid()).collect();
                let ce = level_ce_slots(&scores, leaf, idx, cfg.score_floor);
                Some(tm * cfg.alpha + ce * cfg.beta)
            }
        }
    }
}

fn check_scores(scores: &[f64], tree: &TaxonomyTree) -> Result<()> {
    if scores.len() != tree.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} classes",
            scores.len(),
            tree.len()
        )));
    }
    Ok(())
}

fn leaf_slot(label: &LabelExpansion, idx: &SlotIndex) -> Result<usize> {
    let slot = idx.slot(label.leaf)?;
    if !idx.is_leaf(slot) {
        return Err(Error::InvalidLabel(format!("{} is not a leaf", label.leaf)));
    }
    Ok(slot)
}

/// Tree-min loss for one pixel with scores aligned to `tree.classes()`.
pub fn tree_min_loss(scores: &[f64], label: &LabelExpansion, tree: &TaxonomyTree, cfg: &HierLossConfig) -> Result<f64> {
    check_scores(scores, tree)?;
    let idx = tree.slot_index();
    let leaf = leaf_slot(label, &idx)?;
    Ok(tree_min_slots(scores, Some(leaf), &idx, cfg.score_floor))
}

/// Per-level cross-entropy for one pixel with scores aligned to `tree.classes()`.
pub fn level_ce_loss(scores: &[f64], label: &LabelExpansion, tree: &TaxonomyTree, cfg: &HierLossConfig) -> Result<f64> {
    check_scores(scores, tree)?;
    let idx = tree.slot_index();
    let leaf = leaf_slot(label, &idx)?;
    Ok(level_ce_slots(scores, leaf, &idx, cfg.score_floor))
}

/// `α·L_TM + β·L_CE` averaged over a batch of labelled pixels.
pub fn hier_loss(batch: &[(Vec<f64>, LabelExpansion)], tree: &TaxonomyTree, cfg: &HierLossConfig) -> Result<f64> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty pixel batch".into()));
    }
    let idx = tree.slot_index();
    let mut total = 0.0;
    for (scores, label) in batch {
        check_scores(scores, tree)?;
        let leaf = leaf_slot(label, &idx)?;
        let tm = tree_min_slots(scores, Some(leaf), &idx, cfg.score_floor);
        let ce = level_ce_slots(scores, leaf, &idx, cfg.score_floor);
        total += cfg.alpha * tm + cfg.beta * ce;
    }
    Ok(total / batch.len() as f64)
}
