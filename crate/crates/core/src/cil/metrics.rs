//! Per-class IoU and split mIoU on the constant test set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cil::protocol::Protocol;
use crate::error::{Error, Result};
use crate::head::{predict_leaf_slots, Model, PreparedHead};
use crate::synth::{Dataset, BACKGROUND};
use crate::taxonomy::{NodeId, TaxonomyTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Base,
    Novel,
    All,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Base, SplitName::Novel, SplitName::All];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Base => "base",
            SplitName::Novel => "novel",
            SplitName::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: NodeId,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ClassIou {
    /// `None` when the class is absent from both ground truth and prediction.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: u32,
    pub classes: Vec<ClassIou>,
    pub base: Vec<NodeId>,
    pub novel: Vec<NodeId>,
}

impl MetricsReport {
    pub fn members(&self, split: SplitName) -> Vec<NodeId> {
        match split {
            SplitName::Base => self.base.clone(),
            SplitName::Novel => self.novel.clone(),
            SplitName::All => self.classes.iter().map(|c| c.class).collect(),
        }
    }

    /// Unweighted mean IoU over the split's classes with a defined IoU.
    pub fn miou(&self, split: SplitName) -> Option<f64> {
        let members = self.members(split);
        let ious: Vec<f64> = self
            .classes
            .iter()
            .filter(|c| members.contains(&c.class))
            .filter_map(ClassIou::iou)
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn class(&self, id: NodeId) -> Option<&ClassIou> {
        self.classes.iter().find(|c| c.class == id)
    }
}

/// Count TP/FP/FN for `classes` from per-pixel ground truth and predictions.
///
/// `gt[i] == None` is background: it never adds a false negative, and a
/// prediction there is a false positive. Predictions outside `classes` add
/// nothing on their own.
pub fn confusion(gt: &[Option<NodeId>], pred: &[NodeId], classes: &[NodeId]) -> Result<Vec<ClassIou>> {
    if gt.len() != pred.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", gt.len(), pred.len())));
    }
    let mut pairs: BTreeMap<(Option<NodeId>, NodeId), u64> = BTreeMap::new();
    for (&g, &p) in gt.iter().zip(pred) {
        *pairs.entry((g, p)).or_default() += 1;
    }
    let mut out: Vec<ClassIou> = classes
        .iter()
        .map(|&class| ClassIou {
            class,
            tp: 0,
            fp: 0,
            fn_: 0,
        })
        .collect();
    let pos: BTreeMap<NodeId, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    for (&(g, p), &n) in &pairs {
        if g == Some(p) {
            if let Some(&i) = pos.get(&p) {
                out[i].tp += n;
            }
            continue;
        }
        if let Some(&i) = g.and_then(|g| pos.get(&g)) {
            out[i].fn_ += n;
        }
        if let Some(&i) = pos.get(&p) {
            out[i].fp += n;
        }
    }
    Ok(out)
}

/// Leaf predictions for every pixel of `features` (rows of `d_in`).
pub fn predict(model: &Model, tree: &TaxonomyTree, features: &[f64]) -> Result<Vec<NodeId>> {
    if model.classes() != tree.classes() {
        return Err(Error::Evaluation("model head does not match the taxonomy".into()));
    }
    let idx = tree.slot_index();
    let leaf_anc: Vec<Vec<usize>> = idx.leaves.iter().map(|&l| idx.ancestors[l].clone()).collect();
    let view = model.view();
    let head = PreparedHead::new(&view);
    let d = model.arch().d_in;
    if !features.len().is_multiple_of(d) {
        return Err(Error::Shape("feature buffer is not a whole number of pixels".into()));
    }
    Ok(features
        .par_chunks(d)
        .map(|x| {
            let scores = head.scores(&view.embed(x));
            idx.classes[predict_leaf_slots(&scores, &idx.leaves, &leaf_anc)]
        })
        .collect())
}

/// Ground truth as seen at task `t`: the evaluated leaf a pixel belongs to,
/// or `None` for true background and classes not yet introduced.
pub fn visible_ground_truth(gt: &[u32], protocol: &Protocol, t: u32) -> Result<Vec<Option<NodeId>>> {
    let full = protocol.full_tree();
    let staged = protocol.staged(t)?;
    let mut table = BTreeMap::new();
    for leaf in full.leaves() {
        let visible = full
            .ancestors(leaf)?
            .into_iter()
            .find(|&a| staged.contains(a))
            .filter(|&v| staged.node(v).map(|n| n.is_leaf).unwrap_or(false));
        table.insert(leaf.0, visible);
    }
    gt.iter()
        .map(|&g| {
            if g == BACKGROUND {
                Ok(None)
            } else {
                table
                    .get(&g)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("label {g} is not a leaf of the taxonomy")))
            }
        })
        .collect()
}

/// Evaluate `model` (whose head follows `tree`) after task `t`.
pub fn evaluate(model: &Model, tree: &TaxonomyTree, test: &Dataset, protocol: &Protocol, t: u32) -> Result<MetricsReport> {
    if test.samples.is_empty() || test.pixels_per_sample() == 0 {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let staged = protocol.staged(t)?;
    let classes = staged.leaves();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for s in &test.samples {
        gt.extend(visible_ground_truth(&s.labels, protocol, t)?);
        pred.extend(predict(model, tree, &s.features)?);
    }
    let counts = confusion(&gt, &pred, &classes)?;
    let intro = |id: NodeId| staged.node(id).map(|n| n.introduced_at_task).unwrap_or(0);
    Ok(MetricsReport {
        task: t,
        base: classes.iter().copied().filter(|&c| intro(c) == 1).collect(),
        novel: classes.iter().copied().filter(|&c| intro(c) >= 2).collect(),
        classes: counts,
    })
}
