//! Per-task label transforms: relabeling with background shift,
//! pseudo-labeling from the previous model, and known-class data splits.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cil::protocol::Protocol;
use crate::error::{Error, Result};
use crate::head::{predict_leaf_slots, Model, PreparedHead};
use crate::hier_loss::Target;
use crate::synth::BACKGROUND;
use crate::taxonomy::{NodeId, SlotIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PixelLabel {
    Class(NodeId),
    Background,
    Ignore,
}

/// Ground truth → task-`t` labels. Pixels whose visible class is not in
/// `C^t` become background.
///
/// The visible class of a leaf is its deepest ancestor-or-self known at
/// task `t`; it only keeps its label when it is one of this task's classes.
pub fn relabel(gt: &[u32], protocol: &Protocol, t: u32) -> Result<Vec<PixelLabel>> {
    let map = relabel_table(protocol, t)?;
    gt.iter()
        .map(|&g| {
            if g == BACKGROUND {
                return Ok(PixelLabel::Background);
            }
            map.get(&g)
                .copied()
                .ok_or_else(|| Error::Data(format!("label {g} is not a leaf of the taxonomy")))
        })
        .collect()
}

fn relabel_table(protocol: &Protocol, t: u32) -> Result<HashMap<u32, PixelLabel>> {
    let full = protocol.full_tree();
    let staged = protocol.staged(t)?;
    let current = &protocol.task(t)?.new_classes;
    let mut map = HashMap::new();
    for leaf in full.leaves() {
        let visible = full
            .ancestors(leaf)?
            .into_iter()
            .find(|&a| staged.contains(a));
        let label = match visible {
            Some(v) if current.contains(&v) && staged.node(v)?.is_leaf => PixelLabel::Class(v),
            _ => PixelLabel::Background,
        };
        map.insert(leaf.0, label);
    }
    Ok(map)
}

/// Replace background pixels by the old model's leaf prediction with
/// probability `rate`; the rest become ignore.
///
/// `features` holds one `d_in` row per label. `old_index` is the slot index
/// of the tree the old model was trained on.
pub fn pseudo_label(
    labels: &[PixelLabel],
    features: &[f64],
    old: &Model,
    old_index: &SlotIndex,
    rate: f64,
    t: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PixelLabel>> {
    if t < 2 {
        return Err(Error::Protocol("pseudo-labels need a previous task".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config("pseudo_label_rate", "must lie in [0, 1]"));
    }
    if old.classes() != old_index.classes.as_slice() {
        return Err(Error::Protocol("old model does not match its taxonomy".into()));
    }
    let d = old.arch().d_in;
    if features.len() != labels.len() * d {
        return Err(Error::Shape("features and labels disagree".into()));
    }
    let view = old.view();
    let head = PreparedHead::new(&view);
    let leaf_anc: Vec<Vec<usize>> = old_index.leaves.iter().map(|&l| old_index.ancestors[l].clone()).collect();
    labels
        .iter()
        .enumerate()
        .map(|(p, &label)| {
            if label != PixelLabel::Background {
                return Ok(label);
            }
            let keep = rng.random::<f64>() < rate;
            if !keep {
                return Ok(PixelLabel::Ignore);
            }
            let x = &features[p * d..(p + 1) * d];
            let scores = head.scores(&view.embed(x));
            let slot = predict_leaf_slots(&scores, &old_index.leaves, &leaf_anc);
            Ok(PixelLabel::Class(old_index.classes[slot]))
        })
        .collect()
}

/// Loss targets in slot space. Classes that are not current leaves (a
/// pseudo-label on a node that has since been split) are ignored, as is
/// background when `background_negatives` is off.
pub fn to_targets(labels: &[PixelLabel], index: &SlotIndex, background_negatives: bool) -> Result<Vec<Target>> {
    labels
        .iter()
        .map(|&l| {
            Ok(match l {
                PixelLabel::Ignore => Target::Ignore,
                PixelLabel::Background if background_negatives => Target::Background,
                PixelLabel::Background => Target::Ignore,
                PixelLabel::Class(id) => {
                    let slot = index.slot(id)?;
                    if index.is_leaf(slot) {
                        Target::Leaf(slot)
                    } else {
                        Target::Ignore
                    }
                }
            })
        })
        .collect()
}

/// Deterministic partition of `n` samples into one disjoint list per ratio.
pub fn split_known_class(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::config("split_ratios", "ratios must be >= 0"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config("split_ratios", format!("ratios sum to {sum}, not 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(ratios.len());
    let mut start = 0;
    let mut acc = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        acc += r;
        let end = if i + 1 == ratios.len() {
            n
        } else {
            ((acc * n as f64).round() as usize).clamp(start, n)
        };
        let mut part = order[start..end].to_vec();
        part.sort_unstable();
        out.push(part);
        start = end;
    }
    Ok(out)
}
