//! One task of training: hierarchical loss plus the incremental regularizers,
//! optimized with RSGD on a poly schedule.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape};
use crate::error::{Error, Result};
use crate::head::{poly_lr, Model, Params, PreparedHead, Rsgd};
use crate::hier_loss::{pixel_loss, HierLossConfig, Target};
use crate::increg::{check_anchors, radius_term, relation_loss_slots, AnchorSets, RegWeights};
use crate::taxonomy::SlotIndex;

/// Pixels recorded on one tape.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Rescale each batch gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
    pub loss: HierLossConfig,
    pub reg: RegWeights,
    pub use_dist: bool,
    pub use_rel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1024,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            grad_clip: None,
            loss: HierLossConfig::default(),
            reg: RegWeights::default(),
            use_dist: true,
            use_rel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(Error::config("poly_power", "must be >= 0"));
        }
        if let Some(g) = self.grad_clip {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::config("grad_clip", "must be a finite value > 0"));
            }
        }
        self.loss.validate()?;
        self.reg.validate()
    }
}

/// Training pixels of one task with ignore pixels already removed.
#[derive(Debug, Clone, Default)]
pub struct PixelSet {
    pub d_in: usize,
    /// Row-major, `d_in` values per pixel.
    pub features: Vec<f64>,
    pub targets: Vec<Target>,
    /// Embedding radius of each pixel under the previous model.
    pub old_norms: Option<Vec<f64>>,
}

impl PixelSet {
    /// Keep the pixels whose target is not [`Target::Ignore`].
    pub fn from_targets(d_in: usize, features: &[f64], targets: &[Target]) -> Result<Self> {
        if features.len() != targets.len() * d_in {
            return Err(Error::Shape(format!(
                "{} feature values for {} pixels of width {d_in}",
                features.len(),
                targets.len()
            )));
        }
        let mut out = PixelSet {
            d_in,
            ..PixelSet::default()
        };
        for (i, &t) in targets.iter().enumerate() {
            if t != Target::Ignore {
                out.features.extend_from_slice(&features[i * d_in..(i + 1) * d_in]);
                out.targets.push(t);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }

    /// Record each pixel's embedding radius under `old`.
    pub fn attach_old_norms(&mut self, old: &Model) -> Result<()> {
        if old.arch().d_in != self.d_in {
            return Err(Error::Shape("old model has a different input width".into()));
        }
        let view = old.view();
        let norms = self
            .features
            .par_chunks(self.d_in)
            .map(|x| view.embed(x).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.old_norms = Some(norms);
        Ok(())
    }
}

/// Components of the objective on one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub hier: f64,
    pub dist: f64,
    pub rel: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts, w: f64) {
        self.hier += w * o.hier;
        self.dist += w * o.dist;
        self.rel += w * o.rel;
        self.total += w * o.total;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Pixel-weighted mean of each epoch's batch losses.
    pub epochs: Vec<LossParts>,
    pub steps: usize,
}

/// Everything that stays fixed while the parameters move.
pub struct Objective<'a> {
    pub index: &'a SlotIndex,
    pub data: &'a PixelSet,
    pub anchors: Option<&'a AnchorSets>,
    pub cfg: &'a TrainConfig,
}

impl Objective<'_> {
    fn dist_weight(&self) -> f64 {
        if self.cfg.use_dist && self.data.old_norms.is_some() {
            self.cfg.reg.w_dist
        } else {
            0.0
        }
    }

    fn rel_anchors(&self) -> Option<&AnchorSets> {
        self.anchors.filter(|_| self.cfg.use_rel && self.cfg.reg.w_rel > 0.0)
    }

    /// Loss and gradient on the pixels `batch`:
    /// `mean hier + w_dist · mean radius + w_rel · relation`.
    pub fn value_and_gradient(&self, model: &Model, batch: &[usize]) -> Result<(LossParts, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Training("empty batch".into()));
        }
        if model.classes() != self.index.classes.as_slice() {
            return Err(Error::Training("model head does not match the task taxonomy".into()));
        }
        let arch = model.arch();
        let c = model.curvature().get();
        let params = model.params();
        let inv = 1.0 / batch.len() as f64;
        let w_dist = self.dist_weight();

        let chunks: Vec<(LossParts, Vec<f64>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let tape = Tape::with_capacity(params.len() * 2 + chunk.len() * 2048);
                let vars = tape.vars(params);
                let p = Params { arch, c, p: &vars };
                let head = PreparedHead::new(&p);
                let mut hier = Vec::with_capacity(chunk.len());
                let mut dist = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let h = p.embed(self.data.pixel(i));
                    let logits = head.logits(&h);
                    if let Some(l) = pixel_loss(&logits, self.data.targets[i], self.index, &self.cfg.loss) {
                        hier.push(l);
                    }
                    if w_dist > 0.0 {
                        let norms = self.data.old_norms.as_ref().expect("checked");
                        dist.push(radius_term(&h, norms[i]));
                    }
                }
                let zero = vars[0].constant(0.0);
                let hier_sum = if hier.is_empty() { zero } else { Real::sum(&hier) };
                let dist_sum = if dist.is_empty() { zero } else { Real::sum(&dist) };
                let total = hier_sum * inv + dist_sum * (w_dist * inv);
                let mut grad = tape.gradient(total);
                grad.truncate(params.len());
                let parts = LossParts {
                    hier: hier_sum.value() * inv,
                    dist: dist_sum.value() * inv,
                    rel: 0.0,
                    total: total.value(),
                };
                (parts, grad)
            })
            .collect();

        let mut parts = LossParts::default();
        let mut grad = vec![0.0; params.len()];
        for (p, g) in &chunks {
            parts.add(p, 1.0);
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(anchors) = self.rel_anchors() {
            check_anchors(model, anchors)?;
            let w = self.cfg.reg.w_rel;
            let tau = self.cfg.reg.tau;
            let tape = Tape::new();
            let vars = tape.vars(params);
            let rel = relation_loss_slots(&Params { arch, c, p: &vars }, anchors, tau);
            let g = tape.gradient(rel);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += w * b;
            }
            parts.rel = rel.value();
            parts.total += w * rel.value();
        }
        Ok((parts, grad))
    }
}

/// Train `model` on one task for `epochs` passes with pixel-level shuffled
/// mini-batches.
pub fn train_task(
    model: &mut Model,
    objective: &Objective<'_>,
    epochs: usize,
    lr0: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainStats> {
    let cfg = objective.cfg;
    cfg.validate()?;
    let n = objective.data.len();
    if n == 0 {
        return Err(Error::Training("no labelled pixels for this task".into()));
    }
    if let Some(norms) = &objective.data.old_norms {
        if norms.len() != n {
            return Err(Error::Shape("old radii do not match the pixel set".into()));
        }
    }
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let max_iter = epochs * batches_per_epoch;
    let mut opt = Rsgd::new(cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = TrainStats::default();
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut acc = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            let lr = poly_lr(stats.steps, max_iter, lr0, cfg.poly_power)?;
            let (parts, mut grad) = objective.value_and_gradient(model, batch)?;
            if !parts.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {}, step {} (lr {lr:.3e}; hier {}, dist {}, rel {})",
                    epoch + 1,
                    stats.steps,
                    parts.hier,
                    parts.dist,
                    parts.rel
                )));
            }
            if let Some(max) = cfg.grad_clip {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    grad.iter_mut().for_each(|g| *g *= max / norm);
                }
            }
            opt.step(model, &grad, lr).map_err(|e| match e {
                Error::Training(m) => Error::Training(format!("epoch {}, step {}: {m}", epoch + 1, stats.steps)),
                other => other,
            })?;
            acc.add(&parts, batch.len() as f64 / n as f64);
            stats.steps += 1;
        }
        stats.epochs.push(acc);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Architecture;
    use crate::increg::build_anchor_sets;
    use crate::poincare::Curvature;
    use crate::taxonomy::{parse_taxonomy, TaxonomyTree};
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    const REF9: &str = include_str!("../../../../configs/ref9.tax");

    fn arch() -> Architecture {
        Architecture {
            d_in: 4,
            hidden: 8,
            embed: 3,
        }
    }

    fn setup(seed: u64, n: usize) -> (TaxonomyTree, Model, PixelSet) {
        let tree = parse_taxonomy(REF9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::new(arch(), Curvature::new(2.0).unwrap(), &mut rng).unwrap();
        model.add_classes(tree.classes(), &mut rng).unwrap();
        let idx = tree.slot_index();
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let k = rng.random_range(0..idx.leaves.len() + 1);
            if k == idx.leaves.len() {
                targets.push(Target::Background);
                features.extend((0..4).map(|_| noise.sample(&mut rng)));
            } else {
                targets.push(Target::Leaf(idx.leaves[k]));
                let centre = [k as f64 / 3.0 - 1.0, (k % 3) as f64 - 1.0, 0.5, -0.5];
                features.extend(centre.iter().map(|m| m + noise.sample(&mut rng)));
            }
        }
        let data = PixelSet::from_targets(4, &features, &targets).unwrap();
        (tree, model, data)
    }

    #[test]
    fn ignore_pixels_are_dropped() {
        let set = PixelSet::from_targets(2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[Target::Leaf(1), Target::Ignore, Target::Background]).unwrap();
        assert_eq!(set.features, vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(set.targets, vec![Target::Leaf(1), Target::Background]);
        assert!(PixelSet::from_targets(2, &[1.0], &[Target::Background]).is_err());
    }

    #[test]
    fn first_task_regularizers_are_zero() {
        let (tree, model, data) = setup(1, 100);
        let idx = tree.slot_index();
        let cfg = TrainConfig::default();
        let batch: Vec<usize> = (0..data.len()).collect();
        let obj = Objective {
            index: &idx,
            data: &data,
            anchors: None,
            cfg: &cfg,
        };
        let (parts, _) = obj.value_and_gradient(&model, &batch).unwrap();
        assert_eq!(parts.dist, 0.0);
        assert_eq!(parts.rel, 0.0);
        assert_eq!(parts.total, parts.hier);
    }

    #[test]
    fn chunked_gradient_matches_single_tape() {
        let (tree, model, mut data) = setup(2, 150);
        let idx = tree.slot_index();
        data.attach_old_norms(&model).unwrap();
        let anchors = build_anchor_sets(&model, 3).unwrap();
        let cfg = TrainConfig::default();
        let obj = Objective {
            index: &idx,
            data: &data,
            anchors: Some(&anchors),
            cfg: &cfg,
        };
        let batch: Vec<usize> = (0..data.len()).rev().collect();
        let (parts, grad) = obj.value_and_gradient(&model, &batch).unwrap();
        let (value, want) = model.gradient(|p| {
            let head = PreparedHead::new(&p);
            let mut terms = Vec::new();
            for &i in &batch {
                let h = p.embed(data.pixel(i));
                terms.push(pixel_loss(&head.logits(&h), data.targets[i], &idx, &cfg.loss).unwrap() / batch.len() as f64);
                terms.push(radius_term(&h, data.old_norms.as_ref().unwrap()[i]) * (cfg.reg.w_dist / batch.len() as f64));
            }
            terms.push(relation_loss_slots(&p, &anchors, cfg.reg.tau) * cfg.reg.w_rel);
            Real::sum(&terms)
        });
        assert!((parts.total - value).abs() < 1e-9 * value.abs().max(1.0));
        for (a, b) in grad.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn full_batch_loss_decreases() {
        let (tree, mut model, data) = setup(3, 400);
        let idx = tree.slot_index();
        let cfg = TrainConfig {
            batch_size: data.len(),
            ..TrainConfig::default()
        };
        let obj = Objective {
            index: &idx,
            data: &data,
            anchors: None,
            cfg: &cfg,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let stats = train_task(&mut model, &obj, 10, 1e-3, &mut rng).unwrap();
        let losses: Vec<f64> = stats.epochs.iter().map(|p| p.total).collect();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0], "{losses:?}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (tree, mut model, data) = setup(4, 300);
            let idx = tree.slot_index();
            let cfg = TrainConfig {
                batch_size: 64,
                ..TrainConfig::default()
            };
            let obj = Objective {
                index: &idx,
                data: &data,
                anchors: None,
                cfg: &cfg,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            train_task(&mut model, &obj, 3, 0.05, &mut rng).unwrap();
            model
        };
        assert_eq!(run().params(), run().params());
    }

    #[test]
    fn divergence_is_reported() {
        let (tree, mut model, mut data) = setup(5, 50);
        data.features[7] = f64::NAN;
        let idx = tree.slot_index();
        let cfg = TrainConfig::default();
        let obj = Objective {
            index: &idx,
            data: &data,
            anchors: None,
            cfg: &cfg,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = train_task(&mut model, &obj, 2, 0.01, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
    }

    #[test]
    fn clipped_step_is_bounded() {
        let (tree, mut model, data) = setup(7, 200);
        let idx = tree.slot_index();
        let cfg = TrainConfig {
            batch_size: data.len(),
            momentum: 0.0,
            weight_decay: 0.0,
            grad_clip: Some(1e-3),
            ..TrainConfig::default()
        };
        let obj = Objective {
            index: &idx,
            data: &data,
            anchors: None,
            cfg: &cfg,
        };
        let before = model.params().to_vec();
        train_task(&mut model, &obj, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let moved: f64 = model.params().iter().zip(&before).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(moved > 0.0 && moved <= 1e-3 * (1.0 + 1e-12), "{moved}");

        let bad = TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { .. })));
    }
}
