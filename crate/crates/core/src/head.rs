//! The trainable model: a two-layer feature map followed by one hyperbolic
//! hyperplane per taxonomy class.
//!
//! All parameters live in one flat vector:
//!
//! ```text
//! [W0 (hidden × d_in), b0 (hidden), W1 (embed × hidden), b1 (embed),
//!  offset_0 (embed), orientation_0 (embed), offset_1, orientation_1, ...]
//! ```
//!
//! Class blocks follow the slot order of [`Model::classes`], which always
//! equals the canonical class order of the taxonomy the model is trained on.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};
use crate::poincare::{self, kernels, Curvature, PoincarePoint, TangentVector};
use crate::taxonomy::NodeId;

/// Per-coordinate std of freshly initialized offsets.
pub const INIT_OFFSET_STD: f64 = 0.01;

/// Scale of the embedding layer's initial weights relative to `1/√fan_in`,
/// so fresh embeddings start well inside the ball.
pub const EMBED_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub d_in: usize,
    pub hidden: usize,
    pub embed: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            d_in: 16,
            hidden: 32,
            embed: 8,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.embed == 0 {
            return Err(Error::config("model", "layer widths must be positive"));
        }
        Ok(())
    }

    /// Number of feature-map parameters.
    pub fn feature_len(&self) -> usize {
        self.hidden * self.d_in + self.hidden + self.embed * self.hidden + self.embed
    }

    fn w0(&self) -> usize {
        0
    }
    fn b0(&self) -> usize {
        self.hidden * self.d_in
    }
    fn w1(&self) -> usize {
        self.b0() + self.hidden
    }
    fn b1(&self) -> usize {
        self.w1() + self.embed * self.hidden
    }

    /// Start of the offset of class slot `k`.
    pub fn offset_at(&self, k: usize) -> usize {
        self.feature_len() + 2 * self.embed * k
    }

    /// Start of the orientation of class slot `k`.
    pub fn orientation_at(&self, k: usize) -> usize {
        self.offset_at(k) + self.embed
    }
}

/// Read-only view of a flat parameter vector, generic over the scalar type.
#[derive(Clone, Copy)]
pub struct Params<'a, S> {
    pub arch: Architecture,
    pub c: f64,
    pub p: &'a [S],
}

impl<'a, S: Real> Params<'a, S> {
    pub fn n_classes(&self) -> usize {
        (self.p.len() - self.arch.feature_len()) / (2 * self.arch.embed)
    }

    pub fn offset(&self, k: usize) -> &'a [S] {
        let s = self.arch.offset_at(k);
        &self.p[s..s + self.arch.embed]
    }

    pub fn orientation(&self, k: usize) -> &'a [S] {
        let s = self.arch.orientation_at(k);
        &self.p[s..s + self.arch.embed]
    }

    /// Euclidean feature `e = FeatureMap(x)`.
    pub fn features(&self, x: &[f64]) -> Vec<S> {
        let a = self.arch;
        let hidden: Vec<S> = (0..a.hidden)
            .map(|j| {
                let row = &self.p[a.w0() + j * a.d_in..a.w0() + (j + 1) * a.d_in];
                S::affine(row, x, self.p[a.b0() + j]).tanh()
            })
            .collect();
        (0..a.embed)
            .map(|j| {
                let row = &self.p[a.w1() + j * a.hidden..a.w1() + (j + 1) * a.hidden];
                S::dot(row, &hidden) + self.p[a.b1() + j]
            })
            .collect()
    }

    /// Ball embedding `h = exp0(e)`.
    pub fn embed(&self, x: &[f64]) -> Vec<S> {
        kernels::exp0(&self.features(x), self.c)
    }

    /// Signed distances of `h` to every class hyperplane.
    pub fn logits(&self, h: &[S]) -> Vec<S> {
        (0..self.n_classes())
            .map(|k| kernels::signed_distance(h, self.offset(k), self.orientation(k), self.c))
            .collect()
    }

    pub fn scores(&self, h: &[S]) -> Vec<S> {
        self.logits(h).into_iter().map(S::sigmoid).collect()
    }
}

/// Per-class quantities of the hyperplane distance that do not depend on
/// the embedded point; computed once and shared by a batch of pixels.
pub struct PreparedHead<S> {
    c: f64,
    neg_offsets: Vec<Vec<S>>,
    offset_sq: Vec<S>,
    orientations: Vec<Vec<S>>,
    /// `λ_o ‖r‖ / √c`.
    prefactor: Vec<S>,
    /// `2√c / ‖r‖`.
    arg_scale: Vec<S>,
}

impl<S: Real> PreparedHead<S> {
    pub fn new(p: &Params<'_, S>) -> Self {
        let n = p.n_classes();
        let sc = p.c.sqrt();
        let mut head = PreparedHead {
            c: p.c,
            neg_offsets: Vec::with_capacity(n),
            offset_sq: Vec::with_capacity(n),
            orientations: Vec::with_capacity(n),
            prefactor: Vec::with_capacity(n),
            arg_scale: Vec::with_capacity(n),
        };
        for k in 0..n {
            let o = p.offset(k);
            let r = p.orientation(k);
            let o2 = S::dot(o, o);
            let rn = S::dot(r, r).sqrt();
            let lambda = kernels::conformal_factor(o, p.c);
            head.neg_offsets.push(o.iter().map(|&x| -x).collect());
            head.offset_sq.push(o2);
            head.orientations.push(r.to_vec());
            head.prefactor.push(lambda * rn / sc);
            head.arg_scale.push(rn.constant(2.0 * sc) / rn);
        }
        head
    }

    pub fn n_classes(&self) -> usize {
        self.neg_offsets.len()
    }

    /// Signed distances of `h` to every hyperplane; equals
    /// [`kernels::signed_distance`] up to rounding.
    pub fn logits(&self, h: &[S]) -> Vec<S> {
        let c = self.c;
        let h2 = S::dot(h, h);
        (0..self.n_classes())
            .map(|k| {
                let v = &self.neg_offsets[k];
                let v2 = self.offset_sq[k];
                let vh = S::dot(v, h);
                let den = vh * (2.0 * c) + v2 * h2 * (c * c) + 1.0;
                let a = (vh * (2.0 * c) + h2 * c + 1.0) / den;
                let b = (-(v2 * c) + 1.0) / den;
                let m: Vec<S> = v.iter().zip(h).map(|(&x, &y)| S::dot(&[x, y], &[a, b])).collect();
                let mr = S::dot(&m, &self.orientations[k]);
                let gap = (-(S::dot(&m, &m) * c) + 1.0).clamp_min(1e-15);
                let arg = mr * self.arg_scale[k] / gap;
                self.prefactor[k] * arg.asinh()
            })
            .collect()
    }

    pub fn scores(&self, h: &[S]) -> Vec<S> {
        self.logits(h).into_iter().map(S::sigmoid).collect()
    }
}

/// Feature map plus hyperbolic head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    arch: Architecture,
    curvature: Curvature,
    classes: Vec<NodeId>,
    params: Vec<f64>,
}

/// Frozen copy of a model at the end of a task.
pub type ModelSnapshot = std::sync::Arc<Model>;

/// Hyperplane parameters, detached from the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperbolicHead {
    pub curvature: Curvature,
    pub classes: Vec<NodeId>,
    pub offsets: Vec<PoincarePoint>,
    pub orientations: Vec<TangentVector>,
}

impl HyperbolicHead {
    pub fn slot(&self, id: NodeId) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == id)
            .ok_or_else(|| Error::Lookup(format!("no hyperplane for node {id}")))
    }
}

impl Model {
    /// Fresh feature map with `N(0, 1/fan_in)` hidden weights, embedding
    /// weights shrunk by [`EMBED_INIT_GAIN`], zero biases, no classes.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, curvature: Curvature, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::with_capacity(arch.feature_len());
        let mut layer = |rows: usize, fan_in: usize, gain: f64, params: &mut Vec<f64>| {
            let std = gain * (1.0 / fan_in as f64).sqrt();
            for _ in 0..rows * fan_in {
                let z: f64 = StandardNormal.sample(rng);
                params.push(z * std);
            }
            params.extend(std::iter::repeat_n(0.0, rows));
        };
        layer(arch.hidden, arch.d_in, 1.0, &mut params);
        layer(arch.embed, arch.hidden, EMBED_INIT_GAIN, &mut params);
        Ok(Model {
            arch,
            curvature,
            classes: Vec::new(),
            params,
        })
    }

    /// Rebuild from raw parts, checking shapes and the ball constraint.
    pub fn from_parts(
        arch: Architecture,
        curvature: Curvature,
        classes: Vec<NodeId>,
        params: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        let want = arch.feature_len() + 2 * arch.embed * classes.len();
        if params.len() != want {
            return Err(Error::Shape(format!(
                "expected {want} parameters, got {}",
                params.len()
            )));
        }
        let model = Model {
            arch,
            curvature,
            classes,
            params,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        if self.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        let c = self.curvature.get();
        for k in 0..self.classes.len() {
            let o = self.view().offset(k);
            if c * o.iter().map(|x| x * x).sum::<f64>() >= 1.0 {
                return Err(Error::Domain(format!("offset of {} outside the ball", self.classes[k])));
            }
            if self.view().orientation(k).iter().all(|&x| x == 0.0) {
                return Err(Error::DegenerateHyperplane);
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    /// Class ids in slot order.
    pub fn classes(&self) -> &[NodeId] {
        &self.classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn view(&self) -> Params<'_, f64> {
        Params {
            arch: self.arch,
            c: self.curvature.get(),
            p: &self.params,
        }
    }

    pub fn head(&self) -> HyperbolicHead {
        let v = self.view();
        HyperbolicHead {
            curvature: self.curvature,
            classes: self.classes.clone(),
            offsets: (0..self.classes.len())
                .map(|k| PoincarePoint::new(v.offset(k).to_vec(), self.curvature).expect("offset inside ball"))
                .collect(),
            orientations: (0..self.classes.len())
                .map(|k| TangentVector::new(v.orientation(k).to_vec()).expect("finite orientation"))
                .collect(),
        }
    }

    /// Append hyperplanes for `ids`: offsets `N(0, 0.01²)` projected to the
    /// ball, orientations `N(0, 1/n)`. Existing parameters are untouched.
    pub fn add_classes<R: Rng + ?Sized>(&mut self, ids: &[NodeId], rng: &mut R) -> Result<()> {
        for (i, id) in ids.iter().enumerate() {
            if self.classes.contains(id) || ids[..i].contains(id) {
                return Err(Error::Duplicate(id.to_string()));
            }
        }
        let n = self.arch.embed;
        let offset_dist = Normal::new(0.0, INIT_OFFSET_STD).expect("valid std");
        let orient_dist = Normal::new(0.0, (1.0 / n as f64).sqrt()).expect("valid std");
        for &id in ids {
            let o: Vec<f64> = (0..n).map(|_| offset_dist.sample(rng)).collect();
            self.params.extend(poincare::project_coords(o, self.curvature.get()));
            let mut r: Vec<f64> = (0..n).map(|_| orient_dist.sample(rng)).collect();
            if r.iter().all(|&x| x == 0.0) {
                r[0] = 1.0;
            }
            self.params.extend(r);
            self.classes.push(id);
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.d_in {
            return Err(Error::Shape(format!(
                "feature dim {} but model expects {}",
                x.len(),
                self.arch.d_in
            )));
        }
        Ok(())
    }

    /// Ball embedding of one pixel.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.view().embed(x))
    }

    /// Per-class sigmoid scores for each input, in slot order.
    pub fn forward(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let v = self.view();
        let head = PreparedHead::new(&v);
        xs.iter()
            .map(|x| {
                self.check_input(x)?;
                Ok(head.scores(&v.embed(x)))
            })
            .collect()
    }

    /// Gradient of a scalar function of the parameters, recorded on one tape.
    pub fn gradient<F>(&self, f: F) -> (f64, Vec<f64>)
    where
        F: for<'t> Fn(Params<'_, Var<'t>>) -> Var<'t>,
    {
        gradient_of(self.arch, self.curvature.get(), &self.params, f)
    }

    /// Overwrite the parameters; used by the optimizer.
    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Value and gradient of `f` at `params`.
pub fn gradient_of<F>(arch: Architecture, c: f64, params: &[f64], f: F) -> (f64, Vec<f64>)
where
    F: for<'t> Fn(Params<'_, Var<'t>>) -> Var<'t>,
{
    let tape = Tape::with_capacity(params.len() * 4);
    let vars = tape.vars(params);
    let out = f(Params { arch, c, p: &vars });
    let mut adj = tape.gradient(out);
    adj.truncate(params.len());
    (out.value(), adj)
}

/// Leaf with the largest product of reflexive-ancestor scores.
///
/// `ancestors[k]` lists the slots whose scores multiply into leaf slot
/// `leaves[k]`. Products are compared in log space; ties go to the first leaf.
pub fn predict_leaf_slots(scores: &[f64], leaves: &[usize], ancestors: &[Vec<usize>]) -> usize {
    let mut best = leaves[0];
    let mut best_score = f64::NEG_INFINITY;
    for (&leaf, anc) in leaves.iter().zip(ancestors) {
        let s: f64 = anc.iter().map(|&u| scores[u].ln()).sum();
        if s > best_score {
            best = leaf;
            best_score = s;
        }
    }
    best
}

/// `lr0 · (1 - iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Schedule(format!("iteration {iter} past the last ({max_iter})")));
    }
    if max_iter == 0 {
        return Ok(lr0);
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// SGD with momentum and weight decay; offsets take Riemannian steps.
#[derive(Debug, Clone)]
pub struct Rsgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Rsgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Rsgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                model.params.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient at parameter {i}")));
        }
        self.velocity.resize(grads.len(), 0.0);
        let arch = model.arch;
        let c = model.curvature.get();
        let n_classes = model.classes.len();
        let (mu, wd) = (self.momentum, self.weight_decay);
        let params = model.params_mut();

        let euclid = |range: std::ops::Range<usize>, params: &mut [f64], vel: &mut [f64]| {
            for i in range {
                let g = grads[i] + wd * params[i];
                vel[i] = mu * vel[i] + g;
                params[i] -= lr * vel[i];
            }
        };
        euclid(0..arch.feature_len(), params, &mut self.velocity);
        for k in 0..n_classes {
            let s = arch.offset_at(k);
            let range = s..s + arch.embed;
            let o2: f64 = params[range.clone()].iter().map(|x| x * x).sum();
            let scale = (1.0 - c * o2).powi(2) / 4.0;
            let mut moved = Vec::with_capacity(arch.embed);
            for i in range.clone() {
                let g = (grads[i] + wd * params[i]) * scale;
                self.velocity[i] = mu * self.velocity[i] + g;
                moved.push(params[i] - lr * self.velocity[i]);
            }
            params[range].copy_from_slice(&poincare::project_coords(moved, c));
            let r = arch.orientation_at(k);
            euclid(r..r + arch.embed, params, &mut self.velocity);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model(n_classes: u32, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            d_in: 4,
            hidden: 5,
            embed: 3,
        };
        let mut m = Model::new(arch, Curvature::new(2.0).unwrap(), &mut rng).unwrap();
        let ids: Vec<NodeId> = (1..=n_classes).map(NodeId).collect();
        m.add_classes(&ids, &mut rng).unwrap();
        m
    }

    fn set_offset(m: &mut Model, k: usize, o: &[f64]) {
        let s = m.arch.offset_at(k);
        m.params[s..s + o.len()].copy_from_slice(o);
    }

    #[test]
    fn score_is_half_on_own_hyperplane() {
        let mut m = small_model(2, 1);
        let x = [0.3, -0.1, 0.2, 0.5];
        let h = m.embed(&x).unwrap();
        set_offset(&mut m, 1, &h);
        let s = m.forward(&[x.to_vec()]).unwrap();
        assert!((s[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flipping_orientation_complements_score() {
        let m = small_model(3, 2);
        let x = vec![0.5, 0.1, -0.4, 0.2];
        let before = m.forward(&[x.clone()]).unwrap()[0][2];
        let mut flipped = m.clone();
        let r = flipped.arch.orientation_at(2);
        for v in &mut flipped.params[r..r + 3] {
            *v = -*v;
        }
        let after = flipped.forward(&[x]).unwrap()[0][2];
        assert!((before + after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_recomposition() {
        let m = small_model(3, 3);
        let x = vec![0.2, -0.7, 0.4, 0.1];
        let s = m.forward(&[x.clone()]).unwrap();
        // Rebuild the feature map by hand.
        let a = m.arch;
        let p = &m.params;
        let hidden: Vec<f64> = (0..a.hidden)
            .map(|j| {
                let mut z = p[a.b0() + j];
                for i in 0..a.d_in {
                    z += p[j * a.d_in + i] * x[i];
                }
                z.tanh()
            })
            .collect();
        let e: Vec<f64> = (0..a.embed)
            .map(|j| {
                let mut z = p[a.b1() + j];
                for i in 0..a.hidden {
                    z += p[a.w1() + j * a.hidden + i] * hidden[i];
                }
                z
            })
            .collect();
        let cv = m.curvature;
        let h = poincare::exp0(&TangentVector::new(e).unwrap(), cv);
        let head = m.head();
        for k in 0..3 {
            let z = poincare::signed_distance(&h, &head.offsets[k], &head.orientations[k], cv).unwrap();
            let want = 1.0 / (1.0 + (-z).exp());
            assert!((s[0][k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn prepared_head_matches_kernel() {
        let m = small_model(4, 15);
        let v = m.view();
        let head = PreparedHead::new(&v);
        for x in [[0.1, 0.2, -0.3, 0.9], [2.0, -1.0, 0.5, 0.0]] {
            let h = v.embed(&x);
            let fast = head.logits(&h);
            let slow = v.logits(&h);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let m = small_model(1, 4);
        assert!(matches!(m.forward(&[vec![1.0; 3]]), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_leaf_uses_ancestor_products() {
        // slots: A=0, a1=1, B=2, b1=3
        let scores = [0.9, 0.8, 0.6, 0.9];
        let leaves = [1, 3];
        let anc = vec![vec![1, 0], vec![3, 2]];
        assert_eq!(predict_leaf_slots(&scores, &leaves, &anc), 1);
        let flat = [0.2, 0.7, 0.4];
        assert_eq!(predict_leaf_slots(&flat, &[0, 1, 2], &[vec![0], vec![1], vec![2]]), 1);
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0, 100, 0.05, 0.9).unwrap(), 0.05);
        assert_eq!(poly_lr(100, 100, 0.05, 0.9).unwrap(), 0.0);
        let mid = poly_lr(50, 100, 0.05, 0.9).unwrap();
        assert!((mid - 0.05 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 0.02679).abs() < 1e-5);
        assert!(matches!(poly_lr(101, 100, 0.05, 0.9), Err(Error::Schedule(_))));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut m = small_model(2, 5);
        let before = m.clone();
        let mut opt = Rsgd::new(0.9, 0.0);
        let zeros = vec![0.0; m.params.len()];
        opt.step(&mut m, &zeros, 0.1).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn origin_offset_gets_quarter_step() {
        let mut m = small_model(1, 6);
        set_offset(&mut m, 0, &[0.0, 0.0, 0.0]);
        let mut g = vec![0.0; m.params.len()];
        let s = m.arch.offset_at(0);
        g[s] = 1.0;
        let mut opt = Rsgd::new(0.0, 0.0);
        opt.step(&mut m, &g, 0.1).unwrap();
        assert!((m.params[s] + 0.1 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn euclidean_step_matches_momentum_sgd() {
        let mut m = small_model(1, 7);
        let w = m.params[0];
        let mut g = vec![0.0; m.params.len()];
        g[0] = 0.5;
        let mut opt = Rsgd::new(0.9, 1e-4);
        opt.step(&mut m, &g, 0.1).unwrap();
        let buf = 0.5 + 1e-4 * w;
        let w1 = w - 0.1 * buf;
        assert!((m.params[0] - w1).abs() < 1e-15);
        opt.step(&mut m, &g, 0.1).unwrap();
        let buf2 = 0.9 * buf + 0.5 + 1e-4 * w1;
        assert!((m.params[0] - (w1 - 0.1 * buf2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut m = small_model(1, 8);
        let before = m.clone();
        let mut g = vec![0.0; m.params.len()];
        g[3] = f64::NAN;
        let err = Rsgd::new(0.9, 0.0).step(&mut m, &g, 0.1).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert_eq!(m, before);
    }

    #[test]
    fn ball_closure_under_random_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in [0.1, 1.0, 2.0, 5.0, 10.0] {
            let mut m = Model::new(Architecture { d_in: 2, hidden: 2, embed: 3 }, Curvature::new(c).unwrap(), &mut rng).unwrap();
            m.add_classes(&[NodeId(1), NodeId(2)], &mut rng).unwrap();
            let mut opt = Rsgd::new(0.9, 1e-4);
            for _ in 0..2_000 {
                let g: Vec<f64> = (0..m.params.len()).map(|_| rng.random_range(-50.0..50.0)).collect();
                opt.step(&mut m, &g, 0.5).unwrap();
                for k in 0..2 {
                    let o = m.view().offset(k);
                    assert!(c * o.iter().map(|x| x * x).sum::<f64>() < 1.0);
                }
            }
        }
    }

    #[test]
    fn add_classes_keeps_old_parameters_bitwise() {
        let mut m = small_model(2, 10);
        let before = m.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        m.add_classes(&[NodeId(3)], &mut rng).unwrap();
        assert_eq!(m.classes.len(), 3);
        assert_eq!(&m.params[..before.len()], &before[..]);
        assert!(matches!(m.add_classes(&[NodeId(1)], &mut rng), Err(Error::Duplicate(_))));
    }

    #[test]
    fn init_offsets_are_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut m = Model::new(Architecture::default(), Curvature::new(2.0).unwrap(), &mut rng).unwrap();
        let ids: Vec<NodeId> = (1..=400).map(NodeId).collect();
        m.add_classes(&ids, &mut rng).unwrap();
        let n = m.arch.embed as f64;
        let bound = INIT_OFFSET_STD * n.sqrt();
        let v = m.view();
        let norms: Vec<f64> = (0..400).map(|k| v.offset(k).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        // ‖o‖² / σ² is χ²(n); E‖o‖² = nσ².
        let mean_sq = norms.iter().map(|x| x * x).sum::<f64>() / 400.0;
        assert!((mean_sq / (bound * bound) - 1.0).abs() < 0.1);
        let within = norms.iter().filter(|&&x| x <= 1.5 * bound).count();
        assert!(within >= 390);
    }

    #[test]
    fn gradient_of_constant_and_quadratic() {
        let m = small_model(1, 13);
        let (v, g) = m.gradient(|p| p.p[0].constant(3.0));
        assert_eq!(v, 3.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let (_, g) = m.gradient(|p| p.p[2] * p.p[2]);
        assert!((g[2] - 2.0 * m.params[2]).abs() < 1e-15);
    }

    #[test]
    fn snapshot_checkpoint_roundtrip() {
        let m = small_model(2, 14);
        let json = serde_json::to_string(&m).unwrap();
        let back: Model = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        Model::from_parts(back.arch, back.curvature, back.classes.clone(), back.params.clone()).unwrap();
    }
}
