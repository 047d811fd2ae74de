//! End-to-end protocol execution: config, per-task pipeline and results.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cil::labels::{pseudo_label, relabel, split_known_class, to_targets};
use crate::cil::metrics::{evaluate, MetricsReport};
use crate::cil::protocol::{IncrementMode, Protocol, TaskSpec};
use crate::cil::train::{train_task, Objective, PixelSet, TrainConfig, TrainStats};
use crate::config;
use crate::error::{Error, Result};
use crate::head::{Architecture, Model, ModelSnapshot};
use crate::hier_loss::HierLossConfig;
use crate::increg::{build_anchor_sets, RegWeights};
use crate::poincare::Curvature;
use crate::synth::Dataset;
use crate::taxonomy::{parse_taxonomy, TaxonomyTree};

const STREAM_INIT: u64 = 1;
const STREAM_EXPAND: u64 = 100;
const STREAM_SHUFFLE: u64 = 200;
const STREAM_PSEUDO: u64 = 300;
const STREAM_SPLIT: u64 = 400;

/// Which parts of the method are switched on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub pseudo_labels: bool,
    pub pseudo_label_rate: f64,
    /// Train on the staged hierarchy; off means a flat label set with BCE.
    pub hierarchical: bool,
    pub dist: bool,
    pub rel: bool,
    /// Use background pixels as all-negative examples.
    pub background_negatives: bool,
}

impl Variant {
    pub const PRESETS: [&'static str; 4] = ["naive", "pl", "pl-hier", "full"];

    pub fn preset(name: &str) -> Result<Self> {
        let (pl, hier, reg) = match name {
            "naive" => (false, false, false),
            "pl" => (true, false, false),
            "pl-hier" => (true, true, false),
            "full" => (true, true, true),
            other => {
                return Err(Error::config(
                    "variant",
                    format!("unknown preset `{other}`; expected one of {}", Self::PRESETS.join(", ")),
                ))
            }
        };
        Ok(Variant {
            name: name.to_string(),
            pseudo_labels: pl,
            pseudo_label_rate: 1.0,
            hierarchical: hier,
            dist: reg,
            rel: reg,
            background_negatives: true,
        })
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::preset("full").expect("preset exists")
    }
}

/// A complete, explicit run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Taxonomy file, relative to the config file.
    pub taxonomy: PathBuf,
    pub mode: IncrementMode,
    pub seed: u64,
    pub curvature: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub split_ratios: Vec<f64>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub model: Architecture,
    #[serde(default)]
    pub loss: HierLossConfig,
    #[serde(default)]
    pub reg: RegWeights,
    pub tasks: Vec<TaskSpec>,
}

impl RunConfig {
    /// Read a TOML run config and its taxonomy.
    pub fn load(path: &Path) -> Result<(Self, TaxonomyTree)> {
        let mut cfg: RunConfig = config::read_toml(path)?;
        cfg.taxonomy = config::resolve(path, &cfg.taxonomy);
        let text = std::fs::read_to_string(&cfg.taxonomy)
            .map_err(|e| Error::config("taxonomy", format!("{}: {e}", cfg.taxonomy.display())))?;
        let tree = parse_taxonomy(&text)?;
        Ok((cfg, tree))
    }

    pub fn run_id(&self) -> String {
        format!("{}.{}.s{}", self.name, self.variant.name, self.seed)
    }

    /// Swap in a named variant preset.
    pub fn with_variant(mut self, name: &str) -> Result<Self> {
        let rate = self.variant.pseudo_label_rate;
        let negatives = self.variant.background_negatives;
        self.variant = Variant::preset(name)?;
        self.variant.pseudo_label_rate = rate;
        self.variant.background_negatives = negatives;
        Ok(self)
    }

    /// Loss weights actually used: flat variants train with plain BCE.
    pub fn effective_loss(&self) -> HierLossConfig {
        if self.variant.hierarchical {
            self.loss
        } else {
            HierLossConfig { beta: 0.0, ..self.loss }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            grad_clip: self.grad_clip,
            loss: self.effective_loss(),
            reg: self.reg,
            use_dist: self.variant.dist,
            use_rel: self.variant.rel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\', ',']) {
            return Err(Error::config("name", "must be non-empty without `/`, `\\` or `,`"));
        }
        Curvature::new(self.curvature).map_err(|e| Error::config("curvature", e.to_string()))?;
        self.model.validate()?;
        if !(0.0..=1.0).contains(&self.variant.pseudo_label_rate) {
            return Err(Error::config("pseudo_label_rate", "must lie in [0, 1]"));
        }
        if self.tasks.iter().any(|t| t.epochs == 0) {
            return Err(Error::config("epochs", "every task needs at least one epoch"));
        }
        self.train_config().validate()
    }

    pub fn protocol(&self, tree: TaxonomyTree) -> Result<Protocol> {
        Protocol::new(tree, self.mode, &self.tasks, self.split_ratios.clone())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Outcome of one task.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task: u32,
    pub model: ModelSnapshot,
    pub metrics: MetricsReport,
    pub stats: TrainStats,
    pub train_pixels: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: RunConfig,
    pub protocol: Protocol,
    pub tasks: Vec<TaskOutcome>,
}

impl RunResult {
    pub fn run_id(&self) -> String {
        self.config.run_id()
    }
}

/// Append hyperplanes for the classes of `tree` the model lacks; the result
/// must follow `tree`'s class order exactly.
pub fn expand_head(model: &mut Model, tree: &TaxonomyTree, rng: &mut ChaCha8Rng) -> Result<()> {
    let fresh: Vec<_> = tree
        .classes()
        .iter()
        .copied()
        .filter(|id| !model.classes().contains(id))
        .collect();
    model.add_classes(&fresh, rng)?;
    if model.classes() != tree.classes() {
        return Err(Error::Structural("expanded head does not follow the taxonomy order".into()));
    }
    Ok(())
}

/// Sample indices of the training set each task sees.
pub fn task_samples(cfg: &RunConfig, protocol: &Protocol, n: usize) -> Result<Vec<Vec<usize>>> {
    match protocol.mode {
        IncrementMode::Background => Ok(vec![(0..n).collect(); protocol.num_tasks()]),
        IncrementMode::KnownClass => {
            let seed = stream(cfg.seed, STREAM_SPLIT).next_u64();
            split_known_class(n, &protocol.split_ratios, seed)
        }
    }
}

fn check_dataset(data: &Dataset, tree: &TaxonomyTree, arch: Architecture, what: &str) -> Result<()> {
    if data.taxonomy_hash_hex() != tree.content_hash() {
        return Err(Error::Incompatible(format!("{what} data was generated from a different taxonomy")));
    }
    if data.header.d_in != arch.d_in {
        return Err(Error::config(
            "model",
            format!("d_in is {} but the {what} data has {}", arch.d_in, data.header.d_in),
        ));
    }
    Ok(())
}

/// Called after each task finishes; a failure aborts the run.
pub type TaskHook<'a> = dyn FnMut(&TaskOutcome, &Protocol) -> Result<()> + 'a;

/// Run every task of the protocol in order.
pub fn run_protocol(cfg: &RunConfig, tree: TaxonomyTree, train: &Dataset, test: &Dataset) -> Result<RunResult> {
    run_protocol_with(cfg, tree, train, test, &mut |_, _| Ok(()))
}

pub fn run_protocol_with(
    cfg: &RunConfig,
    tree: TaxonomyTree,
    train: &Dataset,
    test: &Dataset,
    on_task: &mut TaskHook<'_>,
) -> Result<RunResult> {
    cfg.validate()?;
    let protocol = cfg.protocol(tree)?;
    check_dataset(train, protocol.full_tree(), cfg.model, "training")?;
    check_dataset(test, protocol.full_tree(), cfg.model, "test")?;
    let tcfg = cfg.train_config();
    let curvature = Curvature::new(cfg.curvature)?;
    let splits = task_samples(cfg, &protocol, train.samples.len())?;
    let d = cfg.model.d_in;

    let mut model = Model::new(cfg.model, curvature, &mut stream(cfg.seed, STREAM_INIT))?;
    let mut outcomes: Vec<TaskOutcome> = Vec::new();
    for step in &protocol.tasks {
        let started = Instant::now();
        let t = step.index;
        let tree_t = protocol.tree_for(t, cfg.variant.hierarchical)?;
        expand_head(&mut model, tree_t, &mut stream(cfg.seed, STREAM_EXPAND + t as u64))?;
        let index = tree_t.slot_index();
        let previous = outcomes.last().map(|o| (o.model.clone(), o.task));
        let old_index = match &previous {
            Some((_, pt)) => Some(protocol.tree_for(*pt, cfg.variant.hierarchical)?.slot_index()),
            None => None,
        };

        let mut pl_rng = stream(cfg.seed, STREAM_PSEUDO + t as u64);
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for &i in &splits[t as usize - 1] {
            let sample = &train.samples[i];
            let mut labels = relabel(&sample.labels, &protocol, t)?;
            if let (true, Some((old, _)), Some(old_index)) = (cfg.variant.pseudo_labels, &previous, &old_index) {
                labels = pseudo_label(&labels, &sample.features, old, old_index, cfg.variant.pseudo_label_rate, t, &mut pl_rng)?;
            }
            targets.extend(to_targets(&labels, &index, cfg.variant.background_negatives)?);
            features.extend_from_slice(&sample.features);
        }
        let mut data = PixelSet::from_targets(d, &features, &targets)?;
        drop(features);
        let anchors = match &previous {
            Some((old, _)) if cfg.variant.rel => Some(build_anchor_sets(old, cfg.reg.k)?),
            _ => None,
        };
        if let (true, Some((old, _))) = (cfg.variant.dist, &previous) {
            data.attach_old_norms(old)?;
        }
        let objective = Objective {
            index: &index,
            data: &data,
            anchors: anchors.as_ref(),
            cfg: &tcfg,
        };
        let stats = train_task(
            &mut model,
            &objective,
            step.epochs,
            step.lr0,
            &mut stream(cfg.seed, STREAM_SHUFFLE + t as u64),
        )
        .map_err(|e| match e {
            Error::Training(m) => Error::Training(format!("task {t}: {m}")),
            other => other,
        })?;
        let snapshot: ModelSnapshot = Arc::new(model.clone());
        let metrics = evaluate(&snapshot, tree_t, test, &protocol, t)?;
        let outcome = TaskOutcome {
            task: t,
            model: snapshot,
            metrics,
            stats,
            train_pixels: data.len(),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_task(&outcome, &protocol)?;
        outcomes.push(outcome);
    }
    Ok(RunResult {
        config: cfg.clone(),
        protocol,
        tasks: outcomes,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::synth::{ClassGenerator, Split, SynthConfig};

    const REF9: &str = include_str!("../../../../configs/ref9.tax");

    pub(crate) fn small_config(mode: IncrementMode) -> RunConfig {
        let tasks = match mode {
            IncrementMode::Background => vec![
                TaskSpec {
                    classes: ["a1", "a2", "b1", "b2", "c1", "c2"].map(String::from).to_vec(),
                    epochs: 2,
                    lr0: 0.05,
                },
                TaskSpec {
                    classes: ["a3", "b3", "c3"].map(String::from).to_vec(),
                    epochs: 2,
                    lr0: 0.01,
                },
            ],
            IncrementMode::KnownClass => vec![
                TaskSpec {
                    classes: ["A", "B", "C"].map(String::from).to_vec(),
                    epochs: 2,
                    lr0: 0.05,
                },
                TaskSpec {
                    classes: ["a1", "a2", "a3", "b1", "b2", "b3", "c1", "c2", "c3"].map(String::from).to_vec(),
                    epochs: 2,
                    lr0: 0.01,
                },
            ],
        };
        RunConfig {
            name: "unit".into(),
            taxonomy: "ref9.tax".into(),
            mode,
            seed: 3,
            curvature: 2.0,
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            grad_clip: None,
            split_ratios: if mode == IncrementMode::KnownClass { vec![0.5, 0.5] } else { vec![] },
            variant: Variant::default(),
            model: Architecture {
                d_in: 8,
                hidden: 8,
                embed: 4,
            },
            loss: HierLossConfig::default(),
            reg: RegWeights {
                k: 1,
                ..RegWeights::default()
            },
            tasks,
        }
    }

    pub(crate) fn small_data() -> (TaxonomyTree, Dataset, Dataset) {
        let tree = parse_taxonomy(REF9).unwrap();
        let gen = ClassGenerator::new(
            SynthConfig {
                taxonomy: "ref9.tax".into(),
                height: 8,
                width: 8,
                train_samples: 8,
                test_samples: 4,
                d_in: 8,
                sites: 10,
                ..SynthConfig::default()
            },
            tree.clone(),
        )
        .unwrap();
        (tree, gen.generate(Split::Train).unwrap(), gen.generate(Split::Test).unwrap())
    }

    #[test]
    fn presets() {
        let naive = Variant::preset("naive").unwrap();
        assert!(!naive.pseudo_labels && !naive.hierarchical && !naive.dist && !naive.rel);
        let full = Variant::preset("full").unwrap();
        assert!(full.pseudo_labels && full.hierarchical && full.dist && full.rel);
        assert!(matches!(Variant::preset("bogus"), Err(Error::Config { .. })));
    }

    #[test]
    fn flat_variant_uses_bce() {
        let cfg = small_config(IncrementMode::Background).with_variant("pl").unwrap();
        assert_eq!(cfg.effective_loss().beta, 0.0);
        assert_eq!(cfg.effective_loss().alpha, cfg.loss.alpha);
        assert_eq!(cfg.run_id(), "unit.pl.s3");
    }

    #[test]
    fn background_run_covers_every_task() {
        let (tree, train, test) = small_data();
        let cfg = small_config(IncrementMode::Background);
        let result = run_protocol(&cfg, tree, &train, &test).unwrap();
        assert_eq!(result.tasks.len(), 2);
        assert_eq!(result.tasks[0].model.classes().len(), 9);
        assert_eq!(result.tasks[1].model.classes().len(), 12);
        assert!(result.tasks[1].metrics.novel.len() == 3);
    }

    #[test]
    fn known_class_expansion_keeps_old_parameters() {
        let (tree, train, test) = small_data();
        let cfg = small_config(IncrementMode::KnownClass);
        let result = run_protocol(&cfg, tree, &train, &test).unwrap();
        let old = &result.tasks[0].model;
        let mut expanded = (**old).clone();
        expand_head(&mut expanded, result.protocol.staged(2).unwrap(), &mut stream(1, 2)).unwrap();
        assert_eq!(&expanded.params()[..old.params().len()], old.params());
        assert_eq!(expanded.classes().len(), 12);
    }

    #[test]
    fn single_task_has_no_novel_split() {
        let (tree, train, test) = small_data();
        let mut cfg = small_config(IncrementMode::Background);
        cfg.tasks.truncate(1);
        let result = run_protocol(&cfg, tree, &train, &test).unwrap();
        assert!(result.tasks[0].metrics.novel.is_empty());
        assert!(result.tasks[0].metrics.miou(crate::cil::SplitName::Base).is_some());
    }

    #[test]
    fn runs_are_reproducible() {
        let (tree, train, test) = small_data();
        let cfg = small_config(IncrementMode::Background);
        let a = run_protocol(&cfg, tree.clone(), &train, &test).unwrap();
        let b = run_protocol(&cfg, tree, &train, &test).unwrap();
        assert_eq!(a.tasks[1].model.params(), b.tasks[1].model.params());
        assert_eq!(a.tasks[1].metrics, b.tasks[1].metrics);
    }

    #[test]
    fn foreign_data_is_rejected() {
        let (_, train, test) = small_data();
        let other = parse_taxonomy("x ROOT\ny ROOT\n").unwrap();
        let mut cfg = small_config(IncrementMode::Background);
        cfg.tasks = vec![TaskSpec {
            classes: vec!["x".into(), "y".into()],
            epochs: 1,
            lr0: 0.05,
        }];
        assert!(matches!(run_protocol(&cfg, other, &train, &test), Err(Error::Incompatible(_))));
    }
}
