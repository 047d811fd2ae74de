//! Task schedules and the per-task views of the taxonomy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::taxonomy::{NodeId, TaxonomyTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncrementMode {
    /// New leaves arrive while old and future classes are labelled background.
    Background,
    /// Known classes split into finer children; data is partitioned per task.
    KnownClass,
}

impl std::fmt::Display for IncrementMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IncrementMode::Background => "background",
            IncrementMode::KnownClass => "known-class",
        })
    }
}

/// Per-task settings as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Class names; when empty they are taken from `task=` annotations.
    #[serde(default)]
    pub classes: Vec<String>,
    pub epochs: usize,
    pub lr0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStep {
    pub index: u32,
    /// `C^t`: the classes supervised in this task.
    pub new_classes: Vec<NodeId>,
    /// Internal nodes that first appear with this task.
    pub new_ancestors: Vec<NodeId>,
    pub epochs: usize,
    pub lr0: f64,
}

#[derive(Debug, Clone)]
pub struct Protocol {
    pub mode: IncrementMode,
    pub tasks: Vec<TaskStep>,
    pub split_ratios: Vec<f64>,
    full: TaxonomyTree,
    staged: Vec<TaxonomyTree>,
    flat: Vec<TaxonomyTree>,
}

impl Protocol {
    pub fn new(full: TaxonomyTree, mode: IncrementMode, specs: &[TaskSpec], split_ratios: Vec<f64>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        let annotated = specs.iter().all(|s| s.classes.is_empty());
        let mut class_sets: Vec<Vec<NodeId>> = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let t = i as u32 + 1;
            let ids = if annotated {
                // Classes that are leaves in the task that introduces them.
                full.nodes()
                    .filter(|n| n.introduced_at_task == t)
                    .filter(|n| full.children(n.id).iter().all(|&c| full.node(c).expect("child").introduced_at_task > t))
                    .map(|n| n.id)
                    .collect()
            } else {
                spec.classes
                    .iter()
                    .map(|name| {
                        full.id_of(name)
                            .map_err(|_| Error::config("tasks", format!("task {t} names unknown class `{name}`")))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            if ids.is_empty() {
                return Err(Error::config("tasks", format!("task {t} has no classes")));
            }
            if spec.lr0.is_nan() || spec.lr0 <= 0.0 {
                return Err(Error::config("lr0", format!("task {t}: must be positive")));
            }
            class_sets.push(ids);
        }

        let mut seen = BTreeSet::new();
        for (i, set) in class_sets.iter().enumerate() {
            for &id in set {
                if !seen.insert(id) {
                    return Err(Error::config(
                        "tasks",
                        format!("class `{}` appears twice (task {})", full.name(id)?, i + 1),
                    ));
                }
                if mode == IncrementMode::Background && !full.node(id)?.is_leaf {
                    return Err(Error::config(
                        "tasks",
                        format!("background-increment classes must be leaves; `{}` is not", full.name(id)?),
                    ));
                }
            }
        }

        // A node enters with the first task that names it or any descendant.
        let mut intro: BTreeMap<NodeId, u32> = BTreeMap::new();
        for (i, set) in class_sets.iter().enumerate() {
            for &id in set {
                for a in full.ancestors(id)? {
                    intro.entry(a).or_insert(i as u32 + 1);
                }
            }
        }

        let mut staged = Vec::with_capacity(class_sets.len());
        let mut flat = Vec::with_capacity(class_sets.len());
        for t in 1..=class_sets.len() as u32 {
            let keep: BTreeSet<NodeId> = intro.iter().filter(|(_, &it)| it <= t).map(|(&id, _)| id).collect();
            let tree = full.restrict(&keep)?.with_tasks(|id| intro[&id])?;
            for &id in &class_sets[t as usize - 1] {
                if !tree.node(id)?.is_leaf {
                    return Err(Error::config(
                        "tasks",
                        format!("`{}` has children introduced no later than task {t}", full.name(id)?),
                    ));
                }
            }
            flat.push(tree.flattened()?);
            staged.push(tree);
        }

        match mode {
            IncrementMode::KnownClass => {
                if split_ratios.len() != specs.len() {
                    return Err(Error::config("split_ratios", "need one ratio per task"));
                }
                if split_ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                    return Err(Error::config("split_ratios", "ratios must be >= 0"));
                }
                let sum: f64 = split_ratios.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::config("split_ratios", format!("ratios sum to {sum}, not 1")));
                }
            }
            IncrementMode::Background => {
                if !split_ratios.is_empty() {
                    return Err(Error::config("split_ratios", "only used in known-class mode"));
                }
            }
        }

        let tasks = class_sets
            .into_iter()
            .zip(specs)
            .enumerate()
            .map(|(i, (new_classes, spec))| {
                let t = i as u32 + 1;
                let new_ancestors = intro
                    .iter()
                    .filter(|(id, &it)| it == t && !new_classes.contains(id))
                    .map(|(&id, _)| id)
                    .collect();
                TaskStep {
                    index: t,
                    new_classes,
                    new_ancestors,
                    epochs: spec.epochs,
                    lr0: spec.lr0,
                }
            })
            .collect();

        Ok(Protocol {
            mode,
            tasks,
            split_ratios,
            full,
            staged,
            flat,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, t: u32) -> Result<&TaskStep> {
        self.tasks
            .get((t as usize).wrapping_sub(1))
            .ok_or_else(|| Error::Protocol(format!("no task {t}")))
    }

    /// The complete taxonomy the ground truth refers to.
    pub fn full_tree(&self) -> &TaxonomyTree {
        &self.full
    }

    /// Hierarchy as known after task `t`.
    pub fn staged(&self, t: u32) -> Result<&TaxonomyTree> {
        self.task(t)?;
        Ok(&self.staged[t as usize - 1])
    }

    /// Depth-1 view of [`staged`](Self::staged).
    pub fn flat(&self, t: u32) -> Result<&TaxonomyTree> {
        self.task(t)?;
        Ok(&self.flat[t as usize - 1])
    }

    pub fn tree_for(&self, t: u32, hierarchical: bool) -> Result<&TaxonomyTree> {
        if hierarchical {
            self.staged(t)
        } else {
            self.flat(t)
        }
    }

    /// `C^1`.
    pub fn base_classes(&self) -> &[NodeId] {
        &self.tasks[0].new_classes
    }

    /// Leaves of the staged tree at `t` that entered after the first task.
    pub fn novel_classes(&self, t: u32) -> Result<Vec<NodeId>> {
        let tree = self.staged(t)?;
        Ok(tree
            .leaves()
            .into_iter()
            .filter(|&id| tree.node(id).map(|n| n.introduced_at_task >= 2).unwrap_or(false))
            .collect())
    }

    /// Class names per task, in task order.
    pub fn class_names(&self) -> Vec<Vec<String>> {
        self.tasks
            .iter()
            .map(|s| {
                s.new_classes
                    .iter()
                    .map(|&id| self.full.name(id).expect("known").to_string())
                    .collect()
            })
            .collect()
    }

    /// Identity of the schedule: taxonomy, mode and class lists.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.full.content_hash());
        h.update(self.mode.to_string());
        for names in self.class_names() {
            h.update(b"|");
            h.update(names.join(",").as_bytes());
        }
        hex::encode(h.finalize())
    }
}
