//! Files a run leaves behind: checkpoints, metrics CSV, JSON summary,
//! manifest, and the merged report over several runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cil::metrics::{evaluate, MetricsReport, SplitName};
use crate::cil::protocol::{IncrementMode, Protocol, TaskSpec};
use crate::cil::run::{RunConfig, RunResult, TaskOutcome, Variant};
use crate::cil::train::LossParts;
use crate::error::{Error, Result};
use crate::head::Model;
use crate::synth::Dataset;
use crate::taxonomy::{parse_taxonomy, TaxonomyTree};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_HEADER: &str = "run_id,task,split,class_id,iou,miou";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Model after one task plus what is needed to evaluate it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub run_id: String,
    pub task: u32,
    pub fingerprint: String,
    pub taxonomy_hash: String,
    pub taxonomy: String,
    pub mode: IncrementMode,
    pub split_ratios: Vec<f64>,
    pub tasks: Vec<TaskSpec>,
    pub variant: Variant,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(cfg: &RunConfig, protocol: &Protocol, outcome: &TaskOutcome) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            run_id: cfg.run_id(),
            task: outcome.task,
            fingerprint: protocol.fingerprint(),
            taxonomy_hash: protocol.full_tree().content_hash(),
            taxonomy: protocol.full_tree().to_text(),
            mode: protocol.mode,
            split_ratios: protocol.split_ratios.clone(),
            tasks: cfg.tasks.clone(),
            variant: cfg.variant.clone(),
            model: (*outcome.model).clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &to_json(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = from_json(&read_file(path)?, path)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {} is not supported", ck.version)));
        }
        let tree = parse_taxonomy(&ck.taxonomy)?;
        if tree.content_hash() != ck.taxonomy_hash {
            return Err(Error::Format("checkpoint taxonomy does not match its hash".into()));
        }
        Ok(ck)
    }

    pub fn protocol(&self) -> Result<Protocol> {
        let tree = parse_taxonomy(&self.taxonomy)?;
        let protocol = Protocol::new(tree, self.mode, &self.tasks, self.split_ratios.clone())?;
        if protocol.fingerprint() != self.fingerprint {
            return Err(Error::Format("checkpoint protocol does not match its fingerprint".into()));
        }
        Ok(protocol)
    }

    /// Evaluate the stored model on `test` at the checkpoint's task.
    pub fn evaluate(&self, test: &Dataset) -> Result<(Protocol, MetricsReport)> {
        let protocol = self.protocol()?;
        if test.taxonomy_hash_hex() != self.taxonomy_hash {
            return Err(Error::Incompatible("test data was generated from a different taxonomy".into()));
        }
        let tree = protocol.tree_for(self.task, self.variant.hierarchical)?;
        let report = evaluate(&self.model, tree, test, &protocol, self.task)?;
        Ok((protocol, report))
    }
}

pub fn checkpoint_path(out: &Path, task: u32) -> PathBuf {
    out.join("checkpoints").join(format!("task{task}.json"))
}

/// Rows of the metrics CSV for one task report; splits without classes get
/// one row with empty values.
pub fn metrics_rows(run_id: &str, tree: &TaxonomyTree, report: &MetricsReport) -> Result<String> {
    let mut out = String::new();
    for split in SplitName::ALL {
        let miou = opt(report.miou(split));
        let members = report.members(split);
        if members.is_empty() {
            writeln!(out, "{run_id},{},{},,,", report.task, split.as_str()).unwrap();
        }
        for id in members {
            let iou = report.class(id).and_then(|c| c.iou());
            writeln!(out, "{run_id},{},{},{},{},{miou}", report.task, split.as_str(), tree.name(id)?, opt(iou)).unwrap();
        }
    }
    Ok(out)
}

pub fn metrics_csv(result: &RunResult) -> Result<String> {
    let mut out = format!("{METRICS_HEADER}\n");
    for t in &result.tasks {
        out.push_str(&metrics_rows(&result.run_id(), result.protocol.full_tree(), &t.metrics)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementSummary {
    pub task: u32,
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub all: Option<f64>,
    pub classes: BTreeMap<String, Option<f64>>,
    /// Loss components of the last epoch.
    pub final_loss: LossParts,
    pub train_pixels: usize,
}

impl IncrementSummary {
    pub fn miou(&self, split: SplitName) -> Option<f64> {
        match split {
            SplitName::Base => self.base,
            SplitName::Novel => self.novel,
            SplitName::All => self.all,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub name: String,
    pub variant: String,
    pub seed: u64,
    pub curvature: f64,
    pub mode: IncrementMode,
    pub fingerprint: String,
    pub increments: Vec<IncrementSummary>,
}

impl RunSummary {
    pub fn new(result: &RunResult) -> Result<Self> {
        let tree = result.protocol.full_tree();
        let increments = result
            .tasks
            .iter()
            .map(|t| {
                let m = &t.metrics;
                let classes = m
                    .classes
                    .iter()
                    .map(|c| Ok((tree.name(c.class)?.to_string(), c.iou())))
                    .collect::<Result<_>>()?;
                Ok(IncrementSummary {
                    task: t.task,
                    base: m.miou(SplitName::Base),
                    novel: m.miou(SplitName::Novel),
                    all: m.miou(SplitName::All),
                    classes,
                    final_loss: t.stats.epochs.last().copied().unwrap_or_default(),
                    train_pixels: t.train_pixels,
                })
            })
            .collect::<Result<_>>()?;
        Ok(RunSummary {
            run_id: result.run_id(),
            name: result.config.name.clone(),
            variant: result.config.variant.name.clone(),
            seed: result.config.seed,
            curvature: result.config.curvature,
            mode: result.protocol.mode,
            fingerprint: result.protocol.fingerprint(),
            increments,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        from_json(&read_file(path)?, path)
    }

    pub fn last(&self) -> Option<&IncrementSummary> {
        self.increments.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildInfo {
    pub version: String,
    pub revision: Option<String>,
}

impl BuildInfo {
    pub fn current() -> Self {
        BuildInfo {
            version: env!("CARGO_PKG_VERSION").to_string(),
            revision: option_env!("HYPERTAXON_REVISION").map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Record of a run; written before training and finalized at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub build: BuildInfo,
    pub seed: u64,
    pub data: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub task_seconds: Vec<f64>,
    pub status: RunStatus,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, data: &Path) -> Self {
        RunManifest {
            run_id: cfg.run_id(),
            config: cfg.clone(),
            build: BuildInfo::current(),
            seed: cfg.seed,
            data: data.to_path_buf(),
            outputs: Vec::new(),
            task_seconds: Vec::new(),
            status: RunStatus::Running,
            error: None,
        }
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_file(&out.join("manifest.json"), &to_json(self))
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join("manifest.json");
        from_json(&read_file(&path)?, &path)
    }
}

/// Write metrics.csv and summary.json; returns the paths written.
pub fn write_results(out: &Path, result: &RunResult) -> Result<Vec<PathBuf>> {
    let metrics = out.join("metrics.csv");
    write_file(&metrics, &metrics_csv(result)?)?;
    let summary = out.join("summary.json");
    write_file(&summary, &to_json(&RunSummary::new(result)?))?;
    Ok(vec![metrics, summary])
}

/// Merged tables over several runs of the same protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub runs: Vec<RunSummary>,
}

pub const COMPARISON_HEADER: &str = "run_id,variant,seed,curvature,task,split,miou";
pub const CURVE_HEADER: &str = "run_id,variant,seed,curvature,task,base,novel,all";

impl Report {
    /// Refuses runs whose protocols differ.
    pub fn new(runs: Vec<RunSummary>) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::InvalidInput("report needs at least one run".into()))?;
        for r in &runs[1..] {
            if r.fingerprint != first.fingerprint {
                return Err(Error::Incompatible(format!(
                    "`{}` and `{}` follow different protocols (taxonomy, mode or class schedule differ)",
                    first.run_id, r.run_id
                )));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &runs {
            if !seen.insert(&r.run_id) {
                return Err(Error::Incompatible(format!("run `{}` given twice", r.run_id)));
            }
        }
        Ok(Report { runs })
    }

    pub fn load(dirs: &[PathBuf]) -> Result<Self> {
        let runs = dirs
            .iter()
            .map(|d| RunSummary::load(&d.join("summary.json")))
            .collect::<Result<Vec<_>>>()?;
        Report::new(runs)
    }

    /// One row per (run, increment, split).
    pub fn comparison_csv(&self) -> String {
        let mut out = format!("{COMPARISON_HEADER}\n");
        for r in &self.runs {
            for inc in &r.increments {
                for split in SplitName::ALL {
                    writeln!(
                        out,
                        "{},{},{},{},{},{},{}",
                        r.run_id,
                        r.variant,
                        r.seed,
                        r.curvature,
                        inc.task,
                        split.as_str(),
                        opt(inc.miou(split))
                    )
                    .unwrap();
                }
            }
        }
        out
    }

    /// One row per (run, increment).
    pub fn curve_csv(&self) -> String {
        let mut out = format!("{CURVE_HEADER}\n");
        for r in &self.runs {
            for inc in &r.increments {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.run_id,
                    r.variant,
                    r.seed,
                    r.curvature,
                    inc.task,
                    opt(inc.base),
                    opt(inc.novel),
                    opt(inc.all)
                )
                .unwrap();
            }
        }
        out
    }

    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let cmp = out.join("comparison.csv");
        let curve = out.join("curve.csv");
        write_file(&cmp, &self.comparison_csv())?;
        write_file(&curve, &self.curve_csv())?;
        Ok(vec![cmp, curve])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cil::run::run_protocol;
    use crate::cil::run::tests::{small_config, small_data};

    fn run(seed: u64, variant: &str) -> RunResult {
        let (tree, train, test) = small_data();
        let mut cfg = small_config(IncrementMode::Background).with_variant(variant).unwrap();
        cfg.seed = seed;
        run_protocol(&cfg, tree, &train, &test).unwrap()
    }

    #[test]
    fn metrics_csv_schema() {
        let r = run(1, "full");
        let csv = metrics_csv(&r).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert!(rows.iter().all(|r| r.len() == 6));
        // Task 1 has no novel classes: a single row with empty fields.
        let novel1: Vec<_> = rows.iter().filter(|r| r[1] == "1" && r[2] == "novel").collect();
        assert_eq!(novel1.len(), 1);
        assert_eq!(&novel1[0][3..], &["", "", ""]);
        let all2 = rows.iter().filter(|r| r[1] == "2" && r[2] == "all").count();
        assert_eq!(all2, 9);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_metrics() {
        let r = run(2, "full");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::new(&r.config, &r.protocol, &r.tasks[1]);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let (_, test) = {
            let (_, a, b) = small_data();
            (a, b)
        };
        let (_, report) = back.evaluate(&test).unwrap();
        assert_eq!(report, r.tasks[1].metrics);
    }

    #[test]
    fn report_merges_and_refuses_mismatches() {
        let a = RunSummary::new(&run(1, "full")).unwrap();
        let b = RunSummary::new(&run(1, "naive")).unwrap();
        let single = Report::new(vec![a.clone()]).unwrap();
        let rows: Vec<&str> = single.curve_csv().lines().skip(1).map(|_| "").collect();
        assert_eq!(rows.len(), a.increments.len());

        let merged = Report::new(vec![a.clone(), b.clone()]).unwrap();
        let cmp = merged.comparison_csv();
        // Two runs, three splits per increment.
        assert_eq!(cmp.lines().count() - 1, 2 * 2 * 3);
        let sum_of = |csv: &str, run: Option<&str>| -> f64 {
            csv.lines()
                .skip(1)
                .map(|l| l.split(',').collect::<Vec<_>>())
                .filter(|f| run.is_none_or(|r| f[0] == r))
                .filter_map(|f| f[6].parse::<f64>().ok())
                .sum()
        };
        let total = sum_of(&cmp, None);
        let parts = sum_of(&Report::new(vec![a.clone()]).unwrap().comparison_csv(), None)
            + sum_of(&Report::new(vec![b.clone()]).unwrap().comparison_csv(), None);
        assert!((total - parts).abs() < 1e-12);

        let mut other = b.clone();
        other.run_id = "x.naive.s1".into();
        other.fingerprint = "different".into();
        assert!(matches!(Report::new(vec![a.clone(), other]), Err(Error::Incompatible(_))));
        assert!(matches!(Report::new(vec![a.clone(), a]), Err(Error::Incompatible(_))));
    }
}
