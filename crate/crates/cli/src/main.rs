//! Command-line driver: dataset generation, protocol runs, evaluation and reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use hypertaxon::cil::metrics::SplitName;
use hypertaxon::cil::output::{checkpoint_path, metrics_rows, write_results, RunStatus, METRICS_HEADER};
use hypertaxon::cil::run::run_protocol_with;
use hypertaxon::cil::{Checkpoint, Report, RunConfig, RunManifest, Variant};
use hypertaxon::synth::{hierarchy_signal_check, ClassGenerator, Dataset, Split, SynthConfig};
use hypertaxon::{Error, Result};

const TRAIN_FILE: &str = "train.htx";
const TEST_FILE: &str = "test.htx";
const WORKERS_ENV: &str = "HYPERTAXON_WORKERS";

#[derive(Parser)]
#[command(name = "hypertaxon", version, about = "Taxonomy-aware class-incremental segmentation on the Poincare ball")]
#[command(after_help = "Exit codes: 0 ok, 1 runtime error, 2 invalid config, 3 training diverged, 4 incompatible inputs.\n\
Set HYPERTAXON_WORKERS to bound the worker threads.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every task of a protocol.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a grid of variants, seeds and curvatures, then merge the results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant presets.
        #[arg(long, value_delimiter = ',', default_value = "naive,pl,pl-hier,full")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Comma-separated curvatures; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        curvatures: Vec<f64>,
    },
    /// Evaluate a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Merge finished runs into comparison and curve tables.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(clap::Args, Default)]
struct Overrides {
    /// Replace the config's variant with a preset (naive, pl, pl-hier, full).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    curvature: Option<f64>,
    /// Train on the flattened label set.
    #[arg(long)]
    flat: bool,
}

impl Overrides {
    fn apply(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(v) = &self.variant {
            cfg = cfg.with_variant(v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.curvature {
            cfg.curvature = c;
            cfg.name = format!("{}-c{c}", cfg.name);
        }
        if self.flat && cfg.variant.hierarchical {
            cfg.variant.hierarchical = false;
            cfg.variant.name = format!("{}-flat", cfg.variant.name);
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse { .. } => 2,
        Error::Training(_) => 3,
        Error::Incompatible(_) => 4,
        _ => 1,
    }
}

fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(WORKERS_ENV, format!("`{raw}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidInput(e.to_string()))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct DataManifest {
    config: SynthConfig,
    prng: String,
    format_version: u32,
    taxonomy_hash: String,
    files: Vec<(String, String)>,
    intra_branch_distance: f64,
    inter_branch_distance: f64,
}

fn generate(config: &Path, out: &Path) -> Result<()> {
    let (cfg, tree) = SynthConfig::load(config)?;
    let gen = ClassGenerator::new(cfg.clone(), tree.clone())?;
    let signal = hierarchy_signal_check(&gen)?;
    let train = gen.generate(Split::Train)?;
    let test = gen.generate(Split::Test)?;
    train.check_coverage(&tree.leaves())?;
    create_dir(out)?;
    let mut files = Vec::new();
    for (name, data) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        let path = out.join(name);
        data.save(&path)?;
        files.push((name.to_string(), sha256_file(&path)?));
    }
    let tax = out.join("taxonomy.tax");
    std::fs::write(&tax, tree.to_text()).map_err(|e| Error::io(&tax, e))?;
    write_json(
        &out.join("manifest.json"),
        &DataManifest {
            config: cfg,
            prng: train.header.prng.clone(),
            format_version: train.header.version,
            taxonomy_hash: tree.content_hash(),
            files,
            intra_branch_distance: signal.intra,
            inter_branch_distance: signal.inter,
        },
    )?;
    eprintln!(
        "wrote {} train and {} test samples to {}",
        train.samples.len(),
        test.samples.len(),
        out.display()
    );
    Ok(())
}

fn load_split(data: &Path, name: &str) -> Result<Dataset> {
    Dataset::load(&data.join(name))
}

fn run_one(cfg: &RunConfig, tree: hypertaxon::TaxonomyTree, train: &Dataset, test: &Dataset, data: &Path, out: &Path) -> Result<()> {
    if out.join("manifest.json").exists() {
        return Err(Error::InvalidInput(format!(
            "{} already holds a run; choose a fresh output directory",
            out.display()
        )));
    }
    create_dir(&out.join("checkpoints"))?;
    let mut manifest = RunManifest::new(cfg, data);
    manifest.save(out)?;
    let run_id = cfg.run_id();
    eprintln!("{run_id}: {} tasks", cfg.tasks.len());
    let started = Instant::now();
    let result = run_protocol_with(cfg, tree, train, test, &mut |outcome, protocol| {
        let path = checkpoint_path(out, outcome.task);
        Checkpoint::new(cfg, protocol, outcome).save(&path)?;
        manifest.outputs.push(path);
        manifest.task_seconds.push(outcome.seconds);
        let m = &outcome.metrics;
        let show = |s| m.miou(s).map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_else(|| "-".into());
        eprintln!(
            "{run_id}: task {} done in {:.1}s, mIoU base {} novel {} all {}",
            outcome.task,
            outcome.seconds,
            show(SplitName::Base),
            show(SplitName::Novel),
            show(SplitName::All)
        );
        Ok(())
    });
    match result {
        Ok(result) => {
            manifest.outputs.extend(write_results(out, &result)?);
            manifest.status = RunStatus::Complete;
            manifest.save(out)?;
            eprintln!("{run_id}: finished in {:.1}s", started.elapsed().as_secs_f64());
            Ok(())
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(e.to_string());
            manifest.save(out)?;
            Err(e)
        }
    }
}

fn run(config: &Path, data: &Path, out: &Path, overrides: &Overrides) -> Result<()> {
    let (cfg, tree) = RunConfig::load(config)?;
    let cfg = overrides.apply(cfg)?;
    let train = load_split(data, TRAIN_FILE)?;
    let test = load_split(data, TEST_FILE)?;
    run_one(&cfg, tree, &train, &test, data, out)
}

fn sweep(config: &Path, data: &Path, out: &Path, variants: &[String], seeds: &[u64], curvatures: &[f64]) -> Result<()> {
    let (base, tree) = RunConfig::load(config)?;
    for v in variants {
        Variant::preset(v)?;
    }
    let train = load_split(data, TRAIN_FILE)?;
    let test = load_split(data, TEST_FILE)?;
    let curvatures: Vec<Option<f64>> = if curvatures.is_empty() {
        vec![None]
    } else {
        curvatures.iter().map(|&c| Some(c)).collect()
    };
    let mut dirs = Vec::new();
    for &c in &curvatures {
        for v in variants {
            for &s in seeds {
                let overrides = Overrides {
                    variant: Some(v.clone()),
                    seed: Some(s),
                    curvature: c,
                    flat: false,
                };
                let cfg = overrides.apply(base.clone())?;
                let dir = out.join(cfg.run_id());
                run_one(&cfg, tree.clone(), &train, &test, data, &dir)?;
                dirs.push(dir);
            }
        }
    }
    let written = Report::load(&dirs)?.write(out)?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let test = load_split(data, TEST_FILE)?;
    let (protocol, report) = ck.evaluate(&test)?;
    print!("{METRICS_HEADER}\n{}", metrics_rows(&ck.run_id, protocol.full_tree(), &report)?);
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let written = Report::load(runs)?.write(out)?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_workers().and_then(|()| match &cli.command {
        Command::Generate { config, out } => generate(config, out),
        Command::Run {
            config,
            data,
            out,
            overrides,
        } => run(config, data, out, overrides),
        Command::Sweep {
            config,
            data,
            out,
            variants,
            seeds,
            curvatures,
        } => sweep(config, data, out, variants, seeds, curvatures),
        Command::Eval { checkpoint, data } => eval(checkpoint, data),
        Command::Report { runs, out } => report(runs, out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
