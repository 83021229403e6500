//! The `useg` experiment harness.
//!
//! Output layout under `--out` (default `runs`):
//!
//! ```text
//! dataset/                      generate
//! teacher.useg                  train-teacher
//! teacher_log.csv, teacher_eval.{json,csv}
//! distill/<mode>/student.useg   distill
//! distill/<mode>/log.csv, eval.{json,csv}
//! ablation.csv, ablation/<variant>/...   ablate
//! evaluate.{json,csv}           evaluate
//! ```

pub mod config;
pub mod experiment;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::phantom::dataset::{self, Dataset, DatasetError, Manifest};
use crate::phantom::{generate_dataset, split_indices, PhantomError, PhantomSample};
use crate::segnet::{ModelError, SegModel};
use crate::trainer::{gradcheck, write_epoch_csv, EpochLog, EvalReport, TrainError};
use crate::uncertainty::WeightMode;

use config::ExperimentConfig;
use experiment::{ablation_csv, run_ablation, run_distill, run_teacher, DistillRun};

pub const LOCK_FILE: &str = ".useg.lock";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::ChannelMismatch { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Manifest { .. } | DatasetError::Mismatch(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::Config(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "useg", version, about = "Incremental organ segmentation experiments on synthetic phantoms")]
pub struct Cli {
    /// Experiment config (JSON). Defaults apply to omitted fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Experiment seed; overrides the config's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config's.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the phantom dataset.
    Generate,
    /// Train and evaluate the K-organ teacher.
    TrainTeacher,
    /// Extend the teacher to the new organ.
    Distill {
        /// Teacher weights (default `<out>/teacher.useg`).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// as-paper, normalized, confidence or off.
        #[arg(long)]
        uncertainty: Option<WeightMode>,
    },
    /// Distill under every weighting mode and without the old-task term.
    Ablate {
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Check analytic gradients of the distillation loss against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Score a weights file on the held-out split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
    },
}

/// Parse arguments, run, print errors; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
        let path = out.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Runtime(format!("cannot lock {}: {e}", out.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out.clone().or_else(|| cfg.and_then(|c| c.out.clone())).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&dir.join(format!("{stem}.json")), json + "\n")?;
    write(&dir.join(format!("{stem}.csv")), report.to_csv())
}

fn write_log(path: &Path, organs: &[u16], logs: &[EpochLog]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(CliError::runtime)?;
    }
    Ok(write_epoch_csv(path, organs, logs)?)
}

fn print_report(title: &str, r: &EvalReport) {
    println!("{title} ({} held-out samples)", r.samples);
    for (o, d) in r.organs.iter().zip(&r.dice) {
        println!("  organ {o}: dice {d:.4}");
    }
    println!("  mean:    dice {:.4}", r.mean_dice);
}

/// Load the dataset under `out` and check it was generated from this config.
fn load_dataset(out: &Path, cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let root = out.join("dataset");
    if !root.join(dataset::MANIFEST_FILE).exists() {
        return Err(CliError::Validation(format!("no dataset at {}; run `useg generate` first", root.display())));
    }
    let ds = dataset::read_dataset(&root)?;
    let m = &ds.manifest;
    if m.seed != cfg.seed || m.count != cfg.dataset.count || m.phantom != cfg.phantom {
        return Err(CliError::Validation(format!(
            "dataset at {} was generated from a different config (seed {}, count {})",
            root.display(),
            m.seed,
            m.count
        )));
    }
    Ok(ds)
}

fn load_teacher(path: &Path) -> Result<SegModel, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!("teacher weights {} not found", path.display())));
    }
    SegModel::load(path).map_err(|e| CliError::Validation(format!("cannot load teacher: {e}")))
}

fn new_organ_data(ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<PhantomSample>, CliError> {
    Ok(ds.organ_view_train(cfg.scenario.new_organ)?)
}

fn save_distill(dir: &Path, run: &DistillRun, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::runtime)?;
    run.outcome.student.save(&dir.join("student.useg"))?;
    write_log(&dir.join("log.csv"), &[cfg.scenario.old_organs as u16 + 1], &run.outcome.logs)?;
    write_report(dir, "eval", &run.report)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Command::Gradcheck { h, tol } = cli.command {
        let seed = cli.seed.unwrap_or(0);
        let report = gradcheck(seed, h, tol)?;
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        println!(
            "max relative error {:.3e} at layer {} {}[{}] ({})",
            report.max_rel_error,
            report.worst_layer,
            report.worst_tensor,
            report.worst_index,
            if report.passed { "pass" } else { "FAIL" }
        );
        return if report.passed {
            Ok(())
        } else {
            Err(CliError::Runtime(format!("gradient check failed: {:.3e} >= {tol:e}", report.max_rel_error)))
        };
    }

    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), cli.seed)?;
    let out = out_dir(cli, Some(&cfg));

    match &cli.command {
        Command::Gradcheck { .. } => unreachable!("handled above"),
        Command::Generate => {
            let samples = generate_dataset(&cfg.phantom, cfg.dataset.count, cfg.seed)?;
            let manifest = Manifest {
                version: dataset::MANIFEST_VERSION,
                seed: cfg.seed,
                count: cfg.dataset.count,
                phantom: cfg.phantom.clone(),
                split: split_indices(cfg.dataset.count),
            };
            let _lock = OutputLock::acquire(&out)?;
            let root = out.join("dataset");
            dataset::write_dataset(&root, &manifest, &samples)?;
            println!("wrote {} samples to {}", samples.len(), root.display());
        }
        Command::TrainTeacher => {
            let ds = load_dataset(&out, &cfg)?;
            let _lock = OutputLock::acquire(&out)?;
            let run = run_teacher(&cfg, &ds.train(), &ds.test())?;
            run.teacher.save(&out.join("teacher.useg"))?;
            write_log(&out.join("teacher_log.csv"), &experiment::old_organ_ids(&cfg), &run.logs)?;
            write_report(&out, "teacher_eval", &run.report)?;
            print_report("teacher", &run.report);
        }
        Command::Distill { teacher, uncertainty } => {
            let teacher_path = teacher.clone().unwrap_or_else(|| out.join("teacher.useg"));
            let teacher = load_teacher(&teacher_path)?;
            experiment::check_teacher(&teacher, &cfg)?;
            let ds = load_dataset(&out, &cfg)?;
            let mut tc = cfg.distill.clone();
            if let Some(m) = uncertainty {
                tc.uncertainty = *m;
            }
            let new_data = new_organ_data(&ds, &cfg)?;
            let _lock = OutputLock::acquire(&out)?;
            let run = run_distill(&cfg, &tc, &teacher, &new_data, &ds.test())?;
            save_distill(&out.join("distill").join(tc.uncertainty.as_str()), &run, &cfg)?;
            print_report(&format!("student ({})", tc.uncertainty), &run.report);
        }
        Command::Ablate { teacher } => {
            let teacher_path = teacher.clone().unwrap_or_else(|| out.join("teacher.useg"));
            let teacher = load_teacher(&teacher_path)?;
            experiment::check_teacher(&teacher, &cfg)?;
            let ds = load_dataset(&out, &cfg)?;
            let new_data = new_organ_data(&ds, &cfg)?;
            let _lock = OutputLock::acquire(&out)?;
            let rows = run_ablation(&cfg, &teacher, &new_data, &ds.test(), |name, run| {
                save_distill(&out.join("ablation").join(name), run, &cfg)
            })?;
            let csv = ablation_csv(&rows)?;
            write(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Evaluate { model } => {
            if !model.exists() {
                return Err(CliError::Validation(format!("model {} not found", model.display())));
            }
            let m = SegModel::load(model)?;
            let ds = load_dataset(&out, &cfg)?;
            let k = cfg.scenario.old_organs;
            let test: Vec<PhantomSample> = if m.classes() == k + 1 {
                ds.test().iter().map(|s| experiment::teacher_view(s, &cfg)).collect::<Result<_, _>>()?
            } else if m.classes() == k + 2 {
                ds.test().iter().map(|s| experiment::student_view(s, &cfg)).collect()
            } else {
                return Err(CliError::Validation(format!(
                    "model has {} classes; the scenario expects {} (teacher) or {} (student)",
                    m.classes(),
                    k + 1,
                    k + 2
                )));
            };
            let organs: Vec<u16> = (1..m.classes() as u16).collect();
            let mut report = crate::trainer::evaluate(&m, &test, &organs)?;
            report.config_hash = cfg.hash();
            let _lock = OutputLock::acquire(&out)?;
            write_report(&out, "evaluate", &report)?;
            print_report(&model.display().to_string(), &report);
        }
    }
    Ok(())
}
