//! Scenario wiring shared by the subcommands and the test suites.

use serde::Serialize;

use crate::phantom::{to_first_k_organs, to_single_organ, PhantomSample};
use crate::segnet::SegModel;
use crate::trainer::{distill_incremental, evaluate, train_teacher, DistillOutcome, EpochLog, EvalReport, TrainConfig};
use crate::uncertainty::WeightMode;

use super::config::ExperimentConfig;
use super::CliError;

/// Full-label sample relabelled for the teacher: organs above K become background.
pub fn teacher_view(s: &PhantomSample, cfg: &ExperimentConfig) -> Result<PhantomSample, CliError> {
    Ok(to_first_k_organs(s, cfg.scenario.old_organs, cfg.phantom.organs)?)
}

/// Full-label sample relabelled for the student: old organs keep their ids,
/// the new organ becomes `K+1`, everything else background.
pub fn student_view(s: &PhantomSample, cfg: &ExperimentConfig) -> PhantomSample {
    let k = cfg.scenario.old_organs as u16;
    let new = cfg.scenario.new_organ;
    let labels = s.labels.map(|l| match l {
        l if l <= k => l,
        l if l == new => k + 1,
        _ => 0,
    });
    PhantomSample { image: s.image.clone(), labels }
}

/// Binary annotation of the new organ only.
pub fn new_organ_view(s: &PhantomSample, cfg: &ExperimentConfig) -> Result<PhantomSample, CliError> {
    Ok(to_single_organ(s, cfg.scenario.new_organ, cfg.phantom.organs)?)
}

pub fn old_organ_ids(cfg: &ExperimentConfig) -> Vec<u16> {
    (1..=cfg.scenario.old_organs as u16).collect()
}

pub fn student_organ_ids(cfg: &ExperimentConfig) -> Vec<u16> {
    (1..=cfg.scenario.old_organs as u16 + 1).collect()
}

pub struct TeacherRun {
    pub teacher: SegModel,
    pub logs: Vec<EpochLog>,
    pub report: EvalReport,
}

pub fn run_teacher(cfg: &ExperimentConfig, train: &[PhantomSample], test: &[PhantomSample]) -> Result<TeacherRun, CliError> {
    let train: Vec<_> = train.iter().map(|s| teacher_view(s, cfg)).collect::<Result<_, _>>()?;
    let test: Vec<_> = test.iter().map(|s| teacher_view(s, cfg)).collect::<Result<_, _>>()?;
    let (teacher, logs) = train_teacher(&train, cfg.teacher_model(), &cfg.teacher)?;
    let mut report = evaluate(&teacher, &test, &old_organ_ids(cfg))?;
    report.config_hash = cfg.hash();
    Ok(TeacherRun { teacher, logs, report })
}

/// Check that a teacher file fits the scenario before any training starts.
pub fn check_teacher(teacher: &SegModel, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let want = cfg.teacher_model();
    if teacher.classes() != want.classes {
        return Err(CliError::Validation(format!(
            "teacher has {} classes but the scenario with K = {} needs {}",
            teacher.classes(),
            cfg.scenario.old_organs,
            want.classes
        )));
    }
    if teacher.config().hidden != want.hidden || teacher.config().kernel != want.kernel {
        return Err(CliError::Validation(format!(
            "teacher architecture {:?}/k{} does not match config {:?}/k{}",
            teacher.config().hidden,
            teacher.config().kernel,
            want.hidden,
            want.kernel
        )));
    }
    Ok(())
}

pub struct DistillRun {
    pub outcome: DistillOutcome,
    pub report: EvalReport,
}

/// `new_data` holds binary new-organ annotations, `test` full labels.
pub fn run_distill(
    cfg: &ExperimentConfig,
    train_cfg: &TrainConfig,
    teacher: &SegModel,
    new_data: &[PhantomSample],
    test: &[PhantomSample],
) -> Result<DistillRun, CliError> {
    check_teacher(teacher, cfg)?;
    let mut teacher = teacher.clone();
    teacher.freeze();
    let outcome = distill_incremental(&teacher, new_data, train_cfg)?;
    let test: Vec<_> = test.iter().map(|s| student_view(s, cfg)).collect();
    let mut report = evaluate(&outcome.student, &test, &student_organ_ids(cfg))?;
    report.config_hash = cfg.hash();
    Ok(DistillRun { outcome, report })
}

pub const NEW_TASK_ONLY: &str = "new-task-only";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub organs: Vec<u16>,
    pub dice: Vec<f64>,
    pub old_mean: f64,
    pub new_dice: f64,
    pub mean: f64,
}

impl AblationRow {
    fn from_report(variant: String, report: &EvalReport, cfg: &ExperimentConfig) -> Self {
        let new_id = cfg.scenario.old_organs as u16 + 1;
        AblationRow {
            variant,
            organs: report.organs.clone(),
            dice: report.dice.clone(),
            old_mean: report.mean_over(&old_organ_ids(cfg)),
            new_dice: report.organ_dice(new_id).unwrap_or(0.0),
            mean: report.mean_dice,
        }
    }
}

/// The variants run by an ablation, in output order.
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<(String, TrainConfig)> {
    let mut out: Vec<(String, TrainConfig)> = WeightMode::ALL
        .iter()
        .map(|&m| (m.as_str().to_string(), TrainConfig { uncertainty: m, ..cfg.distill.clone() }))
        .collect();
    out.push((NEW_TASK_ONLY.into(), TrainConfig { lambda1: 0.0, lambda2: 0.0, ..cfg.distill.clone() }));
    out
}

/// Run every variant with the shared seed. `each` sees every finished run.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    teacher: &SegModel,
    new_data: &[PhantomSample],
    test: &[PhantomSample],
    mut each: impl FnMut(&str, &DistillRun) -> Result<(), CliError>,
) -> Result<Vec<AblationRow>, CliError> {
    check_teacher(teacher, cfg)?;
    let mut rows = Vec::new();
    for (name, tc) in ablation_variants(cfg) {
        let run = run_distill(cfg, &tc, teacher, new_data, test)
            .map_err(|e| e.context(&format!("ablation variant {name}")))?;
        each(&name, &run)?;
        rows.push(AblationRow::from_report(name, &run.report, cfg));
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let organs = rows.first().map(|r| r.organs.clone()).unwrap_or_default();
    let mut header = vec!["variant".to_string()];
    header.extend(organs.iter().map(|o| format!("dice_organ{o}")));
    header.extend(["old_mean", "new_dice", "mean"].map(String::from));
    w.write_record(&header).map_err(CliError::runtime)?;
    for r in rows {
        let mut rec = vec![r.variant.clone()];
        rec.extend(r.dice.iter().map(|d| format!("{d:.6}")));
        rec.extend([r.old_mean, r.new_dice, r.mean].map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(CliError::runtime)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::runtime(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
