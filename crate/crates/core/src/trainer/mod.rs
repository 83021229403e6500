//! Optimization: teacher pre-training, incremental distillation, evaluation.

mod adam;
mod distill;
mod gradcheck;
mod metrics;
pub mod objective;
mod teacher;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use distill::{distill_from, distill_incremental, DistillOutcome};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use metrics::{dice, evaluate, EvalReport};
pub use teacher::train_teacher;

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::losses::KlOrder;
use crate::segnet::ModelError;
use crate::uncertainty::{PoolConfig, UncertaintyError, WeightMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite gradient for parameter tensor {param}")]
    NonFiniteGradient { param: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("student has {student} output channels but the {teacher}-channel teacher needs {}", teacher + 1)]
    ChannelMismatch { teacher: usize, student: usize },
    #[error("teacher must be frozen before distillation")]
    TeacherNotFrozen,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Incremental distillation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Ensemble size for the uncertainty map.
    pub q: usize,
    pub uncertainty: WeightMode,
    /// Foreground target after smoothing; background gets `1 − smoothing`.
    pub smoothing: f64,
    pub new_task_kl_order: KlOrder,
    /// Compute each sample's uncertainty map once instead of every step.
    pub uncertainty_cache: bool,
    /// Initialize the student randomly instead of from the teacher.
    pub cold_start: bool,
    pub pool: PoolConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            weight_decay: 3e-5,
            batch_size: 2,
            epochs: 300,
            lambda1: 1.0,
            lambda2: 20.0,
            lambda3: 20.0,
            q: 6,
            uncertainty: WeightMode::AsPaper,
            smoothing: 0.7,
            new_task_kl_order: KlOrder::AsPaper,
            uncertainty_cache: false,
            cold_start: false,
            pool: PoolConfig::default(),
            seed: 0,
        }
    }
}

fn check_common(lr: f64, wd: f64, batch: usize, epochs: usize) -> Result<(), TrainError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrainError::Config(format!("lr must be positive, got {lr}")));
    }
    if !(wd >= 0.0 && wd.is_finite()) {
        return Err(TrainError::Config(format!("weight_decay must be nonnegative, got {wd}")));
    }
    if batch == 0 {
        return Err(TrainError::Config("batch_size must be at least 1".into()));
    }
    if epochs == 0 {
        return Err(TrainError::Config("epochs must be at least 1".into()));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_common(self.lr, self.weight_decay, self.batch_size, self.epochs)?;
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.q == 0 {
            return Err(TrainError::Config("q must be at least 1".into()));
        }
        if !(self.smoothing > 0.5 && self.smoothing < 1.0) {
            return Err(TrainError::Config(format!("smoothing {} must lie in (0.5, 1)", self.smoothing)));
        }
        self.pool.validate()?;
        Ok(())
    }

    /// Whether the old-task term contributes at all.
    pub fn uses_old_task(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }
}

/// Supervised teacher training. The teacher stands in for a pretrained
/// model, so its schedule is independent of the distillation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { lr: 1e-2, weight_decay: 3e-5, batch_size: 2, epochs: 30, seed: 0 }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        check_common(self.lr, self.weight_decay, self.batch_size, self.epochs)
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_total: f64,
    /// Weighted old-task contribution (zero for teacher training).
    pub l_old: f64,
    /// Weighted new-task contribution (the cross-entropy for teacher training).
    pub l_new: f64,
    /// Mean raw uncertainty; `None` when no ensemble was evaluated.
    pub mean_u: Option<f64>,
    /// Training Dice per organ, in the order given by the log's organ list.
    pub train_dice: Vec<f64>,
}

pub fn write_epoch_csv(path: &Path, organs: &[u16], logs: &[EpochLog]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["epoch", "l_total", "l_old", "l_new", "mean_u"].map(String::from).to_vec();
    header.extend(organs.iter().map(|o| format!("dice_organ{o}")));
    w.write_record(&header).map_err(csv_err)?;
    for l in logs {
        let mut row = vec![
            l.epoch.to_string(),
            format!("{:.9}", l.l_total),
            format!("{:.9}", l.l_old),
            format!("{:.9}", l.l_new),
            l.mean_u.map(|u| format!("{u:.9}")).unwrap_or_default(),
        ];
        row.extend(l.train_dice.iter().map(|d| format!("{d:.6}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| TrainError::Io(e.into_error()))?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> TrainError {
    TrainError::Io(std::io::Error::other(e))
}

/// Tags separating the random streams of one run.
pub(crate) mod streams {
    pub const SHUFFLE: u64 = 0x5B0F_F1E0;
    pub const UNCERTAINTY: u64 = 0x0E17_A1D7;
    pub const STUDENT_INIT: u64 = 0x57DE_0117;
    pub const TEACHER_INIT: u64 = 0x7EAC_0117;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TeacherConfig::default().validate().unwrap();
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size), (3e-5, 3e-5, 2));
        assert_eq!((c.lambda1, c.lambda2, c.lambda3, c.q), (1.0, 20.0, 20.0, 6));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lambda2: -1.0, ..Default::default() },
            TrainConfig { q: 0, ..Default::default() },
            TrainConfig { smoothing: 0.4, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
