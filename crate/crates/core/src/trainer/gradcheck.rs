//! Finite-difference verification of the full distillation objective.

use rand::Rng as _;
use serde::Serialize;

use crate::autodiff::{Graph, Tensor};
use crate::labels::LabelMap;
use crate::losses::{self, KlOrder, ProbMap, SmoothedLabels};
use crate::rng;
use crate::segnet::{SegModel, SegModelConfig};
use crate::uncertainty::{uncertainty_map, weight_from_uncertainty, PoolConfig, WeightMode};

use super::objective::{batch_gradients, distill_sample_grad, distill_terms, LossWeights};
use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub params: usize,
    pub h: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Layer holding the worst parameter.
    pub worst_layer: usize,
    /// `"kernel"` or `"bias"`.
    pub worst_tensor: &'static str,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Problem {
    student: SegModel,
    images: Vec<Tensor>,
    teacher_probs: Vec<ProbMap>,
    weights: Vec<Tensor>,
    targets: Vec<SmoothedLabels>,
    lw: LossWeights,
}

const SIZE: usize = 6;
const BATCH: usize = 2;

fn build(seed: u64) -> Result<Problem, TrainError> {
    let mut teacher_cfg = SegModelConfig::new(2);
    teacher_cfg.hidden = vec![4];
    let mut teacher = SegModel::init_random(teacher_cfg.clone(), rng::derive_seed(seed, &[1]))?;
    teacher.freeze();
    let mut student_cfg = teacher_cfg;
    student_cfg.classes = 3;
    let mut student = SegModel::init_random(student_cfg, rng::derive_seed(seed, &[2]))?;
    // non-zero biases so every parameter tensor is exercised generically
    {
        let mut r = rng::stream(seed, &[3]);
        for p in student.params_mut()? {
            p.update(|_, v| *v += r.gen_range(-0.1..0.1))?;
        }
    }
    let mut r = rng::stream(seed, &[4]);
    let pool = PoolConfig::default();
    let (mut images, mut teacher_probs, mut weights, mut targets) = (vec![], vec![], vec![], vec![]);
    for _ in 0..BATCH {
        let img = Tensor::new(vec![1, SIZE, SIZE], (0..SIZE * SIZE).map(|_| r.gen_range(0.0..1.0)).collect())?;
        let labels = LabelMap::new(SIZE, SIZE, (0..SIZE * SIZE).map(|_| r.gen_range(0..2)).collect())
            .expect("square map");
        let u = uncertainty_map(&teacher, &img, 6, &pool, &mut r)?;
        weights.push(weight_from_uncertainty(&u, WeightMode::AsPaper));
        teacher_probs.push(teacher.predict_probs(&img)?);
        targets.push(losses::smooth_labels(&labels)?);
        images.push(img);
    }
    let lw = LossWeights { lambda1: 1.0, lambda2: 20.0, lambda3: 20.0, kl_order: KlOrder::AsPaper };
    Ok(Problem { student, images, teacher_probs, weights, targets, lw })
}

fn batch_loss(p: &Problem, student: &SegModel) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for i in 0..BATCH {
        let mut g = Graph::new();
        let params = student.register(&mut g);
        let t = distill_terms(
            &mut g,
            student,
            &params,
            &p.images[i],
            &p.teacher_probs[i],
            &p.weights[i],
            &p.targets[i],
            p.lw,
        )?;
        total += g.value(t.total).item();
    }
    Ok(total / BATCH as f64)
}

/// Compare every parameter gradient of the batch-mean distillation loss on a
/// small random model (under 500 parameters) against central differences.
pub fn gradcheck(seed: u64, h: f64, tolerance: f64) -> Result<GradcheckReport, TrainError> {
    if !(h > 0.0) {
        return Err(TrainError::Config(format!("step h must be positive, got {h}")));
    }
    let p = build(seed)?;
    let batch: Vec<usize> = (0..BATCH).collect();
    let (grads, _) = batch_gradients(&batch, |i| {
        distill_sample_grad(&p.student, &p.images[i], &p.teacher_probs[i], &p.weights[i], &p.targets[i], p.lw)
    })?;

    let mut report = GradcheckReport {
        seed,
        params: p.student.param_count(),
        h,
        tolerance,
        max_rel_error: 0.0,
        worst_layer: 0,
        worst_tensor: "kernel",
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        passed: false,
    };
    let mut probe = p.student.clone();
    for (t, g_tensor) in grads.iter().enumerate() {
        for (j, &analytic) in g_tensor.iter().enumerate() {
            let shift = |m: &mut SegModel, d: f64| -> Result<(), TrainError> {
                m.params_mut()?[t].update(|idx, v| {
                    if idx == j {
                        *v += d;
                    }
                })?;
                Ok(())
            };
            let orig = p.student.params()[t].data()[j];
            shift(&mut probe, h)?;
            let plus = batch_loss(&p, &probe)?;
            shift(&mut probe, -2.0 * h)?;
            let minus = batch_loss(&p, &probe)?;
            probe.params_mut()?[t].update(|idx, v| {
                if idx == j {
                    *v = orig;
                }
            })?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            if err > report.max_rel_error || (t == 0 && j == 0) {
                report.max_rel_error = err;
                report.worst_layer = t / 2;
                report.worst_tensor = if t % 2 == 0 { "kernel" } else { "bias" };
                report.worst_index = j;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
