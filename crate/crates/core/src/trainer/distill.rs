use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::exec;
use crate::losses::{self, ProbMap, SmoothedLabels};
use crate::phantom::PhantomSample;
use crate::rng;
use crate::segnet::SegModel;
use crate::uncertainty::{uncertainty_map, weight_from_uncertainty, WeightMode};

use super::metrics::{class_dice, stable_mean};
use super::objective::{batch_gradients, distill_sample_grad, LossWeights};
use super::{adam_step, streams, AdamState, EpochLog, TrainConfig, TrainError};

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: SegModel,
    pub logs: Vec<EpochLog>,
}

/// Train a `K+2`-class student from a frozen `K+1`-class teacher and a
/// dataset annotated only for the new organ (binary labels).
///
/// The student starts from the teacher's weights unless `cfg.cold_start`.
pub fn distill_incremental(
    teacher: &SegModel,
    new_dataset: &[PhantomSample],
    cfg: &TrainConfig,
) -> Result<DistillOutcome, TrainError> {
    let seed = rng::derive_seed(cfg.seed, &[streams::STUDENT_INIT]);
    let student = if cfg.cold_start {
        let mut c = teacher.config().clone();
        c.classes += 1;
        SegModel::init_random(c, seed)?
    } else {
        teacher.extend_for_increment(1, seed)?
    };
    distill_from(teacher, student, new_dataset, cfg)
}

struct Context<'a> {
    teacher: &'a SegModel,
    data: &'a [PhantomSample],
    cfg: &'a TrainConfig,
    teacher_probs: Vec<ProbMap>,
    targets: Vec<SmoothedLabels>,
    cached: Option<Vec<(Tensor, Option<f64>)>>,
}

impl Context<'_> {
    /// Old-task pixel weights for sample `i`, plus its mean raw uncertainty.
    fn weights(&self, i: usize, epoch: usize) -> Result<(Tensor, Option<f64>), TrainError> {
        if let Some(c) = &self.cached {
            return Ok(c[i].clone());
        }
        let plane = self.teacher_probs[i].plane();
        let (h, w) = self.data[i].labels.dims();
        if !self.cfg.uses_old_task() {
            return Ok((Tensor::zeros(&[h, w]), None));
        }
        if self.cfg.uncertainty == WeightMode::Off {
            return Ok((Tensor::full(&[h, w], 1.0), None));
        }
        debug_assert_eq!(plane, h * w);
        let pass = if self.cfg.uncertainty_cache { 0 } else { epoch as u64 + 1 };
        let mut r = rng::stream(self.cfg.seed, &[streams::UNCERTAINTY, pass, i as u64]);
        let u = uncertainty_map(self.teacher, &self.data[i].image, self.cfg.q, &self.cfg.pool, &mut r)?;
        Ok((weight_from_uncertainty(&u, self.cfg.uncertainty), Some(u.mean())))
    }
}

/// Distill into a given student. The student must have exactly one more
/// output channel than the teacher.
pub fn distill_from(
    teacher: &SegModel,
    mut student: SegModel,
    data: &[PhantomSample],
    cfg: &TrainConfig,
) -> Result<DistillOutcome, TrainError> {
    cfg.validate()?;
    if !teacher.is_frozen() {
        return Err(TrainError::TeacherNotFrozen);
    }
    if student.classes() != teacher.classes() + 1 {
        return Err(TrainError::ChannelMismatch { teacher: teacher.classes(), student: student.classes() });
    }
    if data.is_empty() {
        return Err(TrainError::Invalid("empty training set".into()));
    }
    if let Some(s) = data.iter().find(|s| s.labels.max_label() > 1) {
        return Err(TrainError::Invalid(format!("new-organ labels must be binary, found {}", s.labels.max_label())));
    }
    let k = teacher.classes() - 1;
    let new_class = k + 1;
    let lw = LossWeights {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        lambda3: cfg.lambda3,
        kl_order: cfg.new_task_kl_order,
    };

    let teacher_probs = exec::map(data, |s| teacher.predict_probs(&s.image))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let targets = data
        .iter()
        .map(|s| losses::smooth_labels_with(&s.labels, cfg.smoothing))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ctx = Context { teacher, data, cfg, teacher_probs, targets, cached: None };
    if cfg.uncertainty_cache {
        let c = exec::try_map_range(data.len(), |i| ctx.weights(i, 0))?;
        ctx.cached = Some(c);
    }

    let mut adam = AdamState::new(&student.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[streams::SHUFFLE, epoch as u64]));
        let (mut totals, mut olds, mut news, mut us, mut dice) = (vec![], vec![], vec![], vec![], vec![]);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &student;
            let ctx = &ctx;
            let (grads, per) = batch_gradients(batch, |i| {
                let (w, u) = ctx.weights(i, epoch)?;
                let mut s = distill_sample_grad(snapshot, &data[i].image, &ctx.teacher_probs[i], &w, &ctx.targets[i], lw)?;
                s.mean_u = u;
                Ok(s)
            })?;
            for (s, &i) in per.iter().zip(batch) {
                if !s.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step });
                }
                totals.push(s.total);
                olds.push(s.old);
                news.push(s.new);
                us.extend(s.mean_u);
                let binary: Vec<usize> = s.pred.iter().map(|&p| usize::from(p == new_class)).collect();
                dice.push(class_dice(&binary, data[i].labels.labels(), 1));
            }
            adam_step(&mut student.params_mut()?, &grads, &mut adam, cfg.lr, cfg.weight_decay)?;
        }
        logs.push(EpochLog {
            epoch,
            l_total: stable_mean(&mut totals),
            l_old: stable_mean(&mut olds),
            l_new: stable_mean(&mut news),
            mean_u: (!us.is_empty()).then(|| stable_mean(&mut us)),
            train_dice: vec![stable_mean(&mut dice)],
        });
    }
    Ok(DistillOutcome { student, logs })
}
