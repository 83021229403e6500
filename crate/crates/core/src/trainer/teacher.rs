use rand::seq::SliceRandom;

use crate::phantom::PhantomSample;
use crate::rng;
use crate::segnet::{SegModel, SegModelConfig};

use super::metrics::{class_dice, stable_mean};
use super::objective::{batch_gradients, teacher_sample_grad};
use super::{adam_step, streams, AdamState, EpochLog, TeacherConfig, TrainError};

/// Fit a `C`-class model to hard labels `0..C` with cross-entropy and Adam.
/// The returned model is frozen.
pub fn train_teacher(
    samples: &[PhantomSample],
    model_cfg: SegModelConfig,
    cfg: &TeacherConfig,
) -> Result<(SegModel, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Invalid("empty training set".into()));
    }
    let classes = model_cfg.classes;
    if let Some(s) = samples.iter().find(|s| s.labels.max_label() as usize >= classes) {
        return Err(TrainError::Invalid(format!("label {} out of range for {classes} classes", s.labels.max_label())));
    }
    let mut model = SegModel::init_random(model_cfg, rng::derive_seed(cfg.seed, &[streams::TEACHER_INIT]))?;
    let mut adam = AdamState::new(&model.params());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[streams::SHUFFLE, epoch as u64]));
        let mut losses = Vec::with_capacity(samples.len());
        let mut dice: Vec<Vec<f64>> = vec![Vec::new(); classes - 1];
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &model;
            let (grads, per) = batch_gradients(batch, |i| {
                teacher_sample_grad(snapshot, &samples[i].image, &samples[i].labels)
            })?;
            for (s, &i) in per.iter().zip(batch) {
                if !s.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch, step });
                }
                losses.push(s.total);
                for (c, d) in dice.iter_mut().enumerate() {
                    d.push(class_dice(&s.pred, samples[i].labels.labels(), c + 1));
                }
            }
            adam_step(&mut model.params_mut()?, &grads, &mut adam, cfg.lr, cfg.weight_decay)?;
        }
        let loss = stable_mean(&mut losses);
        logs.push(EpochLog {
            epoch,
            l_total: loss,
            l_old: 0.0,
            l_new: loss,
            mean_u: None,
            train_dice: dice.iter_mut().map(|d| stable_mean(d)).collect(),
        });
    }
    model.freeze();
    Ok((model, logs))
}
