//! Probability transforms and loss terms for teacher/student distillation.
//!
//! The student predicts `K+2` channels (background, `K` old organs, one new
//! organ) while the teacher predicts `K+1`. The two remaps fold the student's
//! distribution onto a smaller label space so it can be compared against a
//! target:
//!
//! * [`remap_old`] merges the new organ into background, giving a `K+1`-way
//!   distribution comparable with the teacher.
//! * [`remap_new`] merges background and all old organs, giving a 2-way
//!   distribution comparable with a single-organ annotation, where every other
//!   organ is labelled background.
//!
//! Every loss is a mean over pixels and clamps probabilities at
//! [`PROB_FLOOR`] before taking a logarithm. Teacher probabilities are plain
//! tensors, never graph nodes, so no gradient reaches them.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, PROB_FLOOR};
use crate::autodiff::{AutodiffError, Graph, Result, Tensor, Var};
use crate::labels::LabelMap;

/// Tolerance on the per-pixel channel sum of a valid distribution.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// `[C, H, W]` tensor whose channel vector at every pixel is a distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub fn new(t: Tensor) -> Result<Self> {
        const OP: &str = "ProbMap";
        let (c, h, w) = t.dims3(OP)?;
        let plane = h * w;
        let d = t.data();
        if d.iter().any(|&p| p < 0.0) {
            return Err(AutodiffError::invalid(OP, "negative probability"));
        }
        for p in 0..plane {
            let s: f64 = (0..c).map(|ch| d[ch * plane + p]).sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(AutodiffError::invalid(OP, format!("pixel {p} sums to {s}")));
            }
        }
        Ok(ProbMap(t))
    }

    /// Channel softmax of plain logits.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (c, h, w) = logits.dims3("softmax_channels")?;
        if c < 2 {
            return Err(AutodiffError::invalid("softmax_channels", format!("need at least 2 channels, got {c}")));
        }
        let t = Tensor::from_parts(vec![c, h, w], kernels::softmax_forward(c, h * w, logits.data()));
        t.check_finite("softmax_channels")?;
        Ok(ProbMap(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn plane(&self) -> usize {
        self.0.shape()[1] * self.0.shape()[2]
    }

    pub fn argmax(&self) -> Vec<usize> {
        kernels::argmax_channels(self.channels(), self.plane(), self.0.data())
    }
}

/// Smoothed two-way targets `[background, new organ]` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedLabels(Tensor);

impl SmoothedLabels {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Argument order of the new-task KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlOrder {
    /// `KL(p̂_new ‖ g)`: the prediction is the first argument.
    #[default]
    AsPaper,
    /// `KL(g ‖ p̂_new)`: the smoothed labels are the first argument.
    Reversed,
}

pub fn softmax_channels(g: &mut Graph, logits: Var) -> Result<Var> {
    g.softmax_channels(logits)
}

fn unit_weights(plane: usize) -> Vec<f64> {
    vec![1.0; plane]
}

/// `KL(target ‖ pred)` averaged over pixels.
pub fn kl_divergence(g: &mut Graph, target: &ProbMap, pred: Var) -> Result<Var> {
    g.weighted_kl(target.tensor(), pred, &unit_weights(target.plane()))
}

/// Mean over pixels of `−ln pred[label]`.
pub fn cross_entropy_hard(g: &mut Graph, labels: &LabelMap, pred: Var) -> Result<Var> {
    let (_, h, w) = g.value(pred).dims3("cross_entropy_hard")?;
    if labels.dims() != (h, w) {
        return Err(AutodiffError::shape("cross_entropy_hard", format!("labels {:?} vs {h}x{w}", labels.dims())));
    }
    g.weighted_nll(pred, &labels.as_indices(), &unit_weights(h * w))
}

/// `(1−α)·H(q, p_s) + α·KL(p_t ‖ p_s)` for teacher and student of equal width.
///
/// This is the textbook distillation objective. It cannot compare a `K+1`
/// teacher against a `K+2` student, which is what the remaps are for.
pub fn kd_loss_reference(g: &mut Graph, q: &LabelMap, p_t: &ProbMap, p_s: Var, alpha: f64) -> Result<Var> {
    let cs = g.value(p_s).dims3("kd_loss_reference")?.0;
    if cs != p_t.channels() {
        return Err(AutodiffError::shape(
            "kd_loss_reference",
            format!("teacher has {} channels, student {cs}", p_t.channels()),
        ));
    }
    let ce = cross_entropy_hard(g, q, p_s)?;
    let kl = kl_divergence(g, p_t, p_s)?;
    let a = g.scale(ce, 1.0 - alpha)?;
    let b = g.scale(kl, alpha)?;
    g.add(a, b)
}

fn check_student_width(g: &Graph, op: &'static str, p_s: Var, k: usize) -> Result<()> {
    let c = g.value(p_s).dims3(op)?.0;
    if c != k + 2 {
        return Err(AutodiffError::shape(op, format!("expected K+2 = {} channels, got {c}", k + 2)));
    }
    Ok(())
}

/// Fold the new organ into background: `[p0 + p_{K+1}, p1, ..., pK]`.
pub fn remap_old(g: &mut Graph, p_s: Var, k: usize) -> Result<Var> {
    check_student_width(g, "remap_old", p_s, k)?;
    let mut groups = vec![vec![0, k + 1]];
    groups.extend((1..=k).map(|i| vec![i]));
    g.channel_group_sum(p_s, groups)
}

/// Fold background and old organs together: `[Σ_{i≤K} p_i, p_{K+1}]`.
pub fn remap_new(g: &mut Graph, p_s: Var, k: usize) -> Result<Var> {
    check_student_width(g, "remap_new", p_s, k)?;
    g.channel_group_sum(p_s, vec![(0..=k).collect(), vec![k + 1]])
}

/// Old-task distillation, weighted per pixel:
/// `mean[u·λ1·(−ln p̂_old[argmax p_t]) + u·λ2·KL(p_t ‖ p̂_old)]`.
pub fn loss_old(
    g: &mut Graph,
    p_t: &ProbMap,
    p_hat_old: Var,
    weights: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    const OP: &str = "loss_old";
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(AutodiffError::invalid(OP, format!("negative loss weight ({lambda1}, {lambda2})")));
    }
    if p_t.tensor().shape() != g.value(p_hat_old).shape() {
        return Err(AutodiffError::shape(
            OP,
            format!("teacher {:?} vs remapped student {:?}", p_t.tensor().shape(), g.value(p_hat_old).shape()),
        ));
    }
    if weights.len() != p_t.plane() {
        return Err(AutodiffError::shape(OP, format!("weight map {:?} vs {} pixels", weights.shape(), p_t.plane())));
    }
    let u = weights.data();
    let hard = p_t.argmax();
    let w1: Vec<f64> = u.iter().map(|x| x * lambda1).collect();
    let w2: Vec<f64> = u.iter().map(|x| x * lambda2).collect();
    let ce = g.weighted_nll(p_hat_old, &hard, &w1)?;
    let kl = g.weighted_kl(p_t.tensor(), p_hat_old, &w2)?;
    g.add(ce, kl)
}

/// Smooth a binary map with the default 0.7 / 0.3 split.
pub fn smooth_labels(hard: &LabelMap) -> Result<SmoothedLabels> {
    smooth_labels_with(hard, 0.7)
}

/// Foreground pixels become `[1−fg, fg]`, background pixels `[fg, 1−fg]`.
pub fn smooth_labels_with(hard: &LabelMap, fg: f64) -> Result<SmoothedLabels> {
    const OP: &str = "smooth_labels";
    if !(fg > 0.5 && fg < 1.0) {
        return Err(AutodiffError::invalid(OP, format!("smoothing value {fg} must lie in (0.5, 1)")));
    }
    let (h, w) = hard.dims();
    let plane = h * w;
    let mut data = vec![0.0; 2 * plane];
    for (p, &l) in hard.labels().iter().enumerate() {
        let on = match l {
            0 => false,
            1 => true,
            other => return Err(AutodiffError::invalid(OP, format!("non-binary label {other}"))),
        };
        data[p] = if on { 1.0 - fg } else { fg };
        data[plane + p] = if on { fg } else { 1.0 - fg };
    }
    Ok(SmoothedLabels(Tensor::from_parts(vec![2, h, w], data)))
}

/// New-task loss between the two-way remapped student and smoothed labels.
pub fn loss_new(g: &mut Graph, p_hat_new: Var, labels: &SmoothedLabels, order: KlOrder) -> Result<Var> {
    let plane = labels.tensor().shape()[1] * labels.tensor().shape()[2];
    let w = unit_weights(plane);
    match order {
        KlOrder::AsPaper => g.weighted_kl_pred_first(p_hat_new, labels.tensor(), &w),
        KlOrder::Reversed => g.weighted_kl(labels.tensor(), p_hat_new, &w),
    }
}

/// Channels-first per-pixel entropy `−Σ p ln p` of a distribution map.
pub fn entropy(p: &ProbMap) -> Vec<f64> {
    let (c, plane) = (p.channels(), p.plane());
    let d = p.tensor().data();
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for (o, &q) in out.iter_mut().zip(&d[ch * plane..(ch + 1) * plane]) {
            if q > 0.0 {
                *o -= q * q.max(PROB_FLOOR).ln();
            }
        }
    }
    out
}
