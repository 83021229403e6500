//! Per-sample objectives and their parameter gradients.

use crate::autodiff::{Graph, Tensor, Var};
use crate::exec;
use crate::labels::LabelMap;
use crate::losses::{self, KlOrder, ProbMap, SmoothedLabels};
use crate::segnet::SegModel;

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub kl_order: KlOrder,
}

/// Graph handles of the distillation objective.
#[derive(Clone, Copy, Debug)]
pub struct DistillTerms {
    pub total: Var,
    /// `mean[u·λ1·H + u·λ2·KL]`
    pub old: Var,
    /// `λ3 · loss_new`
    pub new: Var,
    pub probs: Var,
}

/// Record the full objective for one image:
/// `L = mean[u·λ1·H(argmax p_t, p̂_old) + u·λ2·KL(p_t ‖ p̂_old)] + λ3·L_new`.
#[allow(clippy::too_many_arguments)]
pub fn distill_terms(
    g: &mut Graph,
    student: &SegModel,
    params: &[Var],
    image: &Tensor,
    p_t: &ProbMap,
    weights: &Tensor,
    target: &SmoothedLabels,
    lw: LossWeights,
) -> Result<DistillTerms, TrainError> {
    let k = p_t.channels() - 1;
    let x = g.leaf(image.clone());
    let logits = student.forward_graph(g, params, x)?;
    let probs = g.softmax_channels(logits)?;
    let p_old = losses::remap_old(g, probs, k)?;
    let p_new = losses::remap_new(g, probs, k)?;
    let old = losses::loss_old(g, p_t, p_old, weights, lw.lambda1, lw.lambda2)?;
    let raw_new = losses::loss_new(g, p_new, target, lw.kl_order)?;
    let new = g.scale(raw_new, lw.lambda3)?;
    let total = g.add(old, new)?;
    Ok(DistillTerms { total, old, new, probs })
}

/// Gradients and diagnostics for one sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub grads: Vec<Vec<f64>>,
    pub total: f64,
    pub old: f64,
    pub new: f64,
    /// Argmax prediction of the forward pass, before the update.
    pub pred: Vec<usize>,
    /// Mean raw uncertainty of the pixel weights, when an ensemble was run.
    pub mean_u: Option<f64>,
}

fn collect_grads(g: &mut Graph, params: &[Var]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|&p| g.take_grad(p).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; g.value(p).len()]))
        .collect()
}

pub fn distill_sample_grad(
    student: &SegModel,
    image: &Tensor,
    p_t: &ProbMap,
    weights: &Tensor,
    target: &SmoothedLabels,
    lw: LossWeights,
) -> Result<SampleGrad, TrainError> {
    let mut g = Graph::new();
    let params = student.register(&mut g);
    let t = distill_terms(&mut g, student, &params, image, p_t, weights, target, lw)?;
    let pv = g.value(t.probs);
    let pred = crate::autodiff::kernels::argmax_channels(pv.shape()[0], pv.shape()[1] * pv.shape()[2], pv.data());
    let (total, old, new) = (g.value(t.total).item(), g.value(t.old).item(), g.value(t.new).item());
    g.backward(t.total)?;
    Ok(SampleGrad { grads: collect_grads(&mut g, &params), total, old, new, pred, mean_u: None })
}

/// Cross-entropy of the model's softmax against hard labels.
pub fn teacher_sample_grad(model: &SegModel, image: &Tensor, labels: &LabelMap) -> Result<SampleGrad, TrainError> {
    let mut g = Graph::new();
    let params = model.register(&mut g);
    let x = g.leaf(image.clone());
    let logits = model.forward_graph(&mut g, &params, x)?;
    let probs = g.softmax_channels(logits)?;
    let loss = losses::cross_entropy_hard(&mut g, labels, probs)?;
    let pv = g.value(probs);
    let pred = crate::autodiff::kernels::argmax_channels(pv.shape()[0], pv.shape()[1] * pv.shape()[2], pv.data());
    let total = g.value(loss).item();
    g.backward(loss)?;
    Ok(SampleGrad { grads: collect_grads(&mut g, &params), total, old: 0.0, new: total, pred, mean_u: None })
}

/// Evaluate `f` on each batch member and average the gradients. Members may
/// run concurrently; the sum is always taken in batch order.
pub fn batch_gradients<F>(batch: &[usize], f: F) -> Result<(Vec<Vec<f64>>, Vec<SampleGrad>), TrainError>
where
    F: Fn(usize) -> Result<SampleGrad, TrainError> + Sync + Send,
{
    let per: Vec<SampleGrad> = exec::map(batch, |&i| f(i)).into_iter().collect::<Result<_, _>>()?;
    let mut sum: Vec<Vec<f64>> = per[0].grads.iter().map(|g| vec![0.0; g.len()]).collect();
    for s in &per {
        for (acc, g) in sum.iter_mut().zip(&s.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    sum.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((sum, per))
}
