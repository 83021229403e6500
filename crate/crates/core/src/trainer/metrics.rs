//! Dice overlap and model evaluation.

use serde::{Deserialize, Serialize};

use crate::exec;
use crate::labels::LabelMap;
use crate::phantom::PhantomSample;
use crate::segnet::SegModel;

use super::TrainError;

/// `2|P ∩ G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice(pred: &LabelMap, gt: &LabelMap) -> Result<f64, TrainError> {
    if pred.dims() != gt.dims() {
        return Err(TrainError::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    if pred.max_label() > 1 || gt.max_label() > 1 {
        return Err(TrainError::Invalid("dice expects binary masks".into()));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        inter += (p & g) as usize;
        total += (p + g) as usize;
    }
    Ok(dice_from_counts(inter, total))
}

pub(crate) fn dice_from_counts(intersection: usize, total: usize) -> f64 {
    if total == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / total as f64
    }
}

/// Dice of class `class` between an argmax prediction and a label map.
pub(crate) fn class_dice(pred: &[usize], gt: &[u16], class: usize) -> f64 {
    let mut inter = 0;
    let mut total = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (p == class, g as usize == class);
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    dice_from_counts(inter, total)
}

/// Order-independent mean: values are sorted before summation.
pub(crate) fn stable_mean(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub organs: Vec<u16>,
    /// Per-organ Dice, averaged over samples, aligned with `organs`.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub samples: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn organ_dice(&self, organ: u16) -> Option<f64> {
        self.organs.iter().position(|&o| o == organ).map(|i| self.dice[i])
    }

    /// Mean Dice over a subset of organs.
    pub fn mean_over(&self, organs: &[u16]) -> f64 {
        let mut v: Vec<f64> = organs.iter().filter_map(|&o| self.organ_dice(o)).collect();
        stable_mean(&mut v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("organ,dice\n");
        for (o, d) in self.organs.iter().zip(&self.dice) {
            out.push_str(&format!("{o},{d:.6}\n"));
        }
        out.push_str(&format!("mean,{:.6}\n", self.mean_dice));
        out
    }
}

/// Per-pixel argmax segmentation of each sample, scored per organ.
pub fn evaluate(model: &SegModel, samples: &[PhantomSample], organs: &[u16]) -> Result<EvalReport, TrainError> {
    if let Some(&bad) = organs.iter().find(|&&o| o as usize >= model.classes()) {
        return Err(TrainError::Invalid(format!("organ {bad} out of range for a {}-class model", model.classes())));
    }
    let preds = exec::map(samples, |s| model.predict_labels(&s.image))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut dice = Vec::with_capacity(organs.len());
    for &o in organs {
        let mut per_sample: Vec<f64> =
            preds.iter().zip(samples).map(|(p, s)| class_dice(p, s.labels.labels(), o as usize)).collect();
        dice.push(stable_mean(&mut per_sample));
    }
    let mean_dice = stable_mean(&mut dice.clone());
    Ok(EvalReport { organs: organs.to_vec(), dice, mean_dice, samples: samples.len(), config_hash: String::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u16]) -> LabelMap {
        LabelMap::new(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let p = LabelMap::filled(10, 10, 1);
        assert_eq!(dice(&p, &p).unwrap(), 1.0);
        assert_eq!(dice(&mask(&[1, 1, 0, 0]), &mask(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&mask(&[1, 1, 1, 1, 0, 0]), &mask(&[0, 0, 1, 1, 1, 1])).unwrap(), 0.5);
        assert_eq!(dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
        assert!(dice(&mask(&[0, 0]), &mask(&[0, 0, 0])).is_err());
        assert!(dice(&mask(&[2, 0]), &mask(&[0, 0])).is_err());
    }

    #[test]
    fn stable_mean_ignores_order() {
        let mut a = vec![0.1, 0.7, 1e-17, 0.3];
        let mut b = vec![0.3, 1e-17, 0.7, 0.1];
        assert_eq!(stable_mean(&mut a).to_bits(), stable_mean(&mut b).to_bits());
    }
}
