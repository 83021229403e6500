//! Teacher uncertainty from an ensemble of intensity-perturbed inputs.
//!
//! Each of `Q` copies of the input gets a random subset of {contrast,
//! brightness, Gaussian blur, Gaussian noise}. None of these move object
//! boundaries, so the teacher's `Q` probability maps stay spatially aligned
//! and their pixelwise mean is meaningful. The entropy of that mean is the
//! uncertainty map, bounded by `ln C`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::exec;
use crate::losses::{self, ProbMap};
use crate::rng::Rng;
use crate::segnet::{ModelError, SegModel};

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("invalid perturbation pool: {0}")]
    Pool(String),
    #[error("ensemble size Q must be at least 1")]
    EmptyEnsemble,
    #[error("unknown uncertainty mode {0:?} (expected as-paper, normalized, confidence or off)")]
    UnknownMode(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One intensity-only transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    /// `x → mean + factor·(x − mean)`
    Contrast { factor: f64 },
    /// `x → x + shift`
    Brightness { shift: f64 },
    GaussianBlur { sigma: f64 },
    /// Noise is keyed by its own seed so a spec list fully determines the
    /// output image.
    GaussianNoise { sigma: f64, seed: u64 },
}

/// Inclusion probability and parameter ranges (`[lo, hi]`) of the pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub p_include: f64,
    pub contrast: [f64; 2],
    pub brightness: [f64; 2],
    pub blur_sigma: [f64; 2],
    pub noise_sigma: [f64; 2],
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            p_include: 0.5,
            contrast: [0.75, 1.25],
            brightness: [-0.1, 0.1],
            blur_sigma: [0.5, 1.5],
            noise_sigma: [0.0, 0.05],
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        let bad = |m: String| Err(UncertaintyError::Pool(m));
        if !(self.p_include > 0.0 && self.p_include <= 1.0) {
            return bad(format!("p_include {} must lie in (0, 1]; at least one transform is required", self.p_include));
        }
        for (name, [lo, hi]) in [
            ("contrast", self.contrast),
            ("brightness", self.brightness),
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} range [{lo}, {hi}] is empty or non-finite"));
            }
        }
        if self.contrast[0] <= 0.0 {
            return bad("contrast factor must be positive".into());
        }
        if self.blur_sigma[0] <= 0.0 {
            return bad("blur sigma must be positive".into());
        }
        if self.noise_sigma[0] < 0.0 {
            return bad("noise sigma must be nonnegative".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Draw a non-empty transform list in the fixed order contrast, brightness,
/// blur, noise. Each kind is kept with probability `p_include`; an empty
/// draw is redrawn.
pub fn sample_perturbation(rng: &mut Rng, cfg: &PoolConfig) -> Result<Vec<PerturbationSpec>, UncertaintyError> {
    cfg.validate()?;
    loop {
        let mut picks = [false; 4];
        for p in picks.iter_mut() {
            *p = rng.gen_bool(cfg.p_include);
        }
        if !picks.iter().any(|&p| p) {
            continue;
        }
        let mut specs = Vec::new();
        if picks[0] {
            specs.push(PerturbationSpec::Contrast { factor: uniform(rng, cfg.contrast) });
        }
        if picks[1] {
            specs.push(PerturbationSpec::Brightness { shift: uniform(rng, cfg.brightness) });
        }
        if picks[2] {
            specs.push(PerturbationSpec::GaussianBlur { sigma: uniform(rng, cfg.blur_sigma) });
        }
        if picks[3] {
            let sigma = uniform(rng, cfg.noise_sigma);
            specs.push(PerturbationSpec::GaussianNoise { sigma, seed: rng.gen() });
        }
        return Ok(specs);
    }
}

/// Normalized Gaussian taps for radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable blur of one `h x w` plane with edge replication.
fn blur_plane(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_kernel(sigma);
    let r = (taps.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                taps.iter().enumerate().map(|(t, k)| k * src[y * w + clamp(x as isize + t as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                taps.iter().enumerate().map(|(t, k)| k * tmp[clamp(y as isize + t as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Apply `specs` in order to a `[1, H, W]` image, then clamp to `[0, 1]`.
pub fn apply_perturbation(image: &Tensor, specs: &[PerturbationSpec]) -> Result<Tensor, UncertaintyError> {
    let (c, h, w) = image.dims3("apply_perturbation")?;
    if c != 1 {
        return Err(AutodiffError::shape("apply_perturbation", format!("expected 1 channel, got {c}")).into());
    }
    let mut x = image.data().to_vec();
    for spec in specs {
        match *spec {
            PerturbationSpec::Contrast { factor } => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                x.iter_mut().for_each(|v| *v = mean + factor * (*v - mean));
            }
            PerturbationSpec::Brightness { shift } => x.iter_mut().for_each(|v| *v += shift),
            PerturbationSpec::GaussianBlur { sigma } => {
                if !(sigma > 0.0) {
                    return Err(UncertaintyError::Pool(format!("blur sigma {sigma} must be positive")));
                }
                x = blur_plane(&x, h, w, sigma);
            }
            PerturbationSpec::GaussianNoise { sigma, seed } => {
                if sigma > 0.0 {
                    let normal = Normal::new(0.0, sigma)
                        .map_err(|e| UncertaintyError::Pool(format!("noise sigma {sigma}: {e}")))?;
                    let mut r = Rng::seed_from_u64(seed);
                    x.iter_mut().for_each(|v| *v += normal.sample(&mut r));
                } else if sigma < 0.0 {
                    return Err(UncertaintyError::Pool(format!("noise sigma {sigma} is negative")));
                }
            }
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let out = Tensor::new(vec![1, h, w], x).map_err(|_| AutodiffError::NonFinite { op: "apply_perturbation" })?;
    assert_eq!(out.shape(), image.shape());
    Ok(out)
}

/// Per-pixel entropy of the ensemble-mean prediction over `C` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    values: Tensor,
    classes: usize,
}

impl UncertaintyMap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn max_entropy(&self) -> f64 {
        (self.classes as f64).ln()
    }

    pub fn mean(&self) -> f64 {
        self.values.data().iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Teacher softmax maps for `q` independently perturbed copies of `image`.
///
/// All spec lists are drawn from `rng` up front, so the forward passes can
/// run in any order with identical results.
pub fn uncertainty_ensemble(
    teacher: &SegModel,
    image: &Tensor,
    q: usize,
    pool: &PoolConfig,
    rng: &mut Rng,
) -> Result<Vec<ProbMap>, UncertaintyError> {
    if q == 0 {
        return Err(UncertaintyError::EmptyEnsemble);
    }
    let plans = (0..q).map(|_| sample_perturbation(rng, pool)).collect::<Result<Vec<_>, _>>()?;
    exec::map(&plans, |specs| {
        let x = apply_perturbation(image, specs)?;
        Ok(teacher.predict_probs(&x)?)
    })
    .into_iter()
    .collect()
}

/// Entropy of the pixelwise mean of `members`.
pub fn entropy_of_mean(members: &[ProbMap]) -> Result<UncertaintyMap, UncertaintyError> {
    let first = members.first().ok_or(UncertaintyError::EmptyEnsemble)?;
    let shape = first.tensor().shape().to_vec();
    let mut mean = vec![0.0; first.tensor().len()];
    for m in members {
        if m.tensor().shape() != shape.as_slice() {
            return Err(AutodiffError::shape("entropy_of_mean", "ensemble members differ in shape").into());
        }
        mean.iter_mut().zip(m.tensor().data()).for_each(|(a, b)| *a += b);
    }
    let q = members.len() as f64;
    mean.iter_mut().for_each(|a| *a /= q);
    let classes = shape[0];
    let mean = ProbMap::new(Tensor::new(shape.clone(), mean)?)?;
    let cap = (classes as f64).ln();
    let u: Vec<f64> = losses::entropy(&mean).into_iter().map(|v| v.clamp(0.0, cap)).collect();
    Ok(UncertaintyMap { values: Tensor::new(vec![shape[1], shape[2]], u)?, classes })
}

/// Ensemble entropy map of the teacher on `q` perturbed copies of `image`.
/// Teacher parameters are only read.
pub fn uncertainty_map(
    teacher: &SegModel,
    image: &Tensor,
    q: usize,
    pool: &PoolConfig,
    rng: &mut Rng,
) -> Result<UncertaintyMap, UncertaintyError> {
    entropy_of_mean(&uncertainty_ensemble(teacher, image, q, pool, rng)?)
}

/// Map from uncertainty to the per-pixel weight of the old-task loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// Raw entropy `u`.
    #[default]
    AsPaper,
    /// `u / ln C`, in `[0, 1]`.
    Normalized,
    /// `1 − u / ln C`: confident pixels count most.
    Confidence,
    /// Constant weight 1; the ensemble is not evaluated.
    Off,
}

impl WeightMode {
    pub const ALL: [WeightMode; 4] = [WeightMode::AsPaper, WeightMode::Normalized, WeightMode::Confidence, WeightMode::Off];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightMode::AsPaper => "as-paper",
            WeightMode::Normalized => "normalized",
            WeightMode::Confidence => "confidence",
            WeightMode::Off => "off",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightMode {
    type Err = UncertaintyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        WeightMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UncertaintyError::UnknownMode(s.to_string()))
    }
}

/// Per-pixel weights `[H, W]` derived from `u`.
pub fn weight_from_uncertainty(u: &UncertaintyMap, mode: WeightMode) -> Tensor {
    let cap = u.max_entropy();
    let shape = u.values.shape().to_vec();
    let data = match mode {
        WeightMode::AsPaper => return u.values.clone(),
        WeightMode::Normalized => u.values.data().iter().map(|v| v / cap).collect(),
        WeightMode::Confidence => u.values.data().iter().map(|v| 1.0 - v / cap).collect(),
        WeightMode::Off => vec![1.0; u.values.len()],
    };
    Tensor::from_parts(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::SegModelConfig;
    use crate::rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|i| i as f64 / (h * w) as f64).collect()).unwrap()
    }

    fn one_pixel(p: &[f64]) -> ProbMap {
        ProbMap::new(Tensor::new(vec![p.len(), 1, 1], p.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn full_inclusion_gives_all_kinds_in_order() {
        let cfg = PoolConfig { p_include: 1.0, ..Default::default() };
        let specs = sample_perturbation(&mut rng::stream(1, &[]), &cfg).unwrap();
        assert!(matches!(
            specs[..],
            [
                PerturbationSpec::Contrast { .. },
                PerturbationSpec::Brightness { .. },
                PerturbationSpec::GaussianBlur { .. },
                PerturbationSpec::GaussianNoise { .. }
            ]
        ));
    }

    #[test]
    fn zero_inclusion_is_rejected() {
        let cfg = PoolConfig { p_include: 0.0, ..Default::default() };
        assert!(matches!(sample_perturbation(&mut rng::stream(1, &[]), &cfg), Err(UncertaintyError::Pool(_))));
        let cfg = PoolConfig { blur_sigma: [0.0, 1.0], ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = PoolConfig { contrast: [1.2, 0.8], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let cfg = PoolConfig::default();
        let a: Vec<_> = (0..20).map(|i| sample_perturbation(&mut rng::stream(i, &[]), &cfg).unwrap()).collect();
        let b: Vec<_> = (0..20).map(|i| sample_perturbation(&mut rng::stream(i, &[]), &cfg).unwrap()).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn identity_contrast_and_brightness() {
        let img = ramp(5, 6);
        let specs =
            [PerturbationSpec::Contrast { factor: 1.0 }, PerturbationSpec::Brightness { shift: 0.0 }];
        let out = apply_perturbation(&img, &specs).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let img = Tensor::full(&[1, 9, 7], 0.42);
        for sigma in [0.3, 0.9, 1.5, 4.0] {
            let out = apply_perturbation(&img, &[PerturbationSpec::GaussianBlur { sigma }]).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
        }
        let mut delta = vec![0.0; 21 * 21];
        delta[10 * 21 + 10] = 1.0;
        let img = Tensor::new(vec![1, 21, 21], delta).unwrap();
        let out = apply_perturbation(&img, &[PerturbationSpec::GaussianBlur { sigma: 1.5 }]).unwrap();
        let mass: f64 = out.data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kernel_taps_sum_to_one() {
        for sigma in [0.5, 1.0, 1.5] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
            // independent sum over the unnormalized taps
            let raw: Vec<f64> = (0..k.len())
                .map(|i| {
                    let d = i as f64 - (k.len() / 2) as f64;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let total: f64 = raw.iter().sum();
            for (a, b) in k.iter().zip(&raw) {
                assert!((a - b / total).abs() < 1e-15);
            }
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_clamped() {
        let img = Tensor::full(&[1, 3, 3], 0.95);
        let out = apply_perturbation(&img, &[PerturbationSpec::Brightness { shift: 0.2 }]).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn entropy_of_identical_one_hot_members_is_zero() {
        let m = one_pixel(&[0.0, 1.0, 0.0]);
        let u = entropy_of_mean(&[m.clone(), m.clone(), m]).unwrap();
        assert_eq!(u.values().data(), &[0.0]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn entropy_of_opposite_members_is_ln2() {
        let u = entropy_of_mean(&[one_pixel(&[1.0, 0.0]), one_pixel(&[0.0, 1.0])]).unwrap();
        assert!((u.values().item() - 2f64.ln()).abs() < 1e-15);
        assert!((u.values().item() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn empty_ensemble_errors() {
        let t = SegModel::init_random(SegModelConfig::new(2), 0).unwrap();
        let r = uncertainty_map(&t, &ramp(4, 4), 0, &PoolConfig::default(), &mut rng::stream(0, &[]));
        assert!(matches!(r, Err(UncertaintyError::EmptyEnsemble)));
        assert!(entropy_of_mean(&[]).is_err());
    }

    #[test]
    fn weight_modes() {
        let zero = UncertaintyMap { values: Tensor::zeros(&[2, 2]), classes: 3 };
        assert!(weight_from_uncertainty(&zero, WeightMode::AsPaper).data().iter().all(|&v| v == 0.0));
        assert!(weight_from_uncertainty(&zero, WeightMode::Normalized).data().iter().all(|&v| v == 0.0));
        assert!(weight_from_uncertainty(&zero, WeightMode::Confidence).data().iter().all(|&v| v == 1.0));
        assert!(weight_from_uncertainty(&zero, WeightMode::Off).data().iter().all(|&v| v == 1.0));
        let full = UncertaintyMap { values: Tensor::full(&[2, 2], 3f64.ln()), classes: 3 };
        assert!(weight_from_uncertainty(&full, WeightMode::Normalized).data().iter().all(|&v| v == 1.0));
        assert_eq!("confidence".parse::<WeightMode>().unwrap(), WeightMode::Confidence);
        assert!(matches!("softmax".parse::<WeightMode>(), Err(UncertaintyError::UnknownMode(_))));
    }
}
