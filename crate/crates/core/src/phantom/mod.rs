//! Synthetic multi-organ phantoms.
//!
//! Each sample is a square intensity image with `M` disjoint axis-aligned
//! elliptical "organs", each at its own mean intensity over a dark
//! background, plus Gaussian noise. Derived views turn the full label map
//! into the partially-labelled datasets used for incremental training.

pub mod dataset;
pub mod pgm;

pub use dataset::{read_dataset, write_dataset, Dataset, DatasetError, Manifest, Split};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::exec;
use crate::labels::LabelMap;
use crate::rng;

/// Minimum organ size in pixels.
pub const MIN_ORGAN_PIXELS: usize = 9;
/// Placement attempts per sample before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("could not place {organs} organs in sample {sample} within {attempts} attempts")]
    Crowded { sample: usize, organs: usize, attempts: usize },
    #[error("organ id {id} out of range 1..={max}")]
    BadOrgan { id: u16, max: u16 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Image height and width.
    pub size: usize,
    pub organs: usize,
    pub organ_means: Vec<f64>,
    pub background: f64,
    pub noise_sigma: f64,
    /// Range of each ellipse semi-axis, in pixels.
    pub radius: [f64; 2],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 32,
            organs: 3,
            organ_means: vec![0.35, 0.6, 0.85],
            background: 0.1,
            noise_sigma: 0.03,
            radius: [3.0, 6.0],
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Config(m));
        if self.size < 4 {
            return bad(format!("size {} is too small", self.size));
        }
        if self.organs == 0 || self.organs > 255 {
            return bad(format!("organ count {} must lie in 1..=255", self.organs));
        }
        if self.organ_means.len() != self.organs {
            return bad(format!("{} organ means for {} organs", self.organ_means.len(), self.organs));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.background) || !self.organ_means.iter().all(|&m| in_unit(m)) {
            return bad("intensities must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be nonnegative", self.noise_sigma));
        }
        let [lo, hi] = self.radius;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("radius range [{lo}, {hi}] is invalid"));
        }
        if 2.0 * hi.ceil() + 1.0 > self.size as f64 {
            return bad(format!("radius {hi} does not fit a {} grid", self.size));
        }
        Ok(())
    }
}

/// Intensity image `[1, H, W]` in `[0, 1]` with its full label map.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: Tensor,
    pub labels: LabelMap,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 - self.cy) / self.ry;
        let dx = (x as f64 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

/// One sample, keyed by `(seed, index)` only.
pub fn generate_sample(cfg: &PhantomConfig, seed: u64, index: usize) -> Result<PhantomSample, PhantomError> {
    let n = cfg.size;
    let mut rng = rng::stream(seed, &[0xFA47_0000, index as u64]);
    let mut labels = vec![0u16; n * n];
    let mut attempts = 0;
    for organ in 1..=cfg.organs {
        loop {
            attempts += 1;
            if attempts > MAX_PLACEMENT_ATTEMPTS {
                return Err(PhantomError::Crowded { sample: index, organs: cfg.organs, attempts: MAX_PLACEMENT_ATTEMPTS });
            }
            let ry = rng.gen_range(cfg.radius[0]..=cfg.radius[1]);
            let rx = rng.gen_range(cfg.radius[0]..=cfg.radius[1]);
            let cy = rng.gen_range(ry..=(n - 1) as f64 - ry);
            let cx = rng.gen_range(rx..=(n - 1) as f64 - rx);
            let e = Ellipse { cy, cx, ry, rx };
            let pixels: Vec<usize> =
                (0..n * n).filter(|&p| e.contains(p / n, p % n)).collect();
            if pixels.len() < MIN_ORGAN_PIXELS || pixels.iter().any(|&p| labels[p] != 0) {
                continue;
            }
            for p in pixels {
                labels[p] = organ as u16;
            }
            break;
        }
    }
    let mut image: Vec<f64> = labels
        .iter()
        .map(|&l| if l == 0 { cfg.background } else { cfg.organ_means[l as usize - 1] })
        .collect();
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in image.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok(PhantomSample {
        image: Tensor::new(vec![1, n, n], image).expect("finite phantom"),
        labels: LabelMap::new(n, n, labels).expect("square label map"),
    })
}

/// `n` samples, identical whether generated sequentially or in parallel.
pub fn generate_dataset(cfg: &PhantomConfig, n: usize, seed: u64) -> Result<Vec<PhantomSample>, PhantomError> {
    cfg.validate()?;
    if n == 0 {
        return Err(PhantomError::Config("dataset size must be at least 1".into()));
    }
    exec::try_map_range(n, |i| generate_sample(cfg, seed, i))
}

/// Binary view annotating only `organ`; every other organ becomes background.
pub fn to_single_organ(sample: &PhantomSample, organ: u16, organs: usize) -> Result<PhantomSample, PhantomError> {
    if organ == 0 || organ as usize > organs {
        return Err(PhantomError::BadOrgan { id: organ, max: organs as u16 });
    }
    Ok(PhantomSample { image: sample.image.clone(), labels: sample.labels.mask(organ) })
}

/// Keep organs `1..=k`, relabel the rest as background.
pub fn to_first_k_organs(sample: &PhantomSample, k: usize, organs: usize) -> Result<PhantomSample, PhantomError> {
    if k > organs {
        return Err(PhantomError::Config(format!("K = {k} exceeds the {organs} organs present")));
    }
    let labels = sample.labels.map(|l| if l as usize > k { 0 } else { l });
    Ok(PhantomSample { image: sample.image.clone(), labels })
}

/// First 80% of indices train, the rest test.
pub fn split_indices(n: usize) -> Split {
    let n_train = (n * 4) / 5;
    Split { train: (0..n_train).collect(), test: (n_train..n).collect() }
}
