//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<i>.pgm
//! <root>/labels_full/<i>.pgm
//! <root>/labels_organ<k>/<i>.pgm     for k in 1..=M
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pgm::{self, PgmError};
use super::{to_single_organ, PhantomConfig, PhantomError, PhantomSample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("manifest {path}: {detail}")]
    Manifest { path: String, detail: String },
    #[error("dataset does not match manifest: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub phantom: PhantomConfig,
    pub split: Split,
}

/// Full-label samples plus their manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<PhantomSample>,
}

impl Dataset {
    pub fn train(&self) -> Vec<PhantomSample> {
        self.manifest.split.train.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn test(&self) -> Vec<PhantomSample> {
        self.manifest.split.test.iter().map(|&i| self.samples[i].clone()).collect()
    }

    /// Training samples with the stored single-organ annotation for `organ`.
    pub fn organ_view_train(&self, organ: u16) -> Result<Vec<PhantomSample>, DatasetError> {
        let dir = self.root.join(format!("labels_organ{organ}"));
        self.manifest
            .split
            .train
            .iter()
            .map(|&i| {
                let labels = pgm::read_labels(&dir.join(format!("{i}.pgm")))?;
                if labels.dims() != self.samples[i].labels.dims() || labels.max_label() > 1 {
                    return Err(DatasetError::Mismatch(format!("organ {organ} view of sample {i} is not a binary map")));
                }
                Ok(PhantomSample { image: self.samples[i].image.clone(), labels })
            })
            .collect()
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// Write samples, every view and the manifest under `root`.
pub fn write_dataset(root: &Path, manifest: &Manifest, samples: &[PhantomSample]) -> Result<(), DatasetError> {
    if samples.len() != manifest.count {
        return Err(DatasetError::Mismatch(format!("{} samples for manifest count {}", samples.len(), manifest.count)));
    }
    let organs = manifest.phantom.organs;
    let images = root.join("images");
    let full = root.join("labels_full");
    let views: Vec<PathBuf> = (1..=organs).map(|k| root.join(format!("labels_organ{k}"))).collect();
    for d in [&images, &full].into_iter().chain(&views) {
        fs::create_dir_all(d).map_err(io(d))?;
    }
    for (i, s) in samples.iter().enumerate() {
        pgm::write_image(&s.image, &images.join(format!("{i}.pgm")))?;
        pgm::write_labels(&s.labels, organs as u16, &full.join(format!("{i}.pgm")))?;
        for (k, dir) in views.iter().enumerate() {
            let view = to_single_organ(s, (k + 1) as u16, organs)?;
            pgm::write_labels(&view.labels, 1, &dir.join(format!("{i}.pgm")))?;
        }
    }
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io(&path))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let m: Manifest = serde_path_to_error::deserialize(de)
        .map_err(|e| DatasetError::Manifest { path: path.display().to_string(), detail: e.to_string() })?;
    let bad = |detail: String| DatasetError::Manifest { path: path.display().to_string(), detail };
    if m.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported version {}", m.version)));
    }
    m.phantom.validate().map_err(|e| bad(e.to_string()))?;
    let mut seen = vec![false; m.count];
    for &i in m.split.train.iter().chain(&m.split.test) {
        if i >= m.count || std::mem::replace(&mut seen[i], true) {
            return Err(bad(format!("split index {i} is out of range or repeated")));
        }
    }
    Ok(m)
}

pub fn read_dataset(root: &Path) -> Result<Dataset, DatasetError> {
    let manifest = read_manifest(root)?;
    let n = manifest.phantom.size;
    let samples = (0..manifest.count)
        .map(|i| {
            let image = pgm::read_image(&root.join("images").join(format!("{i}.pgm")))?;
            let labels = pgm::read_labels(&root.join("labels_full").join(format!("{i}.pgm")))?;
            if image.shape() != [1, n, n] || labels.dims() != (n, n) {
                return Err(DatasetError::Mismatch(format!("sample {i} is not {n}x{n}")));
            }
            if labels.max_label() as usize > manifest.phantom.organs {
                return Err(DatasetError::Mismatch(format!("sample {i} has label {}", labels.max_label())));
            }
            Ok(PhantomSample { image, labels })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    Ok(Dataset { root: root.to_path_buf(), manifest, samples })
}
