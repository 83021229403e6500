//! Experiment configuration documents (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::phantom::PhantomConfig;
use crate::segnet::SegModelConfig;
use crate::trainer::{TeacherConfig, TrainConfig};

use super::CliError;

/// Which organs the teacher knows and which one is added.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// K: the teacher segments organs `1..=K`.
    pub old_organs: usize,
    /// Phantom organ id annotated in the incremental dataset; becomes student class `K+1`.
    pub new_organ: u16,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario { old_organs: 2, new_organ: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { count: 100 }
    }
}

/// Network shape shared by teacher and student; the class count follows the scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: Vec<usize>,
    pub kernel: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = SegModelConfig::new(2);
        ModelShape { hidden: c.hidden, kernel: c.kernel }
    }
}

/// Sub-config `seed` fields are overwritten with the experiment seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub scenario: Scenario,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub distill: TrainConfig,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            out: None,
            phantom: PhantomConfig::default(),
            dataset: DatasetConfig::default(),
            scenario: Scenario::default(),
            model: ModelShape::default(),
            teacher: TeacherConfig::default(),
            distill: TrainConfig::default(),
        }
    }

    /// Parse a document. A missing `seed` is accepted only when `seed_override` is given.
    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, CliError> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config is not valid JSON: {e}")))?;
        if let (Some(s), Some(obj)) = (seed_override, value.as_object_mut()) {
            obj.insert("seed".into(), s.into());
        }
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            if path == "." {
                CliError::Validation(format!("config: {inner}"))
            } else {
                CliError::Validation(format!("config field `{path}`: {inner}"))
            }
        })?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, seed_override)
    }

    /// Config from flags alone; `--seed` is then mandatory.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        match (path, seed) {
            (Some(p), s) => Self::load(p, s),
            (None, Some(s)) => {
                let mut c = Self::with_seed(s);
                c.propagate_seed();
                c.validate()?;
                Ok(c)
            }
            (None, None) => Err(CliError::Validation(
                "missing field `seed`: pass --seed or give a config with a seed".into(),
            )),
        }
    }

    fn propagate_seed(&mut self) {
        self.teacher.seed = self.seed;
        self.distill.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |field: &str, e: &dyn std::fmt::Display| CliError::Validation(format!("config field `{field}`: {e}"));
        self.phantom.validate().map_err(|e| v("phantom", &e))?;
        if self.dataset.count == 0 {
            return Err(v("dataset.count", &"must be at least 1"));
        }
        let k = self.scenario.old_organs;
        if k == 0 || k >= self.phantom.organs {
            return Err(v("scenario.old_organs", &format!("K = {k} must lie in 1..{}", self.phantom.organs)));
        }
        let n = self.scenario.new_organ as usize;
        if n <= k || n > self.phantom.organs {
            return Err(v("scenario.new_organ", &format!("organ {n} must lie in {}..={}", k + 1, self.phantom.organs)));
        }
        self.teacher_model().validate().map_err(|e| v("model", &e))?;
        self.teacher.validate().map_err(|e| v("teacher", &e))?;
        self.distill.validate().map_err(|e| v("distill", &e))?;
        Ok(())
    }

    pub fn teacher_model(&self) -> SegModelConfig {
        SegModelConfig {
            in_channels: 1,
            hidden: self.model.hidden.clone(),
            kernel: self.model.kernel,
            classes: self.scenario.old_organs + 1,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_required() {
        let err = ExperimentConfig::parse("{}", None).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert_eq!(ExperimentConfig::parse("{}", Some(4)).unwrap().seed, 4);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::parse(r#"{"seed": 1, "distill": {"lr": "fast"}}"#, None).unwrap_err();
        assert!(err.to_string().contains("distill.lr"), "{err}");
        let err = ExperimentConfig::parse(r#"{"seed": 1, "scenario": {"new_organ": 1}}"#, None).unwrap_err();
        assert!(err.to_string().contains("scenario.new_organ"), "{err}");
    }

    #[test]
    fn seed_reaches_sub_configs_and_hash() {
        let a = ExperimentConfig::parse(r#"{"seed": 9}"#, None).unwrap();
        assert_eq!((a.teacher.seed, a.distill.seed), (9, 9));
        let b = ExperimentConfig::parse(r#"{"seed": 9, "out": "elsewhere"}"#, None).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), ExperimentConfig::parse(r#"{"seed": 10}"#, None).unwrap().hash());
    }
}
