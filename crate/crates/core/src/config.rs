//! Run configuration: JSON with a schema version and dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::DatasetSpec;
use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::models::GeneratorConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Whether unseen embeddings may be used during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Inductive,
    Transductive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub stage2_lr_mult: f64,
    pub stage3_lr_mult: f64,
    /// Pseudo unseen queries per union-finetuning step.
    pub pseudo_per_step: usize,
    /// Generated samples per seen category for the fidelity probe.
    pub fidelity_samples: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 20,
            stage3_epochs: 10,
            batch_size: 8,
            base_lr: 1e-3,
            stage2_lr_mult: 10.0,
            stage3_lr_mult: 0.1,
            pseudo_per_step: 16,
            fidelity_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub mode: Mode,
    pub dataset: DatasetSpec,
    pub stages: StageConfig,
    pub losses: LossWeights,
    pub generator: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            mode: Mode::Transductive,
            dataset: DatasetSpec::default(),
            stages: StageConfig::default(),
            losses: LossWeights::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.losses.validate()?;
        let s = &self.stages;
        if s.batch_size == 0 {
            return Err(Error::Config("stages.batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("base_lr", s.base_lr),
            ("stage2_lr_mult", s.stage2_lr_mult),
            ("stage3_lr_mult", s.stage3_lr_mult),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("stages.{name} must be > 0, got {v}")));
            }
        }
        if self.generator.blocks == 0 {
            return Err(Error::Config("generator.blocks must be >= 1".into()));
        }
        Ok(())
    }

    /// Sets the run seed and the dataset seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `path=value` overrides. Values parse as JSON, falling back to
    /// a plain string.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form path=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut cur = &mut root;
            let keys: Vec<&str> = path.split('.').collect();
            for (i, key) in keys.iter().enumerate() {
                let obj = cur
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("{}: not an object", keys[..i].join("."))))?;
                let slot = obj
                    .get_mut(*key)
                    .ok_or_else(|| Error::Config(format!("{}: unknown field", keys[..=i].join("."))))?;
                if i + 1 == keys.len() {
                    *slot = value.clone();
                    break;
                }
                cur = slot;
            }
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .apply_overrides(&["losses.lambda_r=0", "mode=inductive", "stages.batch_size=4"])
            .unwrap();
        assert_eq!(c.losses.lambda_r, 0.0);
        assert_eq!(c.mode, Mode::Inductive);
        assert_eq!(c.stages.batch_size, 4);
    }

    #[test]
    fn bad_overrides_name_the_field() {
        let e = RunConfig::default().apply_overrides(&["losses.nope=1"]).unwrap_err();
        assert!(e.to_string().contains("losses.nope"), "{e}");
        let e = RunConfig::default().apply_overrides(&["losses.tau=-1"]).unwrap_err();
        assert!(e.to_string().contains("losses.tau"), "{e}");
        assert!(RunConfig::default().apply_overrides(&["mode"]).is_err());
    }

    #[test]
    fn wrong_schema_rejected() {
        let mut c = RunConfig::default();
        c.schema_version = 99;
        assert!(RunConfig::from_json(&c.to_json().unwrap()).is_err());
    }
}
