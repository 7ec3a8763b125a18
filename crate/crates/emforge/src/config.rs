//! Run configuration: one JSON file with `model`, `train`, `data` and `eval`
//! sections. Unknown keys are hard errors so typos in ablation sweeps fail
//! loudly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub sub_batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub with_instructions: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    pub task_registry: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub manifest: PathBuf,
    pub report_path: PathBuf,
    #[serde(default = "default_true")]
    pub with_instructions: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&json)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 || self.train.sub_batch_size == 0 {
            return Err(Error::Config(
                "batch_size and sub_batch_size must be positive".into(),
            ));
        }
        if self.train.sub_batch_size > self.train.batch_size {
            return Err(Error::Config(format!(
                "sub_batch_size {} exceeds batch_size {}",
                self.train.sub_batch_size, self.train.batch_size
            )));
        }
        if !(self.train.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.train.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.train.lr >= 0.0) || !self.train.lr.is_finite() {
            return Err(Error::Config("lr must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Relative paths in `data`/`eval` are resolved against the config
    /// file's directory.
    pub fn resolve_paths(&mut self, config_dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = config_dir.join(&*p);
            }
        };
        fix(&mut self.data.train_manifest);
        fix(&mut self.data.task_registry);
        fix(&mut self.eval.manifest);
        fix(&mut self.eval.report_path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        r#"{
            "model": {"hidden_dim": 32, "layers": 2, "heads": 4, "max_seq": 64,
                       "patch_size": 4, "image_channels": 1, "lora_rank": 0, "lora_alpha": 16.0},
            "train": {"batch_size": 8, "sub_batch_size": 4, "steps": 10, "lr": 0.001,
                       "temperature": 0.02, "seed": 1, "with_instructions": true},
            "data": {"train_manifest": "train.jsonl", "task_registry": "tasks.json"},
            "eval": {"manifest": "eval.jsonl", "report_path": "report.json"}
        }"#
        .to_string()
    }

    #[test]
    fn parses_and_validates() {
        let cfg = RunConfig::from_json(&sample_json()).unwrap();
        assert_eq!(cfg.model.hidden_dim, 32);
        assert!(cfg.eval.with_instructions);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let json = sample_json().replace("\"seed\": 1", "\"seed\": 1, \"sed\": 2");
        let err = RunConfig::from_json(&json).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn invariants_enforced() {
        let json = sample_json().replace("\"sub_batch_size\": 4", "\"sub_batch_size\": 9");
        assert!(RunConfig::from_json(&json).is_err());
        let json = sample_json().replace("\"temperature\": 0.02", "\"temperature\": 0.0");
        assert!(RunConfig::from_json(&json).is_err());
        let json = sample_json().replace("\"steps\": 10", "\"steps\": 0");
        assert!(RunConfig::from_json(&json).is_err());
    }
}
