//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sha256_hex;
use crate::data::TaskConfig;
use crate::error::{Error, Result};
use crate::evalbench::{AblationMatrixConfig, L1Config};
use crate::importance::{DEFAULT_ALPHA, DEFAULT_BETA};
use crate::sandwich::PipelineConfig;
use crate::toymodel::{ModelConfig, TeacherTrainConfig};

pub const CONFIG_VERSION: u32 = 1;
/// Base directory for artifacts when neither a flag nor the config sets one.
pub const DATA_DIR_ENV: &str = "RPRUNE_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportanceConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Held-out samples used to score the blocks.
    pub samples: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            samples: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    /// Sample stream of the evaluation set.
    pub stream: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            stream: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Timed forward passes, excluding warmup.
    pub runs: usize,
    pub warmup: usize,
    /// Samples per forward pass.
    pub batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            warmup: 10,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub ratio: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { ratio: 0.10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
}

impl PathsConfig {
    /// Flag, then config, then environment, then `./data`.
    pub fn resolve(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.data_dir {
            return p.clone();
        }
        match std::env::var_os(DATA_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("data"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub teacher: TeacherTrainConfig,
    pub importance: ImportanceConfig,
    pub pipeline: PipelineConfig,
    pub prune: PruneConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub l1: L1Config,
    pub ablation: AblationMatrixConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            teacher: TeacherTrainConfig::default(),
            importance: ImportanceConfig::default(),
            pipeline: PipelineConfig::default(),
            prune: PruneConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            l1: L1Config::default(),
            ablation: AblationMatrixConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: CONFIG_VERSION,
            });
        }
        self.model.validate()?;
        self.task.validate()?;
        unit("prune.ratio", self.prune.ratio)?;
        for r in &self.ablation.ratios {
            unit("ablation.ratios", *r)?;
        }
        let imp = &self.importance;
        if !(imp.alpha >= 0.0 && imp.beta >= 0.0 && imp.alpha + imp.beta > 0.0) {
            return Err(Error::Config(
                "importance.alpha and beta must be non-negative, not both zero".into(),
            ));
        }
        if imp.samples < 2 || self.eval.samples < 2 {
            return Err(Error::Config(
                "importance and eval need at least 2 samples".into(),
            ));
        }
        let p = &self.pipeline;
        if ![1, 3, 5].contains(&p.width) {
            return Err(Error::Config(format!(
                "pipeline.width must be 1, 3 or 5, got {}",
                p.width
            )));
        }
        if p.fit_samples == 0 || p.train_samples == 0 {
            return Err(Error::Config(
                "pipeline sample counts must be positive".into(),
            ));
        }
        if p.lora.rank == 0 {
            return Err(Error::Config("pipeline.lora.rank must be positive".into()));
        }
        if !(p.train.holdout_fraction >= 0.0 && p.train.holdout_fraction < 1.0) {
            return Err(Error::Config(
                "pipeline.train.holdout_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.bench.runs == 0 || self.bench.batch == 0 {
            return Err(Error::Config(
                "bench.runs and bench.batch must be positive".into(),
            ));
        }
        if self.teacher.batch == 0 {
            return Err(Error::Config("teacher.batch must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with paths removed; paths do not
    /// change results.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("paths");
        }
        sha256_hex(&serde_json::to_vec(&v).expect("value serializes"))
    }
}
