//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{contract, io_err, MrnError, Result};
use crate::glyphgen::{default_benchmark, ScriptSpec};
use crate::recognizer::{BranchShape, TrainConfig};
use crate::rehearsal::Strategy;
use crate::router::{RouterConfig, VotingMode};

/// Environment variable overriding [`ExperimentConfig::seed`].
pub const SEED_ENV: &str = "MRN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: usize,
    pub batch: usize,
    pub max_lr: f64,
    /// Iterations of the jointly trained reference model.
    pub bound_iterations: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            iterations: 2000,
            batch: 32,
            max_lr: 5e-3,
            bound_iterations: 8000,
        }
    }
}

impl TrainingConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch: self.batch,
            max_lr: self.max_lr,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RehearsalConfig {
    pub capacity: usize,
    pub strategy: Strategy,
}

impl Default for RehearsalConfig {
    fn default() -> Self {
        RehearsalConfig {
            capacity: 200,
            strategy: Strategy::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Task order as script ids.
    pub order: Vec<u8>,
    pub voting: VotingMode,
    /// Categories aliased across every script.
    pub shared_categories: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub training: TrainingConfig,
    pub rehearsal: RehearsalConfig,
    pub router: RouterConfig,
    pub model: BranchShape,
    pub scripts: Vec<ScriptSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scripts = default_benchmark();
        ExperimentConfig {
            seed: 0,
            order: scripts.iter().map(|s| s.script_id).collect(),
            voting: VotingMode::Soft,
            shared_categories: 3,
            output_dir: None,
            training: TrainingConfig::default(),
            rehearsal: RehearsalConfig::default(),
            router: RouterConfig::default(),
            model: BranchShape::default(),
            scripts,
        }
    }
}

impl ExperimentConfig {
    /// The default benchmark shrunk to seconds of compute, for smoke runs.
    pub fn smoke() -> Self {
        let mut cfg = ExperimentConfig::default();
        for s in &mut cfg.scripts {
            s.n_train = 96;
            s.n_test = 24;
            s.max_len = 4;
        }
        cfg.training = TrainingConfig {
            iterations: 200,
            batch: 8,
            max_lr: 1e-2,
            bound_iterations: 300,
        };
        cfg.rehearsal.capacity = 12;
        cfg.router.iterations = 20;
        cfg.router.batch = 8;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.order.is_empty() {
            return Err(contract("schedule order is empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &id in &self.order {
            if !seen.insert(id) {
                return Err(contract(format!("script {id} appears twice in the order")));
            }
            if !self.scripts.iter().any(|s| s.script_id == id) {
                return Err(contract(format!("order references unknown script {id}")));
            }
        }
        for s in &self.scripts {
            s.validate()?;
        }
        if !(self.router.alpha >= 0.0) {
            return Err(contract("router alpha must be >= 0"));
        }
        if self.router.depth == 0 {
            return Err(contract("router depth must be >= 1"));
        }
        if self.rehearsal.capacity == 0 {
            return Err(contract("rehearsal capacity must be >= 1"));
        }
        if self.training.batch == 0 || self.router.batch == 0 {
            return Err(contract("batch sizes must be positive"));
        }
        if self.shared_categories > self.scripts.iter().map(|s| s.charset_size).min().unwrap_or(0) {
            return Err(contract("shared_categories exceeds the smallest charset"));
        }
        self.model.frame.validate()
    }

    /// Script specs in task order.
    pub fn ordered_scripts(&self) -> Vec<&ScriptSpec> {
        self.order
            .iter()
            .map(|id| self.scripts.iter().find(|s| s.script_id == *id).expect("validated order"))
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| contract(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg = Self::from_toml(&text).map_err(|e| MrnError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(io_err(path))
    }

    /// Applies [`SEED_ENV`] when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| contract(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_script_and_negative_alpha() {
        let mut cfg = ExperimentConfig::default();
        cfg.order.push(9);
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.router.alpha = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn misspelled_keys_are_errors() {
        let text = ExperimentConfig::default().to_toml().unwrap();
        for (from, to) in [("alpha =", "alpah ="), ("frames =", "frame ="), ("sigma =", "sigm ="), ("zipf_s =", "zipf ="), ("channels =", "chans =")] {
            assert!(ExperimentConfig::from_toml(&text.replacen(from, to, 1)).is_err(), "{to}");
        }
    }
}
