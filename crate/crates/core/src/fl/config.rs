//! Experiment configuration: TOML sections plus dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ScenarioKind, SyntheticConfig};
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, OptimizerConfig};
use crate::strategy::{StrategyHyperparams, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub train: TrainSection,
    pub model: ModelSpec,
    pub data: SyntheticConfig,
    pub strategy: StrategyHyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub strategy: StrategyKind,
    pub scenario: ScenarioKind,
    pub rounds: u64,
    /// Seeds model initialization, hypernetworks and client shuffling. The
    /// data has its own seed under `data.seed`.
    pub seed: u64,
    /// Worker threads for client training; capped by `FBSIM_THREADS`.
    pub threads: usize,
    /// Write wall times into the record stream. When off, records carry
    /// zeros and the timings go to `timing.jsonl`, keeping records
    /// byte-reproducible.
    pub record_timing: bool,
    /// Micro-F1 targets (percent) for rounds-to-threshold.
    pub thresholds: Vec<f64>,
    /// Load clients from an FBSIM1 file instead of generating them.
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            strategy: StrategyKind::FedAvg,
            scenario: ScenarioKind::Ds1Iid,
            rounds: 40,
            seed: 0,
            threads: 1,
            record_timing: true,
            thresholds: vec![50.0, 60.0, 70.0],
            dataset: None,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 3, batch_size: 64, eta: 1e-3, optimizer: OptimizerConfig::default() }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `section.key = value`. The value is read as a TOML literal,
    /// falling back to a bare string. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("malformed key {key:?}")));
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let (leaf, parents) = parts.split_last().expect("non-empty");
        let mut node = &mut tree;
        for p in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(*p))
                .filter(|v| v.is_table())
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let parsed = match (table.get(*leaf), parsed) {
            // a string-typed field given something that parsed as another type
            (Some(toml::Value::String(_)), v) if !v.is_str() => toml::Value::String(value.to_string()),
            // integers are accepted where floats are expected
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(leaf.to_string(), parsed);
        *self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.rounds == 0 {
            return Err(Error::Config("run.rounds must be >= 1".into()));
        }
        if let Some(t) = r.thresholds.iter().find(|t| !(**t > 0.0 && **t < 100.0)) {
            return Err(Error::Config(format!("threshold {t} is outside (0, 100)")));
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(t.eta > 0.0 && t.eta.is_finite()) {
            return Err(Error::Config("train.eta must be a positive number".into()));
        }
        self.model.validate()?;
        self.strategy.validate()?;
        if r.dataset.is_none() {
            self.data.validate()?;
            if self.data.input_dim != self.model.input_dim || self.data.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "model is {}->{} but data.input_dim/num_classes are {}/{}",
                    self.model.input_dim, self.model.num_classes, self.data.input_dim, self.data.num_classes
                )));
            }
        }
        Ok(())
    }
}
