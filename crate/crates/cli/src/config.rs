//! Run configuration: a TOML file with one table per module, overridden by
//! command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toksel::evaluation::{Selector, DEFAULT_BUDGETS};
use toksel::gradcheck::SuiteConfig;
use toksel::pipeline::PretrainConfig;
use toksel::synth::TaskSpec;
use toksel::training::TrainConfig;
use toksel::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: 8192,
            val: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Budget for `eval`, `bench` and `dump-scores`.
    pub budget: f64,
    /// Budgets for `sweep`.
    pub budgets: Vec<f64>,
    pub selectors: Vec<Selector>,
    /// Record per-cell wall-clock time in reports. Off by default so
    /// reports stay byte-reproducible.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budget: 0.2,
            budgets: DEFAULT_BUDGETS.to_vec(),
            selectors: Selector::ALL.to_vec(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub seq_len: usize,
    pub sequences: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seq_len: 2048,
            sequences: 32,
            repeats: 10,
        }
    }
}

/// Everything a command reads. The top-level `seed` is copied into every
/// section's seed before validation, so one number fixes all randomness.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub task: TaskSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub gradcheck: SuiteConfig,
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<f64>,
}

fn check_budget(b: f64) -> Result<()> {
    if b > 0.0 && b < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("budget {b} outside (0, 1)")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` if given, applies flag overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        base.merged(overrides)
    }

    pub fn merged(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(b) = overrides.budget {
            self.train.budget = b;
            self.eval.budget = b;
        }
        self.task.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
        self.gradcheck.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train == 0 || self.data.val == 0 {
            return Err(Error::Config(
                "data.train and data.val must be positive".into(),
            ));
        }
        self.task.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        check_budget(self.eval.budget)?;
        if self.eval.budgets.is_empty() || self.eval.selectors.is_empty() {
            return Err(Error::Config(
                "eval.budgets and eval.selectors must be non-empty".into(),
            ));
        }
        self.eval
            .budgets
            .iter()
            .try_for_each(|&b| check_budget(b))?;
        if self.bench.seq_len < 2 || self.bench.sequences == 0 {
            return Err(Error::Config(
                "bench.seq_len >= 2 and bench.sequences >= 1 required".into(),
            ));
        }
        if self.bench.repeats < 10 {
            return Err(Error::Config(format!(
                "bench.repeats must be at least 10, got {}",
                self.bench.repeats
            )));
        }
        if self.gradcheck.n_min < 2 || self.gradcheck.n_min > self.gradcheck.n_max {
            return Err(Error::Config("gradcheck needs 2 <= n_min <= n_max".into()));
        }
        Ok(())
    }

    /// The merged configuration as echoed into artifacts.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
