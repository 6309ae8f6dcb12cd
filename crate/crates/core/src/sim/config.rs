use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::data::TriggerSpec;
use crate::defenses::{AlignInsConfig, Defense};
use crate::error::{Error, Result};
use crate::model::TrainConfig;

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist(IdxPaths),
    Fmnist(IdxPaths),
    Synthetic(SyntheticConfig),
}

/// IDX file locations (plain or gzipped). Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first `n` training samples.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub feat_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 4,
            feat_dim: 784,
            train_size: 2000,
            test_size: 500,
        }
    }
}

/// Periodic gradient-variance and heterogeneity probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub every: usize,
    pub probes: usize,
    /// Defaults to the training batch size.
    pub batch_size: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            every: 10,
            probes: 4,
            batch_size: None,
        }
    }
}

/// A complete experiment description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub n_clients: usize,
    /// Clients sampled per round; `None` means every client participates.
    pub sample_count_per_round: Option<usize>,
    pub rounds: usize,
    /// Dirichlet concentration; `None` is an IID split.
    pub beta: Option<f64>,
    pub attack: AttackSpec,
    pub trigger: TriggerSpec,
    pub defense: Defense,
    pub server_lr: f64,
    /// Per-round multiplicative decay of the server rate; `None` keeps it constant.
    pub server_lr_decay: Option<f64>,
    pub train: TrainConfig,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub paired_run: bool,
    pub eval_every: usize,
    /// Gradient variance probing; enabled automatically for paired runs.
    pub heterogeneity: Option<ProbeConfig>,
    /// Smoothness constant used by the propagation-error bound.
    pub mu: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic(SyntheticConfig::default()),
            n_clients: 20,
            sample_count_per_round: None,
            rounds: 150,
            beta: None,
            attack: AttackSpec::default(),
            trigger: TriggerSpec::default(),
            defense: Defense::Alignins(AlignInsConfig::default()),
            server_lr: 1.0,
            server_lr_decay: None,
            train: TrainConfig::default(),
            hidden: vec![64],
            seed: 0,
            paired_run: false,
            eval_every: 1,
            heterogeneity: None,
            mu: 1.0,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths become relative to its directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Mnist(p) | DatasetConfig::Fmnist(p) = &mut self.dataset {
            for f in [&mut p.train_images, &mut p.train_labels, &mut p.test_images, &mut p.test_labels] {
                if f.is_relative() {
                    *f = base.join(&*f);
                }
            }
        }
    }

    /// Server learning rate used in round `t` (1-based).
    pub fn alpha(&self, t: usize) -> f64 {
        match self.server_lr_decay {
            Some(g) => self.server_lr * g.powi(t as i32 - 1),
            None => self.server_lr,
        }
    }

    pub fn participants_per_round(&self) -> usize {
        self.sample_count_per_round.unwrap_or(self.n_clients)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return config_err("n_clients must be positive");
        }
        if let Some(k) = self.sample_count_per_round {
            if k == 0 || k > self.n_clients {
                return config_err(format!("sample_count_per_round must lie in 1..={}", self.n_clients));
            }
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return config_err("beta must be positive and finite");
            }
        }
        if !(self.server_lr.is_finite() && self.server_lr >= 0.0) {
            return config_err("server_lr must be finite and nonnegative");
        }
        if let Some(g) = self.server_lr_decay {
            if !(g > 0.0 && g <= 1.0) {
                return config_err("server_lr_decay must lie in (0, 1]");
            }
        }
        if self.eval_every == 0 {
            return config_err("eval_every must be positive");
        }
        if self.hidden.contains(&0) {
            return config_err("hidden layer widths must be positive");
        }
        if let Some(p) = &self.heterogeneity {
            if p.every == 0 || p.probes < 2 || p.batch_size == Some(0) {
                return config_err("heterogeneity needs every >= 1, probes >= 2 and a positive batch size");
            }
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return config_err("mu must be finite and nonnegative");
        }
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            if s.num_classes < 2 || s.feat_dim == 0 || s.train_size == 0 || s.test_size == 0 {
                return config_err("synthetic dataset needs >= 2 classes and nonempty splits");
            }
        }
        let as_config = |e: Error| Error::Config(e.to_string());
        self.attack.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        if self.attack.kind.poisons_data() {
            self.trigger.validate().map_err(as_config)?;
        }
        if let Defense::Alignins(a) = &self.defense {
            a.validate().map_err(as_config)?;
        }
        Ok(())
    }
}
