use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{Ablation, MergeSpec, Strategy};
use crate::optimizer::OptimizerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    Planted,
    Mlp,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Quadratic => "quadratic",
            TaskKind::Planted => "planted",
            TaskKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "quadratic" => Ok(TaskKind::Quadratic),
            "planted" => Ok(TaskKind::Planted),
            "mlp" => Ok(TaskKind::Mlp),
            other => Err(format!("unknown task `{other}` (expected quadratic, planted or mlp)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Weight shape for the quadratic and planted families.
    pub m: usize,
    pub n: usize,
    /// Task instance seed.
    pub seed: u64,
    /// Seed of the shared initial weights.
    pub init_seed: u64,
    /// Entry std of the initial weights.
    pub init_scale: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub planted_rank: usize,
    pub noise_scale: f64,
    /// Std of i.i.d. Gaussian noise added to every gradient.
    pub grad_noise: f64,
    /// `[features, classes]`; the MLP trains a single weight matrix.
    pub layer_dims: Vec<usize>,
    pub n_samples: usize,
    pub dataset_csv: Option<PathBuf>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Quadratic,
            m: 16,
            n: 16,
            seed: 0,
            init_seed: 0,
            init_scale: 0.1,
            h_min: 0.5,
            h_max: 2.0,
            planted_rank: 4,
            noise_scale: 0.0,
            grad_noise: 0.0,
            layer_dims: vec![8, 3],
            n_samples: 64,
            dataset_csv: None,
        }
    }
}

impl TaskConfig {
    pub fn shape(&self) -> (usize, usize) {
        match self.kind {
            TaskKind::Mlp => (
                self.layer_dims.first().copied().unwrap_or(0),
                self.layer_dims.last().copied().unwrap_or(0),
            ),
            _ => (self.m, self.n),
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        match self.kind {
            TaskKind::Mlp => {
                if self.layer_dims.len() != 2 {
                    return Err(Error::config(key("layer_dims"), "must list exactly [features, classes]"));
                }
                if self.layer_dims.contains(&0) {
                    return Err(Error::config(key("layer_dims"), "entries must be positive"));
                }
                if self.n_samples == 0 && self.dataset_csv.is_none() {
                    return Err(Error::config(key("n_samples"), "must be positive"));
                }
            }
            _ => {
                if self.m == 0 {
                    return Err(Error::config(key("m"), "must be positive"));
                }
                if self.n == 0 {
                    return Err(Error::config(key("n"), "must be positive"));
                }
            }
        }
        if !(self.h_min > 0.0 && self.h_max > self.h_min && self.h_max.is_finite()) {
            return Err(Error::config(key("h_max"), "need 0 < h_min < h_max"));
        }
        if self.kind == TaskKind::Planted && (self.planted_rank == 0 || self.planted_rank > self.m.min(self.n)) {
            return Err(Error::config(key("planted_rank"), "must be in [1, min(m, n)]"));
        }
        for (name, v) in [
            ("init_scale", self.init_scale),
            ("noise_scale", self.noise_scale),
            ("grad_noise", self.grad_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key(name), "must be non-negative and finite"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub spectral_interval: u64,
    pub spectral_ranks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            spectral_interval: crate::analysis::DEFAULT_LOG_INTERVAL,
            spectral_ranks: vec![1, 2, 4],
        }
    }
}

/// A [`MergeSpec`] plus an optional sparsity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub strategy: Strategy,
    pub sparsity_k: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub priors: Option<Vec<f64>>,
    pub ablation: Ablation,
    /// One merge per listed `k`, replacing `sparsity_k`.
    pub sparsity_sweep: Option<Vec<f64>>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        let s = MergeSpec::default();
        Self {
            strategy: s.strategy,
            sparsity_k: s.sparsity_k,
            lambda1: s.lambda1,
            lambda2: s.lambda2,
            priors: s.priors,
            ablation: s.ablation,
            sparsity_sweep: None,
        }
    }
}

impl MergeConfig {
    pub fn base_spec(&self) -> MergeSpec {
        MergeSpec {
            strategy: self.strategy,
            sparsity_k: self.sparsity_k,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            priors: self.priors.clone(),
            ablation: self.ablation,
        }
    }

    pub fn specs(&self) -> Vec<MergeSpec> {
        match &self.sparsity_sweep {
            Some(ks) => ks.iter().map(|&k| self.base_spec().with_k(k)).collect(),
            None => vec![self.base_spec()],
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if let Some(ks) = &self.sparsity_sweep {
            if ks.is_empty() {
                return Err(Error::config(format!("{prefix}.sparsity_sweep"), "must not be empty"));
            }
            for (i, spec) in self.specs().iter().enumerate() {
                spec.validate(prefix).map_err(|e| match e {
                    Error::Config { message, .. } => {
                        Error::config(format!("{prefix}.sparsity_sweep[{i}]"), message)
                    }
                    other => other,
                })?;
            }
            Ok(())
        } else {
            self.base_spec().validate(prefix)
        }
    }
}

/// Top-level experiment config; every section and key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub optimizer: OptimizerConfig,
    pub merge: MergeConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate("optimizer")?;
        self.merge.validate("merge")?;
        self.task.validate("task")?;
        let (m, n) = self.task.shape();
        if self.optimizer.rank > m.min(n) {
            return Err(Error::config(
                "optimizer.rank",
                format!("{} exceeds min({m}, {n})", self.optimizer.rank),
            ));
        }
        if self.train.spectral_interval == 0 {
            return Err(Error::config("train.spectral_interval", "must be positive"));
        }
        if let Some(&r) = self.train.spectral_ranks.iter().find(|&&r| r == 0) {
            return Err(Error::config("train.spectral_ranks", format!("rank {r} must be positive")));
        }
        Ok(())
    }
}

/// Parse and validate a config document; blank input yields the defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = if text.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        de.end().map_err(|e| Error::config(".", e.to_string()))?;
        cfg
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
