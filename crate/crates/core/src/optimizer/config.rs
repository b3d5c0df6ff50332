use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { eta0: f64 },
    /// `eta0 / sqrt(t)` with `t` counted from 1.
    InverseSqrt { eta0: f64 },
}

impl LrSchedule {
    pub fn rate(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { eta0 } => eta0,
            LrSchedule::InverseSqrt { eta0 } => eta0 / (step.max(1) as f64).sqrt(),
        }
    }

    pub fn eta0(&self) -> f64 {
        match *self {
            LrSchedule::Constant { eta0 } | LrSchedule::InverseSqrt { eta0 } => eta0,
        }
    }

    pub fn with_eta0(self, eta0: f64) -> Self {
        match self {
            LrSchedule::Constant { .. } => LrSchedule::Constant { eta0 },
            LrSchedule::InverseSqrt { .. } => LrSchedule::InverseSqrt { eta0 },
        }
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant { eta0: 0.01 }
    }
}

/// Hyperparameters of the factorized-momentum optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub rank: usize,
    pub rank_min: usize,
    /// Clamped to `min(m, n)` when a state is initialised.
    pub rank_max: usize,
    pub rank_delta: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Decay applied to the compression error before it is re-injected.
    pub gamma: f64,
    pub epsilon: f64,
    /// Saliency decay.
    pub alpha: f64,
    pub clip_threshold: f64,
    pub adapt_interval: u64,
    pub svd_interval: u64,
    pub tau_upper: f64,
    pub tau_lower: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            rank_min: 1,
            rank_max: 64,
            rank_delta: 4,
            beta1: 0.9,
            beta2: 0.999,
            gamma: 0.5,
            epsilon: 1e-8,
            alpha: 0.99,
            clip_threshold: 1.0,
            adapt_interval: 100,
            svd_interval: 1,
            tau_upper: 1.5,
            tau_lower: 0.5,
            lr_schedule: LrSchedule::default(),
        }
    }
}

impl OptimizerConfig {
    /// Fixed-rank variant: adaptation can never move away from `rank`.
    pub fn fixed_rank(mut self, rank: usize) -> Self {
        self.rank = rank;
        self.rank_min = rank;
        self.rank_max = rank;
        self
    }

    /// Range checks; `prefix` is the key path used in error messages.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}.{k}")
            }
        };
        let unit_open = |name: &str, v: f64| -> Result<()> {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(key(name), format!("{v} not in [0, 1)")))
            }
        };
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key(name), format!("{v} must be positive and finite")))
            }
        };
        for (name, v) in [
            ("rank", self.rank),
            ("rank_min", self.rank_min),
            ("rank_max", self.rank_max),
            ("rank_delta", self.rank_delta),
        ] {
            if v == 0 {
                return Err(Error::config(key(name), "must be a positive integer"));
            }
        }
        if self.rank_min > self.rank {
            return Err(Error::config(key("rank_min"), "exceeds rank"));
        }
        if self.rank > self.rank_max {
            return Err(Error::config(key("rank_max"), "smaller than rank"));
        }
        unit_open("beta1", self.beta1)?;
        unit_open("beta2", self.beta2)?;
        unit_open("gamma", self.gamma)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(key("alpha"), format!("{} not in [0, 1]", self.alpha)));
        }
        positive("epsilon", self.epsilon)?;
        positive("clip_threshold", self.clip_threshold)?;
        if self.adapt_interval == 0 {
            return Err(Error::config(key("adapt_interval"), "must be a positive integer"));
        }
        if self.svd_interval == 0 {
            return Err(Error::config(key("svd_interval"), "must be a positive integer"));
        }
        if !(self.tau_upper > 1.0 && self.tau_upper.is_finite()) {
            return Err(Error::config(key("tau_upper"), "must be > 1"));
        }
        if !(self.tau_lower > 0.0 && self.tau_lower < 1.0) {
            return Err(Error::config(key("tau_lower"), "must be in (0, 1)"));
        }
        let eta0 = self.lr_schedule.eta0();
        if !(eta0 >= 0.0 && eta0.is_finite()) {
            return Err(Error::config(key("lr_schedule.eta0"), "must be non-negative and finite"));
        }
        Ok(())
    }
}
