//! Config-driven training runs shared by the CLI and the test suites.

use crate::analysis::SpectralLog;
use crate::checkpoint::{ExperimentConfig, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::optimizer::{init_state, train_step, OptimizerState};
use crate::rng;
use crate::tasks::{
    gradient_noise, mlp_loss_grad, planted_grad, quad_loss_grad, Dataset, MlpTask, PlantedLowRankTask,
    QuadraticTask,
};
use crate::tensor::Matrix;

const STREAM_INIT_WEIGHTS: u64 = 50;

/// A concrete task built from a [`TaskConfig`].
#[derive(Clone, Debug)]
pub enum TaskInstance {
    Quadratic(QuadraticTask),
    Planted(PlantedLowRankTask),
    Mlp(MlpTask),
}

impl TaskInstance {
    pub fn from_config(cfg: &TaskConfig) -> Result<Self> {
        Ok(match cfg.kind {
            TaskKind::Quadratic => {
                TaskInstance::Quadratic(QuadraticTask::random(cfg.m, cfg.n, (cfg.h_min, cfg.h_max), cfg.seed)?)
            }
            TaskKind::Planted => TaskInstance::Planted(PlantedLowRankTask::random(
                cfg.m,
                cfg.n,
                cfg.planted_rank,
                cfg.noise_scale,
                cfg.seed,
            )?),
            TaskKind::Mlp => {
                let data = match &cfg.dataset_csv {
                    Some(p) => Dataset::from_csv(p)?,
                    None => {
                        let (d, classes) = cfg.shape();
                        Dataset::gaussian_clusters(cfg.n_samples, d, classes, 0.7, cfg.seed)?
                    }
                };
                TaskInstance::Mlp(MlpTask::new(cfg.layer_dims.clone(), data, cfg.seed)?)
            }
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TaskInstance::Quadratic(t) => t.shape(),
            TaskInstance::Planted(t) => t.shape(),
            TaskInstance::Mlp(t) => (t.layer_dims()[0], t.layer_dims()[1]),
        }
    }

    /// Noise-free loss.
    pub fn loss(&self, w: &Matrix) -> Result<f64> {
        match self {
            TaskInstance::Quadratic(t) => t.loss(w),
            TaskInstance::Planted(t) => t.loss(w),
            TaskInstance::Mlp(t) => t.loss(std::slice::from_ref(w)),
        }
    }

    /// Loss at `w` and the (possibly noisy) gradient emitted at `step`.
    pub fn loss_grad(&self, w: &Matrix, step: u64) -> Result<(f64, Matrix)> {
        match self {
            TaskInstance::Quadratic(t) => quad_loss_grad(t, w),
            TaskInstance::Planted(t) => Ok((t.loss(w)?, planted_grad(t, w, step)?)),
            TaskInstance::Mlp(t) => {
                let (loss, mut grads) = mlp_loss_grad(t, std::slice::from_ref(w))?;
                Ok((loss, grads.remove(0)))
            }
        }
    }
}

/// Shared initial weights: Gaussian with std `init_scale` from `init_seed`.
pub fn initial_weights(cfg: &TaskConfig) -> Result<Matrix> {
    let (m, n) = cfg.shape();
    if m == 0 || n == 0 {
        return Err(Error::Parameter("task shape has a zero dimension".into()));
    }
    let mut g = rng::stream(cfg.init_seed, STREAM_INIT_WEIGHTS, 0);
    rng::gaussian_matrix(&mut g, m, n, cfg.init_scale)
}

pub struct TrainOutcome {
    pub state: OptimizerState,
    /// Loss before each step, plus the final loss.
    pub losses: Vec<f64>,
}

/// Train from `w0` for `cfg.train.steps` steps, logging spectra when asked.
pub fn run_training(
    task: &TaskInstance,
    w0: &Matrix,
    cfg: &ExperimentConfig,
    seed: u64,
    mut log: Option<&mut SpectralLog>,
) -> Result<TrainOutcome> {
    let mut state = init_state(w0, &cfg.optimizer, seed)?;
    let noise_seed = cfg.task.seed;
    let mut losses = Vec::with_capacity(cfg.train.steps as usize + 1);
    for t in 1..=cfg.train.steps {
        let (loss, mut g) = task.loss_grad(state.weights(), t)?;
        if cfg.task.grad_noise > 0.0 {
            g = g.add(&gradient_noise(noise_seed, t, g.shape(), cfg.task.grad_noise)?)?;
        }
        losses.push(loss);
        train_step(&mut state, &g, &cfg.optimizer)?;
        if let Some(log) = log.as_deref_mut() {
            if t % cfg.train.spectral_interval == 0 {
                log.record(&state, &g)?;
            }
        }
    }
    losses.push(task.loss(state.weights())?);
    Ok(TrainOutcome { state, losses })
}
