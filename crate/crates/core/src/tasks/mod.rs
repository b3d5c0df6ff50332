//! Synthetic task families with closed-form losses and gradients.

mod mlp;
mod planted;
mod quadratic;

pub use mlp::{mlp_loss_grad, Dataset, MlpTask};
pub use planted::{planted_grad, PlantedLowRankTask};
pub use quadratic::{optimal_merge_oracle, quad_loss_grad, QuadraticTask};

use crate::error::Result;
use crate::rng;
use crate::tensor::Matrix;

const STREAM_GRAD_NOISE: u64 = 40;

/// Seeded i.i.d. Gaussian perturbation with entry std `scale`, one draw per `step`.
pub fn gradient_noise(seed: u64, step: u64, shape: (usize, usize), scale: f64) -> Result<Matrix> {
    let mut g = rng::stream(seed, STREAM_GRAD_NOISE, step);
    rng::gaussian_matrix(&mut g, shape.0, shape.1, scale)
}
