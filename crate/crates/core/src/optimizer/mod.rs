//! Factorized-momentum optimizer with error feedback.
//!
//! One [`OptimizerState`] tracks one weight matrix. Each [`train_step`]
//! clips the gradient, mixes it into the low-rank momentum together with
//! the decayed compression residual, re-truncates, refreshes the row and
//! column second moments, applies the elementwise preconditioned update and
//! folds the new deviation from the initial weights into the saliency map.

mod config;

pub use config::{LrSchedule, OptimizerConfig};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{effective_rank_of, stable_rank, truncated_svd, Matrix, SvdFactors};

const STREAM_INIT: u64 = 1;
const STREAM_GROW: u64 = 2;

/// Low-rank momentum plus the dense compression residual `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedMomentum {
    pub factors: SvdFactors,
    pub error: Matrix,
}

/// Row and column second-moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvatureStats {
    pub row_moments: Vec<f64>,
    pub col_moments: Vec<f64>,
}

impl CurvatureStats {
    pub fn filled(m: usize, n: usize, value: f64) -> Self {
        Self {
            row_moments: vec![value; m],
            col_moments: vec![value; n],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.row_moments.len(), self.col_moments.len())
    }

    /// `sqrt(R_i C_j)` as an `m × n` matrix.
    pub fn geometric_mean(&self) -> Result<Matrix> {
        let (m, n) = self.shape();
        Matrix::from_fn(m, n, |i, j| (self.row_moments[i] * self.col_moments[j]).sqrt())
    }
}

/// Complete optimizer state for one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    weights: Matrix,
    init_weights: Matrix,
    momentum: FactorizedMomentum,
    /// Untruncated momentum carried between SVD steps when `svd_interval > 1`.
    dense_momentum: Option<Matrix>,
    curvature: CurvatureStats,
    saliency: Matrix,
    step: u64,
    current_rank: usize,
    seed: u64,
}

/// Per-step diagnostics returned by [`train_step`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepInfo {
    pub step: u64,
    pub eta: f64,
    pub epsilon_t: f64,
    pub rank: usize,
    pub truncated: bool,
    pub error_norm: f64,
    pub rank_change: Option<(usize, usize)>,
}

impl OptimizerState {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn init_weights(&self) -> &Matrix {
        &self.init_weights
    }

    pub fn momentum(&self) -> &FactorizedMomentum {
        &self.momentum
    }

    pub fn dense_momentum(&self) -> Option<&Matrix> {
        self.dense_momentum.as_ref()
    }

    pub fn curvature(&self) -> &CurvatureStats {
        &self.curvature
    }

    pub fn saliency(&self) -> &Matrix {
        &self.saliency
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn current_rank(&self) -> usize {
        self.current_rank
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    /// Current momentum as a dense matrix (the carried dense buffer when
    /// present, otherwise the factor reconstruction).
    pub fn momentum_matrix(&self) -> Matrix {
        match &self.dense_momentum {
            Some(d) => d.clone(),
            None => self.momentum.factors.reconstruct(),
        }
    }

    /// Reassemble a state from stored parts, checking every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        weights: Matrix,
        init_weights: Matrix,
        momentum: FactorizedMomentum,
        dense_momentum: Option<Matrix>,
        curvature: CurvatureStats,
        saliency: Matrix,
        step: u64,
        seed: u64,
    ) -> Result<Self> {
        let shape = weights.shape();
        init_weights.ensure_shape(shape)?;
        momentum.error.ensure_shape(shape)?;
        saliency.ensure_shape(shape)?;
        if let Some(d) = &dense_momentum {
            d.ensure_shape(shape)?;
        }
        if momentum.factors.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                actual: momentum.factors.shape(),
            });
        }
        if curvature.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                actual: curvature.shape(),
            });
        }
        let r = momentum.factors.rank();
        if momentum.factors.u.cols() != r || momentum.factors.v.cols() != r {
            return Err(Error::Input("momentum factor ranks disagree".into()));
        }
        if saliency.as_slice().iter().any(|&s| s < 0.0) {
            return Err(Error::Input("saliency must be non-negative".into()));
        }
        if curvature
            .row_moments
            .iter()
            .chain(&curvature.col_moments)
            .any(|&x| x.is_nan() || x < 0.0)
        {
            return Err(Error::Input("second moments must be non-negative".into()));
        }
        Ok(Self {
            weights,
            init_weights,
            momentum,
            dense_momentum,
            curvature,
            saliency,
            step,
            current_rank: r,
            seed,
        })
    }
}

/// Largest usable rank for a config on an `m × n` matrix.
pub fn effective_rank_max(cfg: &OptimizerConfig, shape: (usize, usize)) -> usize {
    cfg.rank_max.min(shape.0.min(shape.1))
}

pub fn init_state(w0: &Matrix, cfg: &OptimizerConfig, seed: u64) -> Result<OptimizerState> {
    cfg.validate("optimizer")?;
    w0.ensure_finite("initial weights")?;
    let (m, n) = w0.shape();
    let r = cfg.rank;
    if r > m.min(n) {
        return Err(Error::Parameter(format!(
            "rank {r} exceeds min({m}, {n})"
        )));
    }
    let mut g = rng::stream(seed, STREAM_INIT, 0);
    let u = rng::gaussian_matrix(&mut g, m, r, 1.0 / ((m * r) as f64).sqrt())?;
    let v = rng::gaussian_matrix(&mut g, n, r, 1.0 / ((n * r) as f64).sqrt())?;
    let factors = SvdFactors {
        u: rng::orthonormalize_columns(&u)?,
        sigma: vec![cfg.epsilon; r],
        v: rng::orthonormalize_columns(&v)?,
    };
    Ok(OptimizerState {
        weights: w0.clone(),
        init_weights: w0.clone(),
        momentum: FactorizedMomentum {
            factors,
            error: Matrix::zeros(m, n)?,
        },
        dense_momentum: None,
        curvature: CurvatureStats::filled(m, n, cfg.epsilon),
        saliency: Matrix::zeros(m, n)?,
        step: 0,
        current_rank: r,
        seed,
    })
}

/// `G · min(1, tau / ‖G‖_F)`.
pub fn clip_gradient(g: &Matrix, tau_clip: f64) -> Matrix {
    let norm = g.frobenius_norm();
    if norm <= tau_clip || norm == 0.0 {
        g.clone()
    } else {
        g.scale(tau_clip / norm)
    }
}

/// `β₁·M_prev + (1 − β₁)·G + γ·E`, where `M_prev` is the stored momentum.
pub fn mix_momentum(state: &OptimizerState, g: &Matrix, cfg: &OptimizerConfig) -> Result<Matrix> {
    g.ensure_shape(state.shape())?;
    let mut mixed = state.momentum_matrix().scale(cfg.beta1);
    mixed.axpy(1.0 - cfg.beta1, g)?;
    mixed.axpy(cfg.gamma, &state.momentum.error)?;
    Ok(mixed)
}

/// Mix the gradient into the momentum and re-truncate at the current rank.
///
/// Returns the new factors and the residual `E' = M̃ − U Σ Vᵀ`.
pub fn momentum_step(
    state: &OptimizerState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<(SvdFactors, Matrix)> {
    let mixed = mix_momentum(state, g, cfg)?;
    compress(&mixed, state.current_rank)
}

fn compress(mixed: &Matrix, rank: usize) -> Result<(SvdFactors, Matrix)> {
    let factors = truncated_svd(mixed, rank)?;
    let error = mixed.sub(&factors.reconstruct())?;
    Ok((factors, error))
}

/// EMA of the row and column squared sums of `G`.
pub fn update_curvature(stats: &CurvatureStats, g: &Matrix, beta2: f64) -> Result<CurvatureStats> {
    if stats.shape() != g.shape() {
        return Err(Error::Shape {
            expected: stats.shape(),
            actual: g.shape(),
        });
    }
    let ema = |old: &[f64], fresh: Vec<f64>| -> Vec<f64> {
        old.iter()
            .zip(fresh)
            .map(|(&o, f)| beta2 * o + (1.0 - beta2) * f)
            .collect()
    };
    Ok(CurvatureStats {
        row_moments: ema(&stats.row_moments, g.row_sq_sums()),
        col_moments: ema(&stats.col_moments, g.col_sq_sums()),
    })
}

/// `R Cᵀ / Σ_i R_i`, the factorized second-moment estimate.
pub fn factorized_second_moment(stats: &CurvatureStats) -> Result<Matrix> {
    let total: f64 = stats.row_moments.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Invariant("row second moments sum to zero".into()));
    }
    let (m, n) = stats.shape();
    Matrix::from_fn(m, n, |i, j| stats.row_moments[i] * stats.col_moments[j] / total)
}

/// `ε · max(1, ‖G‖_F / ‖W‖_F)`; the ratio counts as 0 when `W = 0`.
pub fn adaptive_epsilon(g: &Matrix, w: &Matrix, epsilon: f64) -> f64 {
    let wn = w.frobenius_norm();
    let ratio = if wn > 0.0 { g.frobenius_norm() / wn } else { 0.0 };
    epsilon * ratio.max(1.0)
}

/// Elementwise preconditioner `P_ij = (Ŝ_ij + ε_t)^(-1/2)`.
pub fn preconditioner(stats: &CurvatureStats, g: &Matrix, w: &Matrix, epsilon: f64) -> Result<Matrix> {
    let s_hat = factorized_second_moment(stats)?;
    g.ensure_shape(s_hat.shape())?;
    w.ensure_shape(s_hat.shape())?;
    let eps_t = adaptive_epsilon(g, w, epsilon);
    Ok(s_hat.map(|s| 1.0 / (s + eps_t).sqrt()))
}

/// `W − η · P ⊙ D`.
pub fn apply_update(weights: &Matrix, direction: &Matrix, p: &Matrix, eta: f64) -> Result<Matrix> {
    let step = p.hadamard(direction)?;
    let mut out = weights.clone();
    out.axpy(-eta, &step)?;
    Ok(out)
}

/// `α·S + (1 − α)·(W − W₀)²·sqrt(R_i C_j)`.
pub fn update_saliency(
    saliency: &Matrix,
    weights: &Matrix,
    init_weights: &Matrix,
    curvature: &CurvatureStats,
    alpha: f64,
) -> Result<Matrix> {
    let (m, n) = saliency.shape();
    weights.ensure_shape((m, n))?;
    init_weights.ensure_shape((m, n))?;
    Matrix::from_fn(m, n, |i, j| {
        let d = weights[(i, j)] - init_weights[(i, j)];
        let geo = (curvature.row_moments[i] * curvature.col_moments[j]).sqrt();
        alpha * saliency[(i, j)] + (1.0 - alpha) * d * d * geo
    })
}

/// Grow, shrink or keep the rank from the stable and effective rank signals.
pub fn adapt_rank(r_t: usize, r_s: f64, r_eff: f64, cfg: &OptimizerConfig, max_rank: usize) -> usize {
    let r = r_t as f64;
    let upper = max_rank.max(cfg.rank_min);
    if r_s > cfg.tau_upper * r && r_eff > 0.9 * r {
        (r_t + cfg.rank_delta).min(upper)
    } else if r_s < cfg.tau_lower * r || r_eff < 0.5 * r {
        r_t.saturating_sub(cfg.rank_delta).max(cfg.rank_min)
    } else {
        r_t
    }
}

/// One full optimizer step on gradient `g`.
pub fn train_step(state: &mut OptimizerState, g: &Matrix, cfg: &OptimizerConfig) -> Result<StepInfo> {
    train_step_traced(state, g, cfg).map(|(info, _)| info)
}

/// Like [`train_step`] but also returns the mixed momentum `M̃` before
/// truncation, for checking `M̃ = U Σ Vᵀ + E`.
pub fn train_step_traced(
    state: &mut OptimizerState,
    g: &Matrix,
    cfg: &OptimizerConfig,
) -> Result<(StepInfo, Matrix)> {
    g.ensure_shape(state.shape())?;
    g.ensure_finite("gradient")?;
    let t = state.step + 1;
    let g = clip_gradient(g, cfg.clip_threshold);

    let mixed = mix_momentum(state, &g, cfg)?;
    let truncated = t.is_multiple_of(cfg.svd_interval);
    let direction = if truncated {
        let (factors, error) = compress(&mixed, state.current_rank)?;
        let recon = factors.reconstruct();
        state.momentum = FactorizedMomentum { factors, error };
        state.dense_momentum = None;
        recon
    } else {
        // The residual is absorbed into the dense buffer.
        let (m, n) = state.shape();
        state.momentum.error = Matrix::zeros(m, n)?;
        state.dense_momentum = Some(mixed.clone());
        mixed.clone()
    };

    state.curvature = update_curvature(&state.curvature, &g, cfg.beta2)?;
    let eps_t = adaptive_epsilon(&g, &state.weights, cfg.epsilon);
    let p = preconditioner(&state.curvature, &g, &state.weights, cfg.epsilon)?;
    let eta = cfg.lr_schedule.rate(t);
    state.weights = apply_update(&state.weights, &direction, &p, eta)?;
    if !state.weights.is_finite() {
        return Err(Error::Input(format!("weights diverged at step {t}")));
    }
    state.saliency = update_saliency(
        &state.saliency,
        &state.weights,
        &state.init_weights,
        &state.curvature,
        cfg.alpha,
    )?;
    state.step = t;

    let mut rank_change = None;
    if t.is_multiple_of(cfg.adapt_interval) {
        let r_eff = effective_rank_of(&state.momentum.factors.sigma);
        if r_eff > 0.0 && mixed.max_abs() > 0.0 {
            let r_s = stable_rank(&mixed)?;
            let max_rank = effective_rank_max(cfg, state.shape());
            let next = adapt_rank(state.current_rank, r_s, r_eff, cfg, max_rank);
            if next != state.current_rank {
                rank_change = Some((state.current_rank, next));
                resize_rank(state, next)?;
            }
        }
    }

    Ok((
        StepInfo {
            step: t,
            eta,
            epsilon_t: eps_t,
            rank: state.current_rank,
            truncated,
            error_norm: state.momentum.error.frobenius_norm(),
            rank_change,
        },
        mixed,
    ))
}

/// Re-dimension the momentum factors.
///
/// Growth appends seeded random directions orthogonal to the current
/// factors with zero singular value. Shrinking drops the smallest
/// directions and moves their mass into the error accumulator.
fn resize_rank(state: &mut OptimizerState, new_rank: usize) -> Result<()> {
    let old = &state.momentum.factors;
    let r = old.rank();
    let (m, n) = state.shape();
    if new_rank < r {
        let tail = old.tail(new_rank);
        let kept = old.truncate(new_rank)?;
        state.momentum.error = state.momentum.error.add(&tail)?;
        state.momentum.factors = kept;
    } else if new_rank > r {
        let extra = new_rank - r;
        let mut g = rng::stream(state.seed, STREAM_GROW, state.step);
        let grow = |basis: &Matrix, len: usize, g: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<Vec<f64>>> {
            let fresh = rng::gaussian_matrix(g, len, extra, 1.0)?;
            let fixed: Vec<Vec<f64>> = (0..basis.cols()).map(|j| basis.column(j)).collect();
            let ortho = rng::orthonormalize_against(&fresh, &fixed)?;
            let mut cols = fixed;
            cols.extend((0..extra).map(|j| ortho.column(j)));
            Ok(cols)
        };
        let u_cols = grow(&old.u, m, &mut g)?;
        let v_cols = grow(&old.v, n, &mut g)?;
        let mut sigma = old.sigma.clone();
        sigma.resize(new_rank, 0.0);
        state.momentum.factors = SvdFactors {
            u: Matrix::from_columns(m, &u_cols)?,
            sigma,
            v: Matrix::from_columns(n, &v_cols)?,
        };
    }
    state.current_rank = new_rank;
    Ok(())
}
