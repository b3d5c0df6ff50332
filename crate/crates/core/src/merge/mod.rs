//! Merging task-specific models that share an initialisation.
//!
//! The UMTAM path masks each task vector by its importance, resolves
//! sign conflicts by importance-weighted election and averages the
//! surviving deltas with per-entry curvature weights. Linear averaging
//! and magnitude-TIES share the same aggregation kernel.

mod mask;

pub use mask::{elect_signs, importance_mask, percentile, Mask};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optimizer::{CurvatureStats, OptimizerState};
use crate::tensor::{Matrix, SvdFactors};

/// One trained task together with the statistics gathered while training it.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskCheckpoint {
    pub name: String,
    pub weights: Matrix,
    pub init_weights: Matrix,
    pub saliency: Matrix,
    pub curvature: CurvatureStats,
    pub momentum: SvdFactors,
    /// Dense compression residual, when it was saved.
    pub error: Option<Matrix>,
    pub meta: BTreeMap<String, String>,
    /// Tensors this crate does not interpret, kept for round trips.
    pub extra: BTreeMap<String, Matrix>,
}

impl TaskCheckpoint {
    pub fn from_state(name: impl Into<String>, state: &OptimizerState, meta: BTreeMap<String, String>) -> Self {
        Self {
            name: name.into(),
            weights: state.weights().clone(),
            init_weights: state.init_weights().clone(),
            saliency: state.saliency().clone(),
            curvature: state.curvature().clone(),
            momentum: state.momentum().factors.clone(),
            error: Some(state.momentum().error.clone()),
            meta,
            extra: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    /// Shape and sign checks shared by every consumer.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        self.init_weights.ensure_shape(shape)?;
        self.saliency.ensure_shape(shape)?;
        if let Some(e) = &self.error {
            e.ensure_shape(shape)?;
        }
        for (what, m) in [
            ("weights", &self.weights),
            ("init_weights", &self.init_weights),
            ("saliency", &self.saliency),
        ] {
            m.ensure_finite(what)?;
        }
        if self.curvature.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                actual: self.curvature.shape(),
            });
        }
        if self.momentum.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                actual: self.momentum.shape(),
            });
        }
        if self.saliency.as_slice().iter().any(|&s| s < 0.0) {
            return Err(Error::Input(format!("checkpoint `{}` has negative saliency", self.name)));
        }
        if self
            .curvature
            .row_moments
            .iter()
            .chain(&self.curvature.col_moments)
            .any(|&x| !(x >= 0.0 && x.is_finite()))
        {
            return Err(Error::Input(format!(
                "checkpoint `{}` has invalid second moments",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Umtam,
    Linear,
    TiesMagnitude,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Saliency importance when set, magnitude importance otherwise.
    pub use_curvature_pruning: bool,
    pub use_sign_election: bool,
    /// Curvature weights when set, uniform weights otherwise.
    pub use_curvature_aggregation: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_curvature_pruning: true,
            use_sign_election: true,
            use_curvature_aggregation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeSpec {
    pub strategy: Strategy,
    pub sparsity_k: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub priors: Option<Vec<f64>>,
    pub ablation: Ablation,
}

impl Default for MergeSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Umtam,
            sparsity_k: 20.0,
            lambda1: 0.0,
            lambda2: 1.0,
            priors: None,
            ablation: Ablation::default(),
        }
    }
}

impl MergeSpec {
    pub fn linear() -> Self {
        Self {
            strategy: Strategy::Linear,
            ..Self::default()
        }
    }

    pub fn with_k(mut self, k: f64) -> Self {
        self.sparsity_k = k;
        self
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}.{k}")
            }
        };
        if !(self.sparsity_k > 0.0 && self.sparsity_k <= 100.0) {
            return Err(Error::config(key("sparsity_k"), format!("{} not in (0, 100]", self.sparsity_k)));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key(name), format!("{v} must be non-negative")));
            }
        }
        if self.strategy == Strategy::Umtam
            && self.ablation.use_curvature_aggregation
            && self.lambda1 + self.lambda2 <= 0.0
        {
            return Err(Error::config(
                key("lambda2"),
                "lambda1 + lambda2 must be positive for curvature aggregation",
            ));
        }
        if let Some(p) = &self.priors {
            if p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || p.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config(key("priors"), "must be non-negative with positive sum"));
            }
        }
        Ok(())
    }
}

/// Sign-conflict diagnostics over a set of task vectors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterferenceReport {
    pub entries: usize,
    pub conflicting_entries: usize,
    pub sign_conflict_rate: f64,
    pub saliency_weighted_conflict: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MergeReport {
    pub strategy: Strategy,
    pub sparsity_k: f64,
    pub task_names: Vec<String>,
    pub elected_signs: Matrix,
    pub masks_before: Vec<Mask>,
    pub masks_after: Vec<Mask>,
    pub sign_conflict_rate: f64,
    pub saliency_weighted_conflict: f64,
    pub retained_fraction: Vec<f64>,
}

pub fn task_vector(ckpt: &TaskCheckpoint) -> Result<Matrix> {
    ckpt.weights.sub(&ckpt.init_weights)
}

pub fn saliency_importance(ckpt: &TaskCheckpoint) -> Matrix {
    ckpt.saliency.clone()
}

/// `(w* − w₀)²`.
pub fn magnitude_importance(ckpt: &TaskCheckpoint) -> Result<Matrix> {
    Ok(task_vector(ckpt)?.map(|d| d * d))
}

/// `p_ij = λ₁ |(U Σ Vᵀ)_ij| + λ₂ sqrt(R_i C_j)`.
pub fn task_preconditioner(ckpt: &TaskCheckpoint, lambda1: f64, lambda2: f64) -> Result<Matrix> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::Parameter("lambda1 and lambda2 must be non-negative".into()));
    }
    let (m, n) = ckpt.shape();
    let mut p = Matrix::zeros(m, n)?;
    if lambda1 > 0.0 {
        p.axpy(lambda1, &ckpt.momentum.reconstruct().map(f64::abs))?;
    }
    if lambda2 > 0.0 {
        p.axpy(lambda2, &ckpt.curvature.geometric_mean()?)?;
    }
    Ok(p)
}

/// Fraction of entries where two task vectors have strictly opposite signs.
pub fn interference_report(ckpts: &[TaskCheckpoint]) -> Result<InterferenceReport> {
    if ckpts.len() < 2 {
        return Err(Error::Parameter("interference needs at least two checkpoints".into()));
    }
    let deltas = ckpts.iter().map(task_vector).collect::<Result<Vec<_>>>()?;
    let saliency: Vec<&Matrix> = ckpts.iter().map(|c| &c.saliency).collect();
    interference_from(&deltas, &saliency)
}

fn interference_from(deltas: &[Matrix], saliency: &[&Matrix]) -> Result<InterferenceReport> {
    let shape = deltas[0].shape();
    for d in deltas {
        d.ensure_shape(shape)?;
    }
    let len = shape.0 * shape.1;
    let k = saliency.len() as f64;
    let (mut conflicts, mut weighted, mut total_weight) = (0usize, 0.0, 0.0);
    for e in 0..len {
        let any_pos = deltas.iter().any(|d| d.as_slice()[e] > 0.0);
        let any_neg = deltas.iter().any(|d| d.as_slice()[e] < 0.0);
        let mean_s = saliency.iter().map(|s| s.as_slice()[e]).sum::<f64>() / k;
        total_weight += mean_s;
        if any_pos && any_neg {
            conflicts += 1;
            weighted += mean_s;
        }
    }
    Ok(InterferenceReport {
        entries: len,
        conflicting_entries: conflicts,
        sign_conflict_rate: conflicts as f64 / len as f64,
        saliency_weighted_conflict: if total_weight > 0.0 { weighted / total_weight } else { 0.0 },
    })
}

/// Order checkpoints by content so the floating-point reductions below do
/// not depend on the order the caller passed them in.
fn canonical_order(ckpts: &[TaskCheckpoint]) -> Vec<usize> {
    let keys: Vec<(String, Vec<u8>)> = ckpts
        .iter()
        .map(|c| {
            let mut h = Sha256::new();
            for m in [&c.weights, &c.saliency, &c.momentum.u, &c.momentum.v] {
                for x in m.as_slice() {
                    h.update(x.to_le_bytes());
                }
            }
            for x in c
                .momentum
                .sigma
                .iter()
                .chain(&c.curvature.row_moments)
                .chain(&c.curvature.col_moments)
            {
                h.update(x.to_le_bytes());
            }
            (c.name.clone(), h.finalize().to_vec())
        })
        .collect();
    let mut order: Vec<usize> = (0..ckpts.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    order
}

/// `Σ_τ p_τ M_τ Δ_τ / Σ_τ p_τ` per entry; zero where the denominator vanishes.
fn aggregate(deltas: &[Matrix], weights: &[Matrix], masks: &[Mask]) -> Result<Matrix> {
    let (m, n) = deltas[0].shape();
    Matrix::from_fn(m, n, |i, j| {
        let e = i * n + j;
        let (mut num, mut den) = (0.0, 0.0);
        for ((d, p), mask) in deltas.iter().zip(weights).zip(masks) {
            let w = p.as_slice()[e];
            if mask.bits()[e] {
                num += w * d.as_slice()[e];
            }
            den += w;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    })
}

/// Merge `ckpts` under `spec`, returning `w₀ + Δ_merged` and the diagnostics.
pub fn merge(ckpts: &[TaskCheckpoint], spec: &MergeSpec) -> Result<(Matrix, MergeReport)> {
    if ckpts.is_empty() {
        return Err(Error::Parameter("no checkpoints to merge".into()));
    }
    if ckpts.len() < 2 {
        return Err(Error::Parameter("merging needs at least two checkpoints".into()));
    }
    spec.validate("merge")?;
    let base = &ckpts[0];
    for c in ckpts {
        c.validate()?;
        if c.shape() != base.shape() {
            return Err(Error::Shape {
                expected: base.shape(),
                actual: c.shape(),
            });
        }
        if c.init_weights != base.init_weights {
            return Err(Error::Input(format!(
                "checkpoint `{}` does not share the initial weights of `{}`",
                c.name, base.name
            )));
        }
    }
    let priors = match &spec.priors {
        Some(p) if p.len() != ckpts.len() => {
            return Err(Error::Parameter(format!(
                "{} priors for {} checkpoints",
                p.len(),
                ckpts.len()
            )))
        }
        Some(p) => p.clone(),
        None => vec![1.0; ckpts.len()],
    };

    let order = canonical_order(ckpts);
    let sorted: Vec<&TaskCheckpoint> = order.iter().map(|&i| &ckpts[i]).collect();
    let sorted_priors: Vec<f64> = order.iter().map(|&i| priors[i]).collect();
    let (m, n) = base.shape();

    let deltas = sorted.iter().map(|c| task_vector(c)).collect::<Result<Vec<_>>>()?;
    let saliency_based = spec.strategy == Strategy::Umtam && spec.ablation.use_curvature_pruning;
    let importances = sorted
        .iter()
        .map(|c| {
            if saliency_based {
                Ok(saliency_importance(c))
            } else {
                magnitude_importance(c)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let (masks_before, elect, curvature_weights) = match spec.strategy {
        Strategy::Linear => (vec![Mask::full(m, n); ckpts.len()], false, false),
        Strategy::Umtam | Strategy::TiesMagnitude => {
            let masks = importances
                .par_iter()
                .map(|imp| importance_mask(imp, spec.sparsity_k))
                .collect::<Result<Vec<_>>>()?;
            let curv = spec.strategy == Strategy::Umtam && spec.ablation.use_curvature_aggregation;
            (masks, spec.ablation.use_sign_election, curv)
        }
    };

    let (elected_signs, elected_masks) = elect_signs(&deltas, &importances, &masks_before)?;
    let masks_after = if elect {
        elected_masks
    } else {
        masks_before.clone()
    };

    let weights = sorted
        .iter()
        .zip(&sorted_priors)
        .map(|(c, &pi)| {
            let p = if curvature_weights {
                task_preconditioner(c, spec.lambda1, spec.lambda2)?
            } else {
                Matrix::filled(m, n, 1.0)?
            };
            Ok(if pi == 1.0 { p } else { p.scale(pi) })
        })
        .collect::<Result<Vec<_>>>()?;

    let merged_delta = aggregate(&deltas, &weights, &masks_after)?;
    let merged = base.init_weights.add(&merged_delta)?;

    let saliency: Vec<&Matrix> = sorted.iter().map(|c| &c.saliency).collect();
    let interference = interference_from(&deltas, &saliency)?;

    // Report per-task fields in the caller's order.
    let mut before = vec![None; ckpts.len()];
    let mut after = vec![None; ckpts.len()];
    for (slot, &orig) in order.iter().enumerate() {
        before[orig] = Some(masks_before[slot].clone());
        after[orig] = Some(masks_after[slot].clone());
    }
    let masks_before: Vec<Mask> = before.into_iter().map(|m| m.expect("every slot filled")).collect();
    let masks_after: Vec<Mask> = after.into_iter().map(|m| m.expect("every slot filled")).collect();
    let report = MergeReport {
        strategy: spec.strategy,
        sparsity_k: spec.sparsity_k,
        task_names: ckpts.iter().map(|c| c.name.clone()).collect(),
        elected_signs,
        retained_fraction: masks_after.iter().map(Mask::retained_fraction).collect(),
        masks_before,
        masks_after,
        sign_conflict_rate: interference.sign_conflict_rate,
        saliency_weighted_conflict: interference.saliency_weighted_conflict,
    };
    Ok((merged, report))
}
