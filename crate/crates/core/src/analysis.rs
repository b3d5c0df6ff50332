//! Trajectory diagnostics, merge quality and memory accounting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::optimizer::OptimizerState;
use crate::tasks::{quad_loss_grad, QuadraticTask};
use crate::tensor::{check_rank, effective_rank, energy_ratio, stable_rank, Matrix};

/// Steps between spectral records when training with a log attached.
pub const DEFAULT_LOG_INTERVAL: u64 = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixTag {
    Gradient,
    Momentum,
}

impl MatrixTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MatrixTag::Gradient => "gradient",
            MatrixTag::Momentum => "momentum",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralRecord {
    pub step: u64,
    pub tag: MatrixTag,
    pub stable_rank: f64,
    pub effective_rank: f64,
    pub energy_ratios: BTreeMap<usize, f64>,
}

/// Append-only series of spectral records sharing one rank grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SpectralLog {
    pub ranks: Vec<usize>,
    pub records: Vec<SpectralRecord>,
}

impl SpectralLog {
    pub fn new(ranks: Vec<usize>) -> Self {
        Self {
            ranks,
            records: Vec::new(),
        }
    }

    /// Log spectra of `g` and the state's momentum at the state's current step.
    pub fn record(&mut self, state: &OptimizerState, g: &Matrix) -> Result<()> {
        let recs = log_spectra(state, g, &self.ranks)?;
        self.records.extend(recs);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "step".to_string(),
            "tag".to_string(),
            "stable_rank".to_string(),
            "effective_rank".to_string(),
        ];
        header.extend(self.ranks.iter().map(|r| format!("energy_r{r}")));
        w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        for rec in &self.records {
            let mut row = vec![
                rec.step.to_string(),
                rec.tag.as_str().to_string(),
                rec.stable_rank.to_string(),
                rec.effective_rank.to_string(),
            ];
            row.extend(self.ranks.iter().map(|r| rec.energy_ratios[r].to_string()));
            w.write_record(&row).map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

fn spectral_record(step: u64, tag: MatrixTag, a: &Matrix, ranks: &[usize]) -> Result<Option<SpectralRecord>> {
    if a.max_abs() == 0.0 {
        log::warn!("step {step}: {} is zero, spectral record omitted", tag.as_str());
        return Ok(None);
    }
    let energy_ratios = ranks
        .iter()
        .map(|&r| energy_ratio(a, r).map(|e| (r, e)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Some(SpectralRecord {
        step,
        tag,
        stable_rank: stable_rank(a)?,
        effective_rank: effective_rank(a)?,
        energy_ratios,
    }))
}

/// Spectral statistics of the gradient and of the reconstructed momentum.
pub fn log_spectra(state: &OptimizerState, g: &Matrix, ranks: &[usize]) -> Result<Vec<SpectralRecord>> {
    g.ensure_shape(state.shape())?;
    for &r in ranks {
        check_rank(g, r)?;
    }
    let momentum = state.momentum().factors.reconstruct();
    let mut out = Vec::with_capacity(2);
    for (tag, m) in [(MatrixTag::Gradient, g), (MatrixTag::Momentum, &momentum)] {
        if let Some(rec) = spectral_record(state.step(), tag, m, ranks)? {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Parameter counts of the training state, in 64-bit words.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub m: u64,
    pub n: u64,
    pub rank: u64,
    pub tasks: u64,
    pub sparsity_k: f64,
    pub weight_params: u64,
    pub momentum_params: u64,
    pub second_moment_params: u64,
    pub saliency_params: u64,
    /// Sum of the four terms above.
    pub total_params: u64,
    /// Dense compression residual, kept out of `total_params`.
    pub error_buffer_params: u64,
    pub total_with_error_buffer: u64,
    pub adam_baseline_params: u64,
    pub ratio_vs_adam: f64,
    pub ratio_vs_adam_with_error_buffer: f64,
}

pub fn memory_report(m: u64, n: u64, r: u64, tasks: u64, k: f64) -> Result<MemoryReport> {
    for (name, v) in [("m", m), ("n", n), ("rank", r)] {
        if v == 0 {
            return Err(Error::Parameter(format!("{name} must be positive")));
        }
    }
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::Parameter(format!("sparsity k = {k} not in (0, 100]")));
    }
    let mn = m * n;
    let weight_params = mn;
    let momentum_params = m * r + r * r + n * r;
    let second_moment_params = m + n;
    let saliency_params = ((tasks * mn) as f64 * k / 100.0).ceil() as u64;
    let total_params = weight_params + momentum_params + second_moment_params + saliency_params;
    let error_buffer_params = mn;
    let total_with_error_buffer = total_params + error_buffer_params;
    let adam_baseline_params = 3 * mn;
    Ok(MemoryReport {
        m,
        n,
        rank: r,
        tasks,
        sparsity_k: k,
        weight_params,
        momentum_params,
        second_moment_params,
        saliency_params,
        total_params,
        error_buffer_params,
        total_with_error_buffer,
        adam_baseline_params,
        ratio_vs_adam: total_params as f64 / adam_baseline_params as f64,
        ratio_vs_adam_with_error_buffer: total_with_error_buffer as f64 / adam_baseline_params as f64,
    })
}

/// `Σ_k π_k (L_k(merged) − L_k(w*_k))`.
pub fn excess_loss(tasks: &[QuadraticTask], merged: &Matrix, priors: &[f64]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Parameter("no tasks".into()));
    }
    if priors.len() != tasks.len() {
        return Err(Error::Parameter(format!(
            "{} priors for {} tasks",
            priors.len(),
            tasks.len()
        )));
    }
    if priors.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::Parameter("priors must be non-negative".into()));
    }
    let mut total = 0.0;
    for (task, &pi) in tasks.iter().zip(priors) {
        let at_merged = quad_loss_grad(task, merged)?.0;
        let at_opt = quad_loss_grad(task, task.target())?.0;
        total += pi * (at_merged - at_opt);
    }
    Ok(total)
}

/// `1/K` for each of `k` tasks.
pub fn uniform_priors(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}
