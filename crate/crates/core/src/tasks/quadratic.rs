use crate::error::{Error, Result};
use crate::optimizer::CurvatureStats;
use crate::rng;
use crate::tensor::Matrix;

/// `f(W) = ½ Σ_ij H_ij (W_ij − w*_ij)²` with an entrywise-positive diagonal Hessian.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTask {
    target: Matrix,
    hessian_diag: Matrix,
    /// `(a, b)` with `H = a bᵀ`, when the Hessian was built separable.
    separable: Option<(Vec<f64>, Vec<f64>)>,
}

impl QuadraticTask {
    pub fn new(target: Matrix, hessian_diag: Matrix) -> Result<Self> {
        hessian_diag.ensure_shape(target.shape())?;
        target.ensure_finite("quadratic target")?;
        if !hessian_diag.as_slice().iter().all(|&h| h > 0.0 && h.is_finite()) {
            return Err(Error::Parameter("Hessian diagonal must be positive and finite".into()));
        }
        Ok(Self {
            target,
            hessian_diag,
            separable: None,
        })
    }

    /// Hessian `H_ij = row_scale_i · col_scale_j`.
    pub fn separable(target: Matrix, row_scale: Vec<f64>, col_scale: Vec<f64>) -> Result<Self> {
        if row_scale.len() != target.rows() || col_scale.len() != target.cols() {
            return Err(Error::Shape {
                expected: target.shape(),
                actual: (row_scale.len(), col_scale.len()),
            });
        }
        let h = Matrix::outer(&row_scale, &col_scale)?;
        let mut task = Self::new(target, h)?;
        task.separable = Some((row_scale, col_scale));
        Ok(task)
    }

    /// Random instance: target uniform in `[-1, 1]`, Hessian uniform in `h_range`.
    pub fn random(m: usize, n: usize, h_range: (f64, f64), seed: u64) -> Result<Self> {
        let mut g = rng::stream(seed, 10, 0);
        let target = rng::uniform_matrix(&mut g, m, n, -1.0, 1.0)?;
        let h = rng::uniform_matrix(&mut g, m, n, h_range.0, h_range.1)?;
        Self::new(target, h)
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }

    pub fn hessian_diag(&self) -> &Matrix {
        &self.hessian_diag
    }

    pub fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    /// Second-moment vectors whose geometric mean reproduces `H` exactly;
    /// only available for separable Hessians.
    pub fn exact_curvature(&self) -> Option<CurvatureStats> {
        self.separable.as_ref().map(|(a, b)| CurvatureStats {
            row_moments: a.iter().map(|x| x * x).collect(),
            col_moments: b.iter().map(|x| x * x).collect(),
        })
    }

    pub fn loss(&self, w: &Matrix) -> Result<f64> {
        quad_loss_grad(self, w).map(|(l, _)| l)
    }
}

/// Loss and gradient of a quadratic task.
pub fn quad_loss_grad(task: &QuadraticTask, w: &Matrix) -> Result<(f64, Matrix)> {
    w.ensure_shape(task.shape())?;
    let diff = w.sub(&task.target)?;
    let grad = task.hessian_diag.hadamard(&diff)?;
    let loss = 0.5
        * grad
            .as_slice()
            .iter()
            .zip(diff.as_slice())
            .map(|(g, d)| g * d)
            .sum::<f64>();
    Ok((loss, grad))
}

/// Closed-form minimiser of `Σ_k π_k f_k` for diagonal Hessians.
pub fn optimal_merge_oracle(tasks: &[QuadraticTask], priors: &[f64]) -> Result<Matrix> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Parameter("no tasks to merge".into()))?;
    if priors.len() != tasks.len() {
        return Err(Error::Parameter(format!(
            "{} priors for {} tasks",
            priors.len(),
            tasks.len()
        )));
    }
    if priors.iter().any(|&p| p.is_nan() || p < 0.0) || priors.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Parameter("priors must be non-negative with positive sum".into()));
    }
    let shape = first.shape();
    let mut num = Matrix::zeros(shape.0, shape.1)?;
    let mut den = Matrix::zeros(shape.0, shape.1)?;
    for (task, &pi) in tasks.iter().zip(priors) {
        if task.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                actual: task.shape(),
            });
        }
        let weighted = task.hessian_diag.scale(pi);
        num.axpy(1.0, &weighted.hadamard(&task.target)?)?;
        den.axpy(1.0, &weighted)?;
    }
    if den.as_slice().contains(&0.0) {
        return Err(Error::Parameter("combined curvature vanishes at some entry".into()));
    }
    num.zip_map(&den, |a, b| a / b)
}
