use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Matrix;

const STREAM_BASIS: u64 = 20;
const STREAM_NOISE: u64 = 21;

/// Regression whose gradients live in a fixed rank-`k` subspace.
///
/// The loss is `½‖Lᵀ(W − T)R‖_F²`, so the exact gradient is
/// `L (Lᵀ(W − T)R) Rᵀ`. Noise is drawn per step from the two-sided
/// orthogonal complement of the planted subspace and scaled to Frobenius
/// norm `noise_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedLowRankTask {
    basis_left: Matrix,
    basis_right: Matrix,
    target: Matrix,
    noise_scale: f64,
    seed: u64,
}

impl PlantedLowRankTask {
    pub fn new(
        basis_left: Matrix,
        basis_right: Matrix,
        target: Matrix,
        noise_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let (m, n) = target.shape();
        if basis_left.rows() != m || basis_right.rows() != n || basis_left.cols() != basis_right.cols() {
            return Err(Error::Parameter("planted bases do not match the target shape".into()));
        }
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Error::Parameter("noise_scale must be non-negative".into()));
        }
        for b in [&basis_left, &basis_right] {
            let gram = b.t_matmul(b)?;
            let err = gram.sub(&Matrix::identity(b.cols())?)?.max_abs();
            if err > 1e-9 {
                return Err(Error::Parameter("planted basis is not orthonormal".into()));
            }
        }
        Ok(Self {
            basis_left,
            basis_right,
            target,
            noise_scale,
            seed,
        })
    }

    /// Random orthonormal bases of rank `k` and a Gaussian target.
    pub fn random(m: usize, n: usize, k: usize, noise_scale: f64, seed: u64) -> Result<Self> {
        if k == 0 || k > m.min(n) {
            return Err(Error::Parameter(format!("planted rank {k} outside [1, min({m}, {n})]")));
        }
        let mut g = rng::stream(seed, STREAM_BASIS, 0);
        let l = rng::orthonormalize_columns(&rng::gaussian_matrix(&mut g, m, k, 1.0)?)?;
        let r = rng::orthonormalize_columns(&rng::gaussian_matrix(&mut g, n, k, 1.0)?)?;
        let target = rng::gaussian_matrix(&mut g, m, n, 1.0)?;
        Self::new(l, r, target, noise_scale, seed)
    }

    pub fn rank(&self) -> usize {
        self.basis_left.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.target.shape()
    }

    pub fn basis_left(&self) -> &Matrix {
        &self.basis_left
    }

    pub fn basis_right(&self) -> &Matrix {
        &self.basis_right
    }

    pub fn target(&self) -> &Matrix {
        &self.target
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    /// `Lᵀ (W − T) R`, the `k × k` coefficient block.
    fn coefficients(&self, w: &Matrix) -> Result<Matrix> {
        w.ensure_shape(self.shape())?;
        let diff = w.sub(&self.target)?;
        self.basis_left.t_matmul(&diff)?.matmul(&self.basis_right)
    }

    pub fn loss(&self, w: &Matrix) -> Result<f64> {
        Ok(0.5 * self.coefficients(w)?.frobenius_norm_sq())
    }

    /// Noise-free gradient.
    pub fn signal_grad(&self, w: &Matrix) -> Result<Matrix> {
        let c = self.coefficients(w)?;
        self.basis_left.matmul(&c)?.matmul(&self.basis_right.transpose())
    }

    /// Deterministic noise for `step`, orthogonal to the planted subspace on both sides.
    pub fn noise(&self, step: u64) -> Result<Matrix> {
        let (m, n) = self.shape();
        if self.noise_scale == 0.0 {
            return Matrix::zeros(m, n);
        }
        let mut g = rng::stream(self.seed, STREAM_NOISE, step);
        let raw = rng::gaussian_matrix(&mut g, m, n, 1.0)?;
        let left_out = raw.sub(&self.basis_left.matmul(&self.basis_left.t_matmul(&raw)?)?)?;
        let both_out = left_out.sub(&left_out.matmul(&self.basis_right)?.matmul(&self.basis_right.transpose())?)?;
        let norm = both_out.frobenius_norm();
        if norm == 0.0 {
            return Matrix::zeros(m, n);
        }
        Ok(both_out.scale(self.noise_scale / norm))
    }

    /// `L Lᵀ G R Rᵀ`.
    pub fn project(&self, g: &Matrix) -> Result<Matrix> {
        let c = self.basis_left.t_matmul(g)?.matmul(&self.basis_right)?;
        self.basis_left.matmul(&c)?.matmul(&self.basis_right.transpose())
    }
}

/// Signal gradient at `w` plus the step's noise.
pub fn planted_grad(task: &PlantedLowRankTask, w: &Matrix, step: u64) -> Result<Matrix> {
    task.signal_grad(w)?.add(&task.noise(step)?)
}
