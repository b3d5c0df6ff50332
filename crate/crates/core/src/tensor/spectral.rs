//! Norms and spectral summary statistics.

use super::svd::{dot, singular_values};
use super::Matrix;
use crate::error::{Error, Result};

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;

pub fn frobenius_norm(a: &Matrix) -> Result<f64> {
    a.ensure_finite("frobenius_norm input")?;
    Ok(a.frobenius_norm())
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    a.ensure_finite("spectral_norm input")?;
    if a.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let n = a.cols();
    let mut v = start_vector(n);
    let mut sigma = apply(a, &v).iter().map(|x| x * x).sum::<f64>().sqrt();
    if sigma == 0.0 {
        // Start vector fell in the null space; a basis vector with a
        // nonzero image always exists for a nonzero matrix.
        let j = (0..n)
            .find(|&j| (0..a.rows()).any(|i| a[(i, j)] != 0.0))
            .expect("nonzero matrix has a nonzero column");
        v = vec![0.0; n];
        v[j] = 1.0;
    }
    sigma = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let u = apply(a, &v);
        let s = dot(&u, &u).sqrt();
        let mut w = apply_t(a, &u);
        let wn = dot(&w, &w).sqrt();
        if wn == 0.0 {
            return Ok(s);
        }
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
        let converged = (s - sigma).abs() <= POWER_TOL * s;
        sigma = s;
        if converged {
            break;
        }
    }
    let u = apply(a, &v);
    Ok(dot(&u, &u).sqrt().max(sigma))
}

/// `‖A‖_F² / ‖A‖_2²`, clamped to `[1, min(m, n)]`.
pub fn stable_rank(a: &Matrix) -> Result<f64> {
    let top = top_singular_value(a, "stable rank")?;
    let ratio = a.frobenius_norm_sq() / (top * top);
    Ok(clamp_rank(ratio, a))
}

/// `Σ σ_i² / σ_1²` from the singular values.
pub fn effective_rank(a: &Matrix) -> Result<f64> {
    let sv = nonzero_spectrum(a, "effective rank")?;
    Ok(clamp_rank(effective_rank_of(&sv), a))
}

/// Same ratio computed directly from a singular-value list.
pub fn effective_rank_of(sigma: &[f64]) -> f64 {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0.0;
    }
    sigma.iter().map(|s| s * s).sum::<f64>() / (top * top)
}

/// Fraction of squared singular-value mass in the top `r` components.
pub fn energy_ratio(a: &Matrix, r: usize) -> Result<f64> {
    let sv = nonzero_spectrum(a, "energy ratio")?;
    check_rank(a, r)?;
    Ok(energy_ratios_of(&sv, &[r])[0])
}

/// Energy ratios at several ranks from one spectrum.
pub fn energy_ratios_of(sigma: &[f64], ranks: &[usize]) -> Vec<f64> {
    let sq: Vec<f64> = sigma.iter().map(|s| s * s).collect();
    let total: f64 = sq.iter().sum();
    ranks
        .iter()
        .map(|&r| sq[..r.min(sq.len())].iter().sum::<f64>() / total)
        .collect()
}

pub(crate) fn check_rank(a: &Matrix, r: usize) -> Result<()> {
    let k = a.rows().min(a.cols());
    if r == 0 || r > k {
        return Err(Error::Parameter(format!("rank {r} outside [1, {k}]")));
    }
    Ok(())
}

fn nonzero_spectrum(a: &Matrix, what: &str) -> Result<Vec<f64>> {
    let sv = singular_values(a)?;
    if sv[0] == 0.0 {
        return Err(Error::Undefined(format!("{what} of a zero matrix")));
    }
    Ok(sv)
}

fn top_singular_value(a: &Matrix, what: &str) -> Result<f64> {
    Ok(nonzero_spectrum(a, what)?[0])
}

fn clamp_rank(x: f64, a: &Matrix) -> f64 {
    x.clamp(1.0, a.rows().min(a.cols()) as f64)
}

fn start_vector(n: usize) -> Vec<f64> {
    // Fixed irrational-ish pattern, so the start is generic but reproducible.
    let v: Vec<f64> = (0..n)
        .map(|j| 1.0 + 0.5 * ((j as f64 + 1.0) * 0.754_877_666).fract())
        .collect();
    let norm = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn apply(a: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| dot(a.row(i), v)).collect()
}

fn apply_t(a: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for (i, &ui) in u.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(a.row(i)) {
            *o += ui * x;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_rank_examples() {
        assert_eq!(stable_rank(&Matrix::identity(4).unwrap()).unwrap(), 4.0);
        let r1 = Matrix::outer(&[1.0, 2.0, -1.0], &[0.5, 3.0]).unwrap();
        assert!((stable_rank(&r1).unwrap() - 1.0).abs() < 1e-12);
        // (4 + 1) / 4
        let d = Matrix::diag(&[2.0, 1.0]).unwrap();
        assert!((stable_rank(&d).unwrap() - 1.25).abs() < 1e-15);
        assert!(matches!(
            stable_rank(&Matrix::zeros(2, 3).unwrap()),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&Matrix::identity(3).unwrap()).unwrap(), 3.0);
        assert_eq!(effective_rank(&Matrix::diag(&[3.0, 0.0, 0.0]).unwrap()).unwrap(), 1.0);
        // (9 + 4 + 1) / 9
        let v = effective_rank(&Matrix::diag(&[3.0, 2.0, 1.0]).unwrap()).unwrap();
        assert!((v - 14.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn energy_ratio_examples() {
        let d = Matrix::diag(&[3.0, 2.0, 1.0]).unwrap();
        // (9 + 4) / 14
        assert!((energy_ratio(&d, 2).unwrap() - 13.0 / 14.0).abs() < 1e-15);
        assert_eq!(energy_ratio(&d, 3).unwrap(), 1.0);
        let r1 = Matrix::outer(&[1.0, 2.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((energy_ratio(&r1, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!(energy_ratio(&d, 4).is_err());
        assert!(energy_ratio(&Matrix::zeros(2, 2).unwrap(), 1).is_err());
    }

    #[test]
    fn norm_examples() {
        let i2 = Matrix::identity(2).unwrap();
        assert!((frobenius_norm(&i2).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((spectral_norm(&i2).unwrap() - 1.0).abs() < 1e-12);
        let z = Matrix::zeros(2, 2).unwrap();
        assert_eq!(frobenius_norm(&z).unwrap(), 0.0);
        assert_eq!(spectral_norm(&z).unwrap(), 0.0);
        let c = Matrix::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
        assert_eq!(frobenius_norm(&c).unwrap(), 5.0);
        assert!((spectral_norm(&c).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_survives_cancelling_start_vector() {
        let a = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        assert!((spectral_norm(&a).unwrap() - 2.0).abs() < 1e-9);
    }
}
