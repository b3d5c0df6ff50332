//! Truncated SVD via one-sided (Hestenes) Jacobi rotations.
//!
//! The rotations act on the columns of whichever orientation of the input
//! has the smaller Gram matrix, so the accumulated right factor is
//! `min(m, n)` square. Every step is sequential and branch-stable, which
//! makes the factorization bitwise reproducible for identical inputs.

use serde::Serialize;

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Rank-`r` factorization `U · diag(sigma) · Vᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SvdFactors {
    /// `m × r`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub sigma: Vec<f64>,
    /// `n × r`, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }

    /// `U · diag(sigma) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = self.shape();
        let r = self.rank();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let u_row = self.u.row(i);
            let out_row = &mut out[i * n..(i + 1) * n];
            for (l, (&u, &s)) in u_row.iter().zip(&self.sigma).enumerate().take(r) {
                let a = u * s;
                if a == 0.0 {
                    continue;
                }
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o += a * self.v[(j, l)];
                }
            }
        }
        Matrix::from_vec(m, n, out).expect("factor shapes are positive")
    }

    /// Keep the leading `r` components.
    pub fn truncate(&self, r: usize) -> Result<SvdFactors> {
        if r == 0 || r > self.rank() {
            return Err(Error::Parameter(format!(
                "cannot truncate rank-{} factors to rank {r}",
                self.rank()
            )));
        }
        Ok(SvdFactors {
            u: self.u.leading_columns(r)?,
            sigma: self.sigma[..r].to_vec(),
            v: self.v.leading_columns(r)?,
        })
    }

    /// Components `[r, rank)` as a dense matrix (the part `truncate(r)` drops).
    pub fn tail(&self, r: usize) -> Matrix {
        let (m, n) = self.shape();
        let mut out = Matrix::zeros(m, n).expect("factor shapes are positive");
        for l in r..self.rank() {
            let s = self.sigma[l];
            for i in 0..m {
                let a = self.u[(i, l)] * s;
                for j in 0..n {
                    out[(i, j)] += a * self.v[(j, l)];
                }
            }
        }
        out
    }
}

/// Best rank-`r` approximation of `a` in Frobenius norm.
pub fn truncated_svd(a: &Matrix, r: usize) -> Result<SvdFactors> {
    let k = a.rows().min(a.cols());
    if r == 0 || r > k {
        return Err(Error::Parameter(format!(
            "rank {r} outside [1, {k}] for a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    a.ensure_finite("truncated_svd input")?;

    let transposed = a.rows() < a.cols();
    let tall = if transposed { a.transpose() } else { a.clone() };
    let len = tall.rows();

    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| tall.column(j)).collect();
    let mut right: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();
    jacobi_sweeps(&mut cols, &mut right);

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort: equal singular values keep solver order.
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    order.truncate(r);

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let left = orthonormal_left(&cols, &norms, &order, len);
    let mut left_m = Matrix::from_columns(len, &left)?;
    let right_cols: Vec<Vec<f64>> = order.iter().map(|&j| right[j].clone()).collect();
    let mut right_m = Matrix::from_columns(k, &right_cols)?;

    let (u, v) = if transposed {
        (&mut right_m, &mut left_m)
    } else {
        (&mut left_m, &mut right_m)
    };
    fix_signs(u, v);
    Ok(SvdFactors {
        u: u.clone(),
        sigma,
        v: v.clone(),
    })
}

/// All `min(m, n)` singular values, non-increasing.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(truncated_svd(a, a.rows().min(a.cols()))?.sigma)
}

fn jacobi_sweeps(cols: &mut [Vec<f64>], right: &mut [Vec<f64>]) {
    let k = cols.len();
    let len = cols.first().map_or(0, Vec::len);
    let tol = f64::EPSILON * (len.max(1) as f64);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cols, p, q, c, s);
                rotate(right, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(q);
    let (vp, vq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Normalised Jacobi columns, with degenerate ones replaced by a
/// deterministic completion from the standard basis.
fn orthonormal_left(cols: &[Vec<f64>], norms: &[f64], order: &[usize], len: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Option<Vec<f64>>> = vec![None; order.len()];
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] == 0.0 {
            continue;
        }
        let mut v: Vec<f64> = cols[j].iter().map(|x| x / norms[j]).collect();
        if !v.iter().all(|x| x.is_finite()) {
            continue;
        }
        if accepted.iter().any(|a| dot(a, &v).abs() > 1e-10)
            && !orthogonalize(&mut v, &accepted) {
                continue;
            }
        accepted.push(v.clone());
        out[slot] = Some(v);
    }
    let mut basis = 0;
    for slot in out.iter_mut().filter(|s| s.is_none()) {
        while basis < len {
            let mut e = vec![0.0; len];
            e[basis] = 1.0;
            basis += 1;
            if orthogonalize(&mut e, &accepted) {
                accepted.push(e.clone());
                *slot = Some(e);
                break;
            }
        }
    }
    out.into_iter()
        .map(|s| s.expect("len >= order.len() guarantees a completion"))
        .collect()
}

/// Two passes of Gram-Schmidt against `basis`; false if `v` collapses.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let before = dot(v, v).sqrt();
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
    let after = dot(v, v).sqrt();
    if after <= 0.5 * before || after == 0.0 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= after;
    }
    true
}

/// Largest-magnitude entry of each U column is made positive.
fn fix_signs(u: &mut Matrix, v: &mut Matrix) {
    for l in 0..u.cols() {
        let mut best = 0;
        for i in 1..u.rows() {
            if u[(i, l)].abs() > u[(best, l)].abs() {
                best = i;
            }
        }
        if u[(best, l)] < 0.0 {
            for i in 0..u.rows() {
                u[(i, l)] = -u[(i, l)];
            }
            for j in 0..v.rows() {
                v[(j, l)] = -v[(j, l)];
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
