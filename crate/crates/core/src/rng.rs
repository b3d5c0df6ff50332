//! Seeded random streams.
//!
//! Every consumer derives its generator from a `(seed, stream, index)`
//! triple so results never depend on call order elsewhere in the program.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::Matrix;

pub fn stream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    // SplitMix64 finaliser over the triple.
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Result<Matrix> {
    use rand::Rng;
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Modified Gram-Schmidt on the columns of `a` (`m × k`, `k ≤ m`).
///
/// Columns that collapse are replaced by standard basis vectors, so the
/// result always has orthonormal columns.
pub fn orthonormalize_columns(a: &Matrix) -> Result<Matrix> {
    orthonormalize_against(a, &[])
}

/// Orthonormalise the columns of `a` against `fixed` (already orthonormal)
/// and against each other.
pub fn orthonormalize_against(a: &Matrix, fixed: &[Vec<f64>]) -> Result<Matrix> {
    let m = a.rows();
    let mut basis: Vec<Vec<f64>> = fixed.to_vec();
    let mut out = Vec::with_capacity(a.cols());
    let mut fallback = 0;
    for j in 0..a.cols() {
        let mut v = a.column(j);
        if !project_out(&mut v, &basis) {
            loop {
                let mut e = vec![0.0; m];
                e[fallback % m] = 1.0;
                fallback += 1;
                if project_out(&mut e, &basis) {
                    v = e;
                    break;
                }
            }
        }
        basis.push(v.clone());
        out.push(v);
    }
    Matrix::from_columns(m, &out)
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) -> bool {
    let before: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if before == 0.0 {
        return false;
    }
    for _ in 0..2 {
        for b in basis {
            let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
    let after: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if after <= 1e-8 * before {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= after);
    true
}
