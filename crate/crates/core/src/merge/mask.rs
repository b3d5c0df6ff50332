use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Boolean selection over the entries of an `m × n` matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Input(format!(
                "mask has {} bits for shape {rows}×{cols}",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn retained_fraction(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    /// `true` when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("mask dimensions are positive")
    }
}

/// Percentile `q ∈ [0, 100]` of `sorted` with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (q / 100.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Keep the entries whose importance is strictly above the `(100 − k)`-th percentile.
///
/// `k = 100` keeps every entry. When the strict rule keeps nothing (all
/// top values tied), the lexicographically first `⌈k·mn/100⌉` entries
/// holding the maximum are kept and a warning is logged.
pub fn importance_mask(importance: &Matrix, k: f64) -> Result<Mask> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::Parameter(format!("sparsity k = {k} not in (0, 100]")));
    }
    importance.ensure_finite("importance")?;
    let (m, n) = importance.shape();
    if k == 100.0 {
        return Ok(Mask::full(m, n));
    }
    let values = importance.as_slice();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let theta = percentile(&sorted, 100.0 - k);
    let mut bits: Vec<bool> = values.iter().map(|&v| v > theta).collect();
    if !bits.iter().any(|&b| b) {
        let quota = (k * (m * n) as f64 / 100.0).ceil() as usize;
        let max = sorted[sorted.len() - 1];
        log::warn!("importance ties at the top; keeping the first {quota} maximal entries");
        let mut kept = 0;
        for (b, &v) in bits.iter_mut().zip(values) {
            if kept == quota {
                break;
            }
            if v == max {
                *b = true;
                kept += 1;
            }
        }
    }
    Mask::new(m, n, bits)
}

/// Weighted sign election over masked task deltas.
///
/// Returns the elected sign per entry (`−1`, `0` or `+1`) and the masks
/// with every bit cleared whose delta strictly opposes a non-zero elected sign.
pub fn elect_signs(deltas: &[Matrix], importances: &[Matrix], masks: &[Mask]) -> Result<(Matrix, Vec<Mask>)> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::Parameter("no task deltas".into()))?;
    let shape = first.shape();
    if importances.len() != deltas.len() || masks.len() != deltas.len() {
        return Err(Error::Parameter("deltas, importances and masks differ in count".into()));
    }
    for ((d, imp), mask) in deltas.iter().zip(importances).zip(masks) {
        d.ensure_shape(shape)?;
        imp.ensure_shape(shape)?;
        if mask.shape() != shape {
            return Err(Error::Shape {
                expected: shape,
                actual: mask.shape(),
            });
        }
        if imp.as_slice().iter().any(|&x| x.is_nan() || x < 0.0) {
            return Err(Error::Input("importances must be non-negative".into()));
        }
    }
    let len = shape.0 * shape.1;
    let mut signs = vec![0.0; len];
    let mut out: Vec<Mask> = masks.to_vec();
    for (e, sign) in signs.iter_mut().enumerate() {
        let (mut pos, mut neg) = (0.0, 0.0);
        for ((d, imp), mask) in deltas.iter().zip(importances).zip(masks) {
            if !mask.bits[e] {
                continue;
            }
            let v = d.as_slice()[e];
            let w = v.abs() * imp.as_slice()[e];
            if v > 0.0 {
                pos += w;
            } else if v < 0.0 {
                neg += w;
            }
        }
        *sign = if pos > neg {
            1.0
        } else if neg > pos {
            -1.0
        } else {
            0.0
        };
        if *sign != 0.0 {
            for (d, mask) in deltas.iter().zip(out.iter_mut()) {
                if mask.bits[e] && d.as_slice()[e] * *sign < 0.0 {
                    mask.bits[e] = false;
                }
            }
        }
    }
    Ok((Matrix::from_vec(shape.0, shape.1, signs)?, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_sparsity_on_two_by_two() {
        let imp = Matrix::from_rows(&[vec![4.0, 3.0], vec![2.0, 1.0]]).unwrap();
        let m = importance_mask(&imp, 50.0).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
    }

    #[test]
    fn three_by_three_matches_sort_oracle() {
        let values = [0.7, 0.1, 0.9, 0.3, 0.5, 0.2, 0.8, 0.4, 0.6];
        let imp = Matrix::from_vec(3, 3, values.to_vec()).unwrap();
        for k in [10.0, 25.0, 50.0, 75.0, 90.0] {
            let mask = importance_mask(&imp, k).unwrap();
            let kept = mask.count();
            let target = k / 100.0 * 9.0;
            assert!((kept as f64 - target).abs() <= 1.0, "k={k} kept={kept}");
            // Kept entries are exactly the `kept` largest.
            let mut order: Vec<usize> = (0..9).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
            for (rank, &idx) in order.iter().enumerate() {
                assert_eq!(mask.bits()[idx], rank < kept);
            }
        }
        assert_eq!(importance_mask(&imp, 100.0).unwrap().count(), 9);
    }

    #[test]
    fn all_equal_importance_uses_tie_rule() {
        let imp = Matrix::filled(2, 3, 1.0).unwrap();
        let m = importance_mask(&imp, 50.0).unwrap();
        assert_eq!(m.bits(), &[true, true, true, false, false, false]);
        let m = importance_mask(&imp, 10.0).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(0, 0));
    }

    #[test]
    fn rejects_bad_sparsity() {
        let imp = Matrix::filled(1, 1, 1.0).unwrap();
        assert!(importance_mask(&imp, 0.0).is_err());
        assert!(importance_mask(&imp, 100.5).is_err());
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::filled(1, 1, v).unwrap()
    }

    #[test]
    fn election_examples() {
        let ones = vec![scalar(1.0); 3];
        let masks = vec![Mask::full(1, 1); 3];
        let deltas = vec![scalar(1.0), scalar(2.0), scalar(-0.5)];
        let (s, after) = elect_signs(&deltas, &ones, &masks).unwrap();
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(after.iter().map(|m| m.get(0, 0)).collect::<Vec<_>>(), vec![true, true, false]);

        let agree = vec![scalar(-1.0), scalar(-3.0), scalar(-0.1)];
        let (s, after) = elect_signs(&agree, &ones, &masks).unwrap();
        assert_eq!(s[(0, 0)], -1.0);
        assert_eq!(after, masks);

        let tie = vec![scalar(1.0), scalar(-1.0)];
        let (s, after) = elect_signs(&tie, &ones[..2], &masks[..2]).unwrap();
        assert_eq!(s[(0, 0)], 0.0);
        assert_eq!(after, masks[..2].to_vec());
    }
}
