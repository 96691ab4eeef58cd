//! Choosing which elements become speculation data.
//!
//! Weights are scored activation-aware (`|W_ij| * ||X_j||_2`) and compared
//! within each output row; KV vectors are scored by magnitude within a
//! single token. Both paths keep `round_half_up(keep_fraction * len)`
//! elements per group, breaking ties toward the lower index.

use std::cmp::Ordering;

use crate::bitstream::Bitstream;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One bit per element in row-major order; 1 marks a speculation element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeepBitmap {
    bits: Bitstream,
    kept: usize,
}

impl KeepBitmap {
    pub fn from_bitstream(bits: Bitstream) -> Self {
        let kept = bits.count_ones();
        KeepBitmap { bits, kept }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self::from_bitstream(bits.iter().copied().collect())
    }

    pub fn all_kept(len: usize) -> Self {
        Self::from_bitstream(std::iter::repeat_n(true, len).collect())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn kept_count(&self) -> usize {
        self.kept
    }

    #[inline]
    pub fn is_kept(&self, index: usize) -> bool {
        self.bits.get(index)
    }

    pub fn as_bitstream(&self) -> &Bitstream {
        &self.bits
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.iter().collect()
    }
}

/// Per-input-channel L2 norms of calibration activations.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationNorms(Vec<f32>);

impl CalibrationNorms {
    pub fn new(norms: Vec<f32>) -> Result<Self> {
        if let Some(bad) = norms.iter().find(|n| !(n.is_finite() && **n >= 0.0)) {
            return Err(Error::InvalidParameter(format!("calibration norm {bad} is not a finite non-negative value")));
        }
        Ok(CalibrationNorms(norms))
    }

    /// All-ones norms; reduces activation-aware scoring to plain magnitude.
    pub fn unit(len: usize) -> Self {
        CalibrationNorms(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Number of elements kept out of `len` at `keep_fraction`, rounding half up.
pub fn keep_count(keep_fraction: f64, len: usize) -> Result<usize> {
    validate_keep_fraction(keep_fraction)?;
    Ok(((keep_fraction * len as f64 + 0.5).floor() as usize).min(len))
}

fn validate_keep_fraction(keep_fraction: f64) -> Result<()> {
    if keep_fraction > 0.0 && keep_fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("keep fraction {keep_fraction} not in (0, 1]")))
    }
}

/// `norms[j] = sqrt(sum_s activations[s][j]^2)` over a `samples x channels`
/// matrix.
pub fn calibration_norms(activations: &Matrix) -> Result<CalibrationNorms> {
    if activations.rows() == 0 || activations.cols() == 0 {
        return Err(Error::EmptyInput("calibration activations"));
    }
    let mut sums = vec![0f64; activations.cols()];
    for s in 0..activations.rows() {
        for (acc, &x) in sums.iter_mut().zip(activations.row(s)) {
            *acc += x as f64 * x as f64;
        }
    }
    CalibrationNorms::new(sums.into_iter().map(|s| s.sqrt() as f32).collect())
}

pub fn wanda_scores(weights: &Matrix, norms: &CalibrationNorms) -> Result<Matrix> {
    if weights.cols() != norms.len() {
        return Err(Error::ShapeMismatch {
            expected: weights.cols(),
            actual: norms.len(),
        });
    }
    let mut out = Matrix::zeros(weights.rows(), weights.cols());
    for i in 0..weights.rows() {
        for ((o, w), n) in out.row_mut(i).iter_mut().zip(weights.row(i)).zip(norms.as_slice()) {
            *o = w.abs() * n;
        }
    }
    Ok(out)
}

/// Indices of the `k` largest scores; equal scores prefer the lower index.
fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // +0.0 folds negative zero into positive zero before the total order
    order.sort_by(|&a, &b| match (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order.truncate(k);
    order
}

fn select_row(scores: &[f32], k: usize, out: &mut [bool]) {
    for i in top_k_indices(scores, k) {
        out[i] = true;
    }
}

pub fn select_topk_per_row(scores: &Matrix, keep_fraction: f64) -> Result<KeepBitmap> {
    let k = keep_count(keep_fraction, scores.cols())?;
    let mut bits = vec![false; scores.rows() * scores.cols()];
    for (i, row_bits) in bits.chunks_exact_mut(scores.cols().max(1)).enumerate().take(scores.rows()) {
        select_row(scores.row(i), k, row_bits);
    }
    Ok(KeepBitmap::from_bools(&bits))
}

/// Magnitude top-k within one token's K or V vector.
pub fn kv_select_per_token(token_vector: &[f32], keep_fraction: f64) -> Result<KeepBitmap> {
    let k = keep_count(keep_fraction, token_vector.len())?;
    let magnitudes: Vec<f32> = token_vector.iter().map(|v| v.abs()).collect();
    let mut bits = vec![false; token_vector.len()];
    select_row(&magnitudes, k, &mut bits);
    Ok(KeepBitmap::from_bools(&bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bools(bm: &KeepBitmap) -> Vec<u8> {
        bm.iter().map(|b| b as u8).collect()
    }

    #[test]
    fn norms_examples() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
        assert_eq!(calibration_norms(&a).unwrap().as_slice(), &[5.0, 0.0]);
        let b = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(calibration_norms(&b).unwrap().as_slice(), &[1.0, 1.0]);
        let z = Matrix::zeros(4, 3);
        assert_eq!(calibration_norms(&z).unwrap().as_slice(), &[0.0; 3]);
        assert!(calibration_norms(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn wanda_examples() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let norms = CalibrationNorms::new(vec![1.0, 1.0, 3.0]).unwrap();
        let s = wanda_scores(&w, &norms).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 2.0, 1.5]);
        let s1 = wanda_scores(&w, &CalibrationNorms::unit(3)).unwrap();
        assert_eq!(s1.as_slice(), &[1.0, 2.0, 0.5]);
        let s0 = wanda_scores(&Matrix::zeros(2, 3), &norms).unwrap();
        assert!(s0.as_slice().iter().all(|&x| x == 0.0));
        assert!(wanda_scores(&w, &CalibrationNorms::unit(2)).is_err());
    }

    #[test]
    fn topk_examples() {
        let s = Matrix::from_rows(&[vec![1.0, 2.0, 1.5]]).unwrap();
        assert_eq!(bools(&select_topk_per_row(&s, 2.0 / 3.0).unwrap()), [0, 1, 1]);
        assert_eq!(bools(&select_topk_per_row(&s, 1.0).unwrap()), [1, 1, 1]);
        let tied = Matrix::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(bools(&select_topk_per_row(&tied, 1.0 / 3.0).unwrap()), [1, 0, 0]);
        assert!(select_topk_per_row(&s, 0.0).is_err());
        assert!(select_topk_per_row(&s, 1.5).is_err());
    }

    #[test]
    fn kv_examples() {
        assert_eq!(bools(&kv_select_per_token(&[0.1, -0.9, 0.5, 0.2], 0.5).unwrap()), [0, 1, 1, 0]);
        assert_eq!(bools(&kv_select_per_token(&[0.1, -0.9, 0.5, 0.2], 1.0).unwrap()), [1, 1, 1, 1]);
        assert_eq!(bools(&kv_select_per_token(&[0.3, -0.3, 0.3, -0.3], 0.25).unwrap()), [1, 0, 0, 0]);
    }

    #[test]
    fn keep_count_rounds_half_up() {
        assert_eq!(keep_count(0.5, 3).unwrap(), 2);
        assert_eq!(keep_count(0.5, 5).unwrap(), 3);
        assert_eq!(keep_count(0.6, 64).unwrap(), 38);
        assert_eq!(keep_count(0.1, 3).unwrap(), 0);
    }

    fn score_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..20).prop_flat_map(|(r, c)| {
            proptest::collection::vec(prop_oneof![0.0f32..4.0, Just(1.0f32)], r * c)
                .prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(s in score_matrix(), frac in 0.01f64..=1.0, c in prop_oneof![Just(2.0f32), Just(0.5f32), Just(4.0f32)]) {
            let scaled = Matrix::new(s.rows(), s.cols(), s.as_slice().iter().map(|x| x * c).collect()).unwrap();
            prop_assert_eq!(select_topk_per_row(&s, frac).unwrap(), select_topk_per_row(&scaled, frac).unwrap());
        }

        #[test]
        fn kept_count_matches_rows(s in score_matrix(), frac in 0.01f64..=1.0) {
            let bm = select_topk_per_row(&s, frac).unwrap();
            let k = keep_count(frac, s.cols()).unwrap();
            prop_assert_eq!(bm.kept_count(), k * s.rows());
            for i in 0..s.rows() {
                let row_kept = (0..s.cols()).filter(|&j| bm.is_kept(i * s.cols() + j)).count();
                prop_assert_eq!(row_kept, k);
            }
        }

        #[test]
        fn kv_matches_unit_norm_wanda(v in proptest::collection::vec(-2.0f32..2.0, 1..40), frac in 0.01f64..=1.0) {
            let w = Matrix::new(1, v.len(), v.clone()).unwrap();
            let scores = wanda_scores(&w, &CalibrationNorms::unit(v.len())).unwrap();
            prop_assert_eq!(kv_select_per_token(&v, frac).unwrap(), select_topk_per_row(&scores, frac).unwrap());
        }
    }
}
