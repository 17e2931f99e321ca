//! Top-K pruning masks, mask accounting and ranking-quality metrics.
//!
//! Score tensors of any rank are treated as a stack of slices along the
//! last (token) axis; every slice is ranked independently.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("token axis is empty")]
    EmptyTokenAxis,
    #[error("retention ratio {0} outside (0, 1]")]
    InvalidRatio(f64),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("scores contain non-finite values")]
    NonFinite,
    #[error("slice {slice} keeps {found} tokens, expected {expected}")]
    CountMismatch {
        slice: usize,
        found: usize,
        expected: usize,
    },
    #[error("spearman correlation needs at least 2 tokens, got {0}")]
    TooShort(usize),
}

/// Tokens kept at ratio `ratio` out of `n`: `⌈ratio · n⌉`, where products
/// within 1e-9 of an integer count as that integer.
pub fn topk_count(ratio: f64, n: usize) -> Result<usize, MetricsError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(MetricsError::InvalidRatio(ratio));
    }
    if n == 0 {
        return Err(MetricsError::EmptyTokenAxis);
    }
    let k = (ratio * n as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n))
}

/// Ranking order: higher score first, lower index first among equals.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest scores in ascending index order; ties go to
/// the lower index. Runs in expected linear time.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Per-slice binary keep mask with exactly `k` ones per slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
    ratio: f64,
    k: usize,
}

impl PruneMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>, ratio: f64) -> Result<Self, MetricsError> {
        let n = *shape.last().ok_or(MetricsError::EmptyTokenAxis)?;
        let k = topk_count(ratio, n)?;
        if bits.len() != shape.iter().product::<usize>() {
            return Err(MetricsError::ShapeMismatch(shape, vec![bits.len()]));
        }
        for (slice, row) in bits.chunks_exact(n).enumerate() {
            let found = row.iter().filter(|&&b| b).count();
            if found != k {
                return Err(MetricsError::CountMismatch {
                    slice,
                    found,
                    expected: k,
                });
            }
        }
        Ok(Self {
            shape,
            bits,
            ratio,
            k,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tokens(&self) -> usize {
        *self.shape.last().expect("validated non-empty shape")
    }

    pub fn slices(&self) -> std::slice::ChunksExact<'_, bool> {
        self.bits.chunks_exact(self.tokens())
    }

    pub fn num_slices(&self) -> usize {
        self.bits.len() / self.tokens()
    }
}

fn token_axis(t: &Tensor) -> Result<usize, MetricsError> {
    match t.shape().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(MetricsError::EmptyTokenAxis),
    }
}

/// Keeps the `⌈ratio · N⌉` highest-scoring tokens of every slice.
pub fn topk_mask(scores: &Tensor, ratio: f64) -> Result<PruneMask, MetricsError> {
    let n = token_axis(scores)?;
    let k = topk_count(ratio, n)?;
    if !scores.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    let mut bits = vec![false; scores.numel()];
    for (row, out) in scores.data().chunks_exact(n).zip(bits.chunks_exact_mut(n)) {
        for i in topk_indices(row, k) {
            out[i] = true;
        }
    }
    Ok(PruneMask {
        shape: scores.shape().to_vec(),
        bits,
        ratio,
        k,
    })
}

/// A metric per slice together with its unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScores {
    pub per_slice: Vec<f64>,
    pub mean: f64,
}

impl SliceScores {
    fn from_slices(per_slice: Vec<f64>) -> Self {
        let mean = per_slice.iter().sum::<f64>() / per_slice.len().max(1) as f64;
        Self { per_slice, mean }
    }
}

fn check_shape(a: &[usize], b: &[usize]) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::ShapeMismatch(a.to_vec(), b.to_vec()));
    }
    Ok(())
}

/// Oracle mass kept by `pred` divided by the mass of the oracle's own Top-K
/// at the same ratio. A slice with no oracle mass scores 1.
pub fn captured_mass_ratio(pred: &PruneMask, y: &Tensor) -> Result<SliceScores, MetricsError> {
    check_shape(pred.shape(), y.shape())?;
    let n = pred.tokens();
    let per_slice = y
        .data()
        .chunks_exact(n)
        .zip(pred.slices())
        .map(|(row, keep)| {
            let best: f64 = topk_indices(row, pred.k()).iter().map(|&i| row[i]).sum();
            let got: f64 = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| v)
                .sum();
            if best > 0.0 {
                got / best
            } else {
                1.0
            }
        })
        .collect();
    Ok(SliceScores::from_slices(per_slice))
}

/// `|pred ∩ gt| / K` per slice.
pub fn topk_overlap(pred: &PruneMask, gt: &PruneMask) -> Result<SliceScores, MetricsError> {
    check_shape(pred.shape(), gt.shape())?;
    if pred.k() != gt.k() {
        return Err(MetricsError::CountMismatch {
            slice: 0,
            found: pred.k(),
            expected: gt.k(),
        });
    }
    let per_slice = pred
        .slices()
        .zip(gt.slices())
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64 / pred.k() as f64)
        .collect();
    Ok(SliceScores::from_slices(per_slice))
}

/// 1-based ranks in ascending value order; tied values share their average
/// rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    match (saa > 0.0, sbb > 0.0) {
        (true, true) => (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

/// Spearman rank correlation per slice. Two constant slices count as
/// perfectly correlated, one constant slice as uncorrelated.
pub fn spearman(pred: &Tensor, y: &Tensor) -> Result<SliceScores, MetricsError> {
    check_shape(pred.shape(), y.shape())?;
    let n = token_axis(y)?;
    if n < 2 {
        return Err(MetricsError::TooShort(n));
    }
    let per_slice = pred
        .data()
        .chunks_exact(n)
        .zip(y.data().chunks_exact(n))
        .map(|(a, b)| pearson(&average_ranks(a), &average_ranks(b)))
        .collect();
    Ok(SliceScores::from_slices(per_slice))
}

/// Aggregate ranking quality of predicted scores at one retention ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ratio: f64,
    pub captured_mass_ratio: SliceScores,
    pub topk_overlap: SliceScores,
    pub spearman: SliceScores,
}

/// Scores `pred` against oracle `y` at `ratio`.
pub fn evaluate(pred: &Tensor, y: &Tensor, ratio: f64) -> Result<MetricReport, MetricsError> {
    let mask = topk_mask(pred, ratio)?;
    let gt = topk_mask(y, ratio)?;
    Ok(MetricReport {
        ratio,
        captured_mass_ratio: captured_mass_ratio(&mask, y)?,
        topk_overlap: topk_overlap(&mask, &gt)?,
        spearman: spearman(pred, y)?,
    })
}

/// Retained token indices and the KV memory pruning frees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskApplication {
    /// Sorted retained indices per slice.
    pub retained: Vec<Vec<usize>>,
    /// Bytes freed per slice across the key and value tensors.
    pub bytes_saved_per_slice: u64,
    pub bytes_saved_total: u64,
}

/// Pruned-token accounting: every dropped token frees one key and one value
/// vector of `head_dim` elements.
pub fn apply_mask(mask: &PruneMask, head_dim: usize, bytes_per_elem: usize) -> MaskApplication {
    let retained: Vec<Vec<usize>> = mask
        .slices()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let dropped = (mask.tokens() - mask.k()) as u64;
    let per_slice = dropped * 2 * head_dim as u64 * bytes_per_elem as u64;
    MaskApplication {
        bytes_saved_total: per_slice * retained.len() as u64,
        retained,
        bytes_saved_per_slice: per_slice,
    }
}

#[cfg(test)]
mod tests;
