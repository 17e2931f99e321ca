use rand::seq::index;
use rand::Rng;

use super::{LossConfig, LossError};
use crate::autodiff::Tensor;
use crate::metrics::{topk_count, topk_indices, MetricsError};

/// A token pair inside one slice, by flat index into the score tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPair {
    pub i: usize,
    pub j: usize,
    /// `sgn(Y_i − Y_j)`.
    pub sign: f64,
    pub weight: f64,
}

/// Pairs selected from the oracle for both ranking terms. Depends on `Y`
/// only, so it carries no gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairPlan {
    /// Pairs within each slice's Top-K set; weights have mean 1.
    pub fine: Vec<ScoredPair>,
    /// (Top-K member, non-member) pairs with clipped normalized-gap weights.
    pub global: Vec<ScoredPair>,
    /// Candidates dropped by the gap filter.
    pub fine_filtered: usize,
    pub global_filtered: usize,
}

/// Selects ranking pairs per token slice of `y`. A pair survives when its
/// oracle gap is nonzero and at least `pair_filter_frac` times the slice
/// maximum; slices with more than `max_pairs` survivors are subsampled
/// without replacement.
pub fn plan_pairs<R: Rng + ?Sized>(
    y: &Tensor,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<PairPlan, LossError> {
    let n = *y.shape().last().ok_or(MetricsError::EmptyTokenAxis)?;
    let k = topk_count(cfg.topk_ratio_for_rank, n)?;
    let mut plan = PairPlan::default();
    let mut member = vec![false; n];
    for (s, row) in y.data().chunks_exact(n).enumerate() {
        let base = s * n;
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        let threshold = cfg.pair_filter_frac * max;
        let keeps = |a: usize, b: usize| {
            let gap = (row[a] - row[b]).abs();
            gap > 0.0 && gap >= threshold
        };
        let top = topk_indices(row, k);
        member.iter_mut().for_each(|m| *m = false);
        top.iter().for_each(|&i| member[i] = true);

        let mut fine = Vec::new();
        for (x, &a) in top.iter().enumerate() {
            for &b in &top[x + 1..] {
                if keeps(a, b) {
                    fine.push((a, b));
                } else {
                    plan.fine_filtered += 1;
                }
            }
        }
        for (a, b) in subsample(fine, cfg.max_pairs, rng) {
            let d = row[a] - row[b];
            plan.fine.push(ScoredPair {
                i: base + a,
                j: base + b,
                sign: d.signum(),
                weight: d.abs(),
            });
        }

        let mut global = Vec::new();
        for &a in &top {
            for b in (0..n).filter(|&b| !member[b]) {
                if keeps(a, b) {
                    global.push((a, b));
                } else {
                    plan.global_filtered += 1;
                }
            }
        }
        let span = max - min;
        let norm = |v: f64| if span > 0.0 { (v - min) / span } else { 0.0 };
        for (a, b) in subsample(global, cfg.max_pairs, rng) {
            let w = (1.0 + (norm(row[a]) - norm(row[b])).abs())
                .clamp(cfg.global_weight_min, cfg.global_weight_max);
            plan.global.push(ScoredPair {
                i: base + a,
                j: base + b,
                sign: 1.0,
                weight: w,
            });
        }
    }
    if !plan.fine.is_empty() {
        let mean = plan.fine.iter().map(|p| p.weight).sum::<f64>() / plan.fine.len() as f64;
        plan.fine.iter_mut().for_each(|p| p.weight /= mean);
    }
    Ok(plan)
}

fn subsample<R: Rng + ?Sized>(
    pairs: Vec<(usize, usize)>,
    cap: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if pairs.len() <= cap {
        return pairs;
    }
    let mut picked = index::sample(rng, pairs.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pairs[i]).collect()
}
