//! Multi-granularity hybrid loss over mapper logits `Ŷ[B, H, N]` and oracle
//! scores `Y[B, H, N]`.
//!
//! One logit per (head, token) feeds two heads: a probability head `σ(Ŷ)`
//! and a magnitude head `σ(Ŷ) · s_max`. The binary term reads the former,
//! the regression and cosine terms the latter, and both ranking terms the
//! raw logits.

mod pairs;

pub use pairs::{plan_pairs, PairPlan, ScoredPair};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Tape, Tensor, TensorError, Var};
use crate::metrics::{topk_count, topk_indices, MetricsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("oracle maximum must be positive, got {0}")]
    DegenerateOracle(f64),
    #[error("logits {logits:?} and oracle {oracle:?} differ in shape")]
    ShapeMismatch {
        logits: Vec<usize>,
        oracle: Vec<usize>,
    },
    #[error("oracle scores must be finite and non-negative")]
    InvalidOracle,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Coefficients and shape constants of the composite loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_mse: f64,
    pub lambda_bin: f64,
    pub lambda_fine: f64,
    pub lambda_global: f64,
    pub lambda_cos: f64,
    /// Retention ratios for which binary masks are supervised.
    pub ratio_set: Vec<f64>,
    pub gamma: f64,
    pub r_min: f64,
    /// Offset inside the regression weight `(Y + ε)^α`.
    pub epsilon: f64,
    pub mse_exponent: f64,
    pub margin: f64,
    pub global_weight_min: f64,
    pub global_weight_max: f64,
    /// Pairs whose oracle gap is below this fraction of the slice maximum
    /// are dropped.
    pub pair_filter_frac: f64,
    /// Ratio defining the Top-K set for both ranking terms.
    pub topk_ratio_for_rank: f64,
    /// Upper bound on sampled pairs per slice and ranking term.
    pub max_pairs: usize,
    /// Norm floor of the cosine term.
    pub cos_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 20.0,
            lambda_bin: 10.0,
            lambda_fine: 3.0,
            lambda_global: 2.0,
            lambda_cos: 0.5,
            ratio_set: vec![0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5],
            gamma: 1.0,
            r_min: 0.05,
            epsilon: 0.1,
            mse_exponent: 1.5,
            margin: 1.0,
            global_weight_min: 1.0,
            global_weight_max: 5.0,
            pair_filter_frac: 0.01,
            topk_ratio_for_rank: 0.2,
            max_pairs: 4096,
            cos_floor: 1e-12,
        }
    }
}

/// The five loss terms, in a fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Mse,
    Bin,
    Fine,
    Global,
    Cos,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Mse,
        LossTerm::Bin,
        LossTerm::Fine,
        LossTerm::Global,
        LossTerm::Cos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Mse => "mse",
            LossTerm::Bin => "bin",
            LossTerm::Fine => "fine",
            LossTerm::Global => "global",
            LossTerm::Cos => "cos",
        }
    }
}

impl LossConfig {
    pub fn lambda(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Mse => self.lambda_mse,
            LossTerm::Bin => self.lambda_bin,
            LossTerm::Fine => self.lambda_fine,
            LossTerm::Global => self.lambda_global,
            LossTerm::Cos => self.lambda_cos,
        }
    }

    pub fn set_lambda(&mut self, term: LossTerm, value: f64) {
        match term {
            LossTerm::Mse => self.lambda_mse = value,
            LossTerm::Bin => self.lambda_bin = value,
            LossTerm::Fine => self.lambda_fine = value,
            LossTerm::Global => self.lambda_global = value,
            LossTerm::Cos => self.lambda_cos = value,
        }
    }

    /// Weight `(r_min / r)^γ` of the binary term at ratio `r`.
    pub fn bin_weight(&self, r: f64) -> f64 {
        (self.r_min / r).powf(self.gamma)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let fail = |m: String| Err(LossError::Config(m));
        if LossTerm::ALL.iter().any(|&t| !(self.lambda(t) >= 0.0)) {
            return fail("loss coefficients must be non-negative".into());
        }
        if self.ratio_set.is_empty() {
            return fail("ratio_set is empty".into());
        }
        if self.ratio_set.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return fail(format!("ratios must lie in (0, 1]: {:?}", self.ratio_set));
        }
        let min = self.ratio_set.iter().copied().fold(f64::INFINITY, f64::min);
        if min != self.r_min {
            return fail(format!(
                "r_min {} differs from min(ratio_set) {min}",
                self.r_min
            ));
        }
        if !(self.global_weight_min <= self.global_weight_max) {
            return fail("global weight clip bounds out of order".into());
        }
        if !(self.topk_ratio_for_rank > 0.0 && self.topk_ratio_for_rank <= 1.0) {
            return fail(format!(
                "topk_ratio_for_rank {} outside (0, 1]",
                self.topk_ratio_for_rank
            ));
        }
        if self.max_pairs == 0
            || self.epsilon < 0.0
            || self.pair_filter_frac < 0.0
            || self.cos_floor <= 0.0
        {
            return fail("max_pairs, epsilon, pair_filter_frac or cos_floor out of range".into());
        }
        Ok(())
    }
}

/// Probability and magnitude heads of a logit tensor.
pub fn dual_heads(logits: &Tensor, s_max: f64) -> Result<(Tensor, Tensor), LossError> {
    check_s_max(s_max)?;
    let prob = logits.map(sigmoid);
    let magnitude = prob.map(|p| p * s_max);
    Ok((prob, magnitude))
}

fn check_s_max(s_max: f64) -> Result<(), LossError> {
    if !(s_max > 0.0 && s_max.is_finite()) {
        return Err(LossError::DegenerateOracle(s_max));
    }
    Ok(())
}

/// Largest oracle score, used as the magnitude-head scale.
pub fn oracle_max(y: &Tensor) -> Result<f64, LossError> {
    let s = y.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check_s_max(s)?;
    Ok(s)
}

/// Binary ground-truth mask (1.0 = kept) at ratio `r` per token slice.
pub fn topk_mask_gt(y: &Tensor, r: f64) -> Result<Tensor, LossError> {
    let n = *y.shape().last().ok_or(MetricsError::EmptyTokenAxis)?;
    let k = topk_count(r, n)?;
    let mut out = Tensor::zeros(y.shape());
    for (row, dst) in y
        .data()
        .chunks_exact(n)
        .zip(out.data_mut().chunks_exact_mut(n))
    {
        for i in topk_indices(row, k) {
            dst[i] = 1.0;
        }
    }
    Ok(out)
}

fn check_pair(logits: Var<'_>, y: &Tensor) -> Result<(), LossError> {
    let shape = logits.shape();
    if shape != y.shape() {
        return Err(LossError::ShapeMismatch {
            logits: shape,
            oracle: y.shape().to_vec(),
        });
    }
    if y.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(LossError::InvalidOracle);
    }
    Ok(())
}

/// `Σ_r (r_min/r)^γ · BCE(σ(Ŷ), M_r)`, each BCE a mean over all elements.
pub fn loss_bin<'t>(logits: Var<'t>, y: &Tensor, cfg: &LossConfig) -> Result<Var<'t>, LossError> {
    check_pair(logits, y)?;
    let mut total: Option<Var<'t>> = None;
    for &r in &cfg.ratio_set {
        let mask = topk_mask_gt(y, r)?;
        let term = logits
            .bce_with_logits(mask.data())?
            .scale(cfg.bin_weight(r));
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| LossError::Config("ratio_set is empty".into()))
}

/// Value-weighted squared error of the magnitude head:
/// mean of `(Y + ε)^α · (σ(Ŷ)·s_max − Y)²`.
pub fn loss_mse<'t>(
    logits: Var<'t>,
    y: &Tensor,
    s_max: f64,
    cfg: &LossConfig,
) -> Result<Var<'t>, LossError> {
    check_pair(logits, y)?;
    check_s_max(s_max)?;
    let tape = logits.tape();
    let weights = y.map(|v| (v + cfg.epsilon).powf(cfg.mse_exponent));
    let diff = logits
        .sigmoid()
        .scale(s_max)
        .sub(tape.constant(y.clone()))?;
    Ok(diff.mul(diff)?.mul(tape.constant(weights))?.mean())
}

/// Weighted pairwise logistic loss over the fine pairs of `plan`; zero when
/// fewer than two pairs survive filtering.
pub fn loss_fine<'t>(logits: Var<'t>, plan: &PairPlan) -> Result<Var<'t>, LossError> {
    let tape = logits.tape();
    if plan.fine.len() < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (gap, sign, weight) = pair_terms(logits, &plan.fine)?;
    // softplus(−sgn·(Ŷ_i − Ŷ_j))
    let z = gap.mul(tape.constant(sign.map(|s| -s)))?.softplus();
    Ok(z.mul(tape.constant(weight))?.mean())
}

/// Weighted unit-margin hinge over the (Top-K, rest) pairs of `plan`; zero
/// when no pair survives.
pub fn loss_global<'t>(
    logits: Var<'t>,
    plan: &PairPlan,
    cfg: &LossConfig,
) -> Result<Var<'t>, LossError> {
    let tape = logits.tape();
    if plan.global.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (gap, _, weight) = pair_terms(logits, &plan.global)?;
    let hinge = gap.scale(-1.0).add_scalar(cfg.margin).relu();
    Ok(hinge.mul(tape.constant(weight))?.mean())
}

/// Logit gaps `Ŷ_i − Ŷ_j`, oracle signs and weights of a pair list.
fn pair_terms<'t>(
    logits: Var<'t>,
    pairs: &[ScoredPair],
) -> Result<(Var<'t>, Tensor, Tensor), LossError> {
    let numel: usize = logits.shape().iter().product();
    let flat = logits.reshape(&[numel])?;
    let first: Vec<usize> = pairs.iter().map(|p| p.i).collect();
    let second: Vec<usize> = pairs.iter().map(|p| p.j).collect();
    let gap = flat.gather(&first)?.sub(flat.gather(&second)?)?;
    let p = pairs.len();
    let sign = Tensor::new(vec![p], pairs.iter().map(|q| q.sign).collect())?;
    let weight = Tensor::new(vec![p], pairs.iter().map(|q| q.weight).collect())?;
    Ok((gap, sign, weight))
}

/// `1 − cos(pred, y)` per leading-axis sample, averaged over the batch.
/// Returns the loss and how many vectors hit the norm floor.
pub fn loss_cos<'t>(pred: Var<'t>, y: &Tensor, floor: f64) -> Result<(Var<'t>, usize), LossError> {
    let shape = pred.shape();
    if shape != y.shape() {
        return Err(LossError::ShapeMismatch {
            logits: shape,
            oracle: y.shape().to_vec(),
        });
    }
    let b = shape.first().copied().unwrap_or(1);
    let per = shape.iter().product::<usize>() / b.max(1);
    let tape = pred.tape();
    let yt = y.reshape(&[b, per])?;
    let floor_hits = {
        let p = pred.value();
        p.data()
            .chunks_exact(per)
            .chain(yt.data().chunks_exact(per))
            .filter(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt() < floor)
            .count()
    };
    let cos = pred
        .reshape(&[b, per])?
        .row_cosine(tape.constant(yt), floor)?;
    Ok((cos.mean().scale(-1.0).add_scalar(1.0), floor_hits))
}

/// Per-term values in [`LossTerm::ALL`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub mse: f64,
    pub bin: f64,
    pub fine: f64,
    pub global: f64,
    pub cos: f64,
}

impl TermValues {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Mse => self.mse,
            LossTerm::Bin => self.bin,
            LossTerm::Fine => self.fine,
            LossTerm::Global => self.global,
            LossTerm::Cos => self.cos,
        }
    }

    fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::Mse => self.mse = v,
            LossTerm::Bin => self.bin = v,
            LossTerm::Fine => self.fine = v,
            LossTerm::Global => self.global = v,
            LossTerm::Cos => self.cos = v,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: TermValues,
    pub weighted: TermValues,
    pub total: f64,
    pub fine_pairs: usize,
    pub fine_filtered: usize,
    pub global_pairs: usize,
    pub global_filtered: usize,
    pub cos_floor_hits: usize,
}

/// The composite loss `Σ λ_k · L_k` as a differentiable scalar plus a
/// report. Terms with `λ_k = 0` are evaluated for the report but left out
/// of the graph.
pub fn loss_total<'t>(
    logits: Var<'t>,
    y: &Tensor,
    s_max: f64,
    plan: &PairPlan,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossReport), LossError> {
    check_pair(logits, y)?;
    check_s_max(s_max)?;
    let tape: &'t Tape = logits.tape();
    let (cos, cos_floor_hits) = loss_cos(logits.sigmoid().scale(s_max), y, cfg.cos_floor)?;
    let values = [
        (LossTerm::Mse, loss_mse(logits, y, s_max, cfg)?),
        (LossTerm::Bin, loss_bin(logits, y, cfg)?),
        (LossTerm::Fine, loss_fine(logits, plan)?),
        (LossTerm::Global, loss_global(logits, plan, cfg)?),
        (LossTerm::Cos, cos),
    ];
    let mut report = LossReport {
        fine_pairs: plan.fine.len(),
        fine_filtered: plan.fine_filtered,
        global_pairs: plan.global.len(),
        global_filtered: plan.global_filtered,
        cos_floor_hits,
        ..LossReport::default()
    };
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (term, var) in values {
        let lambda = cfg.lambda(term);
        let v = var.item();
        report.terms.set(term, v);
        report.weighted.set(term, lambda * v);
        if lambda != 0.0 {
            total = total.add(var.scale(lambda))?;
        }
    }
    report.total = total.item();
    Ok((total, report))
}
