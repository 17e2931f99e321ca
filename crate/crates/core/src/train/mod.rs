//! Offline mapper training against cached oracle pairs.
//!
//! Each (sample, target layer) pair is one example: the paired proxy
//! layer's features `[H_s, N]` against that target layer's scores
//! `[H_l, N]`. Examples longer than the crop length are cut into the same
//! windows inference uses.

mod ablation;
mod optim;

pub use ablation::{AblationSpec, Stage, Variant};
pub use optim::{adamw_step, clip_gradients, AdamState, LrSchedule};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::loss::{
    loss_total, oracle_max, plan_pairs, LossConfig, LossError, LossTerm, TermValues,
};
use crate::mapper::{
    forward_bound, layer_pair, window_offsets, Checkpoint, HybridAxialMapper, MapperConfig,
    MapperError, Mode, ModelGeometry,
};
use crate::metrics::{
    captured_mass_ratio, evaluate as score, topk_mask, MetricReport, MetricsError,
};
use crate::oracle::OracleSample;

/// Retention ratio at which the per-epoch validation metric is taken.
pub const HISTORY_RATIO: f64 = 0.2;

// RNG streams derived from the training seed.
const STREAM_SPLIT: u64 = 0;
const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_PAIRS: u64 = 3;
const STREAM_VAL_PAIRS: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("checkpoint geometry {checkpoint:?} does not match dataset geometry {dataset:?}")]
    GeometryMismatch {
        checkpoint: ModelGeometry,
        dataset: ModelGeometry,
    },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        /// Parameters as they were before the failing step.
        last_good: Box<Checkpoint>,
    },
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimizer, schedule and data-split settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Relative improvement of the validation loss that resets patience.
    pub plateau_threshold: f64,
    pub batch_size: usize,
    /// Batches whose gradients are averaged into one optimizer step.
    pub grad_accum: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 1000,
            plateau_factor: 0.5,
            plateau_patience: 3,
            plateau_threshold: 1e-4,
            batch_size: 8,
            grad_accum: 1,
            epochs: 30,
            grad_clip: 1.0,
            val_fraction: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("plateau_factor", self.plateau_factor),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.plateau_threshold >= 0.0) {
            return Err(TrainError::Config(
                "weight_decay and plateau_threshold must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config(
                "beta1 and beta2 must lie in [0, 1)".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.plateau_patience == 0 {
            return Err(TrainError::Config(
                "batch_size, grad_accum and plateau_patience must be positive".into(),
            ));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Oracle samples sharing one geometry and token count.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    geometry: ModelGeometry,
    tokens: usize,
    samples: Vec<OracleSample>,
}

impl Dataset {
    pub fn new(geometry: ModelGeometry, samples: Vec<OracleSample>) -> Result<Self, TrainError> {
        geometry.validate()?;
        let first = samples
            .first()
            .ok_or_else(|| TrainError::Dataset("no samples".into()))?;
        let tokens = *first.x.shape().last().unwrap_or(&0);
        let g = &geometry;
        let x_shape = [g.proxy_layers, g.proxy_heads, tokens];
        let y_shape = [g.target_layers, g.target_heads, tokens];
        for (i, s) in samples.iter().enumerate() {
            if s.x.shape() != x_shape || s.y.shape() != y_shape {
                return Err(TrainError::Dataset(format!(
                    "sample {i} has shapes {:?}/{:?}, expected {x_shape:?}/{y_shape:?}",
                    s.x.shape(),
                    s.y.shape()
                )));
            }
        }
        if tokens == 0 {
            return Err(TrainError::Dataset("samples have no tokens".into()));
        }
        Ok(Self {
            geometry,
            tokens,
            samples,
        })
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.geometry
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn samples(&self) -> &[OracleSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, TrainError> {
        let samples = indices
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| TrainError::Dataset(format!("index {i} out of range")))
            })
            .collect::<Result<_, _>>()?;
        Self::new(self.geometry, samples)
    }

    /// Seeded shuffle of sample indices, split into (train, validation);
    /// validation takes the last `⌈val_fraction · len⌉` positions.
    pub fn split(&self, config: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
        config.validate()?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut config.rng(STREAM_SPLIT));
        let n_val = ((config.val_fraction * self.len() as f64).ceil() as usize).max(1);
        if n_val >= self.len() {
            return Err(TrainError::Dataset(format!(
                "{} samples cannot be split into non-empty train and validation sets",
                self.len()
            )));
        }
        let val = order.split_off(self.len() - n_val);
        Ok((order, val))
    }

    /// One example per (sample, target layer), cropped to `crop_len`.
    fn examples(
        &self,
        indices: &[usize],
        crop_len: usize,
        stride: usize,
    ) -> Result<Vec<Example>, TrainError> {
        let g = &self.geometry;
        let n = self.tokens;
        let mut out = Vec::new();
        for &i in indices {
            let s = &self.samples[i];
            for l in 0..g.target_layers {
                let p = layer_pair(l + 1, g)? - 1;
                let x = s.x.outer(p);
                let y = s.y.outer(l);
                for off in window_offsets(n, crop_len, stride) {
                    let len = crop_len.min(n);
                    let cut = |rows: &[f64]| -> Vec<f64> {
                        rows.chunks_exact(n)
                            .flat_map(|r| r[off..off + len].iter().copied())
                            .collect()
                    };
                    out.push(Example {
                        x: cut(x),
                        y: cut(y),
                        len,
                    });
                }
            }
        }
        Ok(out)
    }
}

struct Example {
    x: Vec<f64>,
    y: Vec<f64>,
    len: usize,
}

/// Stacks examples of equal length into `x[B, H_s, n]`, `y[B, H_l, n]`.
fn stack(batch: &[&Example], g: &ModelGeometry) -> Result<(Tensor, Tensor), TrainError> {
    let n = batch[0].len;
    if batch.iter().any(|e| e.len != n) {
        return Err(TrainError::Dataset("batch mixes sequence lengths".into()));
    }
    let x = batch.iter().flat_map(|e| e.x.iter().copied()).collect();
    let y = batch.iter().flat_map(|e| e.y.iter().copied()).collect();
    Ok((
        Tensor::new(vec![batch.len(), g.proxy_heads, n], x)?,
        Tensor::new(vec![batch.len(), g.target_heads, n], y)?,
    ))
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate in effect at the end of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_terms: TermValues,
    pub val_loss: f64,
    pub val_terms: TermValues,
    /// Validation captured-mass ratio at [`HISTORY_RATIO`].
    pub val_captured_mass: f64,
    /// Mean pre-clip gradient norm over the epoch's steps.
    pub grad_norm: f64,
}

impl EpochRecord {
    pub fn csv_header() -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "lr".into(), "train_loss".into()];
        h.extend(LossTerm::ALL.map(|t| format!("train_{}", t.name())));
        h.push("val_loss".into());
        h.extend(LossTerm::ALL.map(|t| format!("val_{}", t.name())));
        h.push("val_captured_mass".into());
        h.push("grad_norm".into());
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.train_loss.to_string(),
        ];
        r.extend(LossTerm::ALL.map(|t| self.train_terms.get(t).to_string()));
        r.push(self.val_loss.to_string());
        r.extend(LossTerm::ALL.map(|t| self.val_terms.get(t).to_string()));
        r.push(self.val_captured_mass.to_string());
        r.push(self.grad_norm.to_string());
        r
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Lowest-validation-loss parameters (the initialization when no epoch
    /// ran).
    pub best: Checkpoint,
    /// Parameters after the final epoch.
    pub last: Checkpoint,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Trains one mapper on `data` after applying `ablation`, which must
/// resolve to a single variant.
pub fn train(
    data: &Dataset,
    mapper: &MapperConfig,
    loss: &LossConfig,
    config: &TrainConfig,
    ablation: &AblationSpec,
) -> Result<TrainOutcome, TrainError> {
    let mut variants = ablation.variants(mapper, loss)?;
    if variants.len() != 1 {
        return Err(TrainError::Config(format!(
            "ablation resolves to {} variants; use run_ablation",
            variants.len()
        )));
    }
    train_variant(data, &variants.remove(0), config)
}

/// Trains every variant of every spec in order.
pub fn run_ablation(
    data: &Dataset,
    mapper: &MapperConfig,
    loss: &LossConfig,
    config: &TrainConfig,
    specs: &[AblationSpec],
) -> Result<Vec<(Variant, TrainOutcome)>, TrainError> {
    let mut out = Vec::new();
    for spec in specs {
        for variant in spec.variants(mapper, loss)? {
            let outcome = train_variant(data, &variant, config)?;
            out.push((variant, outcome));
        }
    }
    Ok(out)
}

pub fn train_variant(
    data: &Dataset,
    variant: &Variant,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    variant.loss.validate()?;
    variant.mapper.validate()?;
    let geom = *data.geometry();
    let (train_idx, val_idx) = data.split(config)?;
    let (crop, stride) = (variant.mapper.crop_len, variant.mapper.stride);
    let train_ex = data.examples(&train_idx, crop, stride)?;
    let val_ex = data.examples(&val_idx, crop, stride)?;
    let val_full = data.examples(&val_idx, data.tokens(), data.tokens())?;

    let mut mapper =
        HybridAxialMapper::new(variant.mapper.clone(), geom, &mut config.rng(STREAM_INIT))?;
    let s_max = train_idx
        .iter()
        .map(|&i| oracle_max(&data.samples()[i].y))
        .try_fold(f64::NEG_INFINITY, |acc, m| m.map(|m| acc.max(m)))?;
    let snapshot = |m: &HybridAxialMapper| Checkpoint {
        mapper: m.clone(),
        s_max,
    };

    let trainable: Vec<usize> = (0..mapper.params().len())
        .filter(|&i| mapper.params().entries()[i].trainable)
        .collect();
    let names: Vec<String> = trainable
        .iter()
        .map(|&i| mapper.params().entries()[i].name.clone())
        .collect();
    let mut adam = AdamState::zeros_like(
        trainable
            .iter()
            .map(|&i| &mapper.params().entries()[i].tensor),
    );
    let mut schedule = LrSchedule::new(config);
    let mut order_rng = config.rng(STREAM_ORDER);
    let mut pair_rng = config.rng(STREAM_PAIRS);

    let mut best = snapshot(&mapper);
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let batches: Vec<Vec<&Example>> = order
            .chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| &train_ex[i]).collect())
            .collect();
        let mut sums = Sums::default();
        let mut norm_sum = 0.0;
        let mut norm_count = 0usize;
        for group in batches.chunks(config.grad_accum) {
            let step = adam.step + 1;
            let mut acc: Vec<Tensor> = trainable
                .iter()
                .map(|&i| Tensor::zeros(mapper.params().entries()[i].tensor.shape()))
                .collect();
            for batch in group {
                let (x, y) = stack(batch, &geom)?;
                let batch_s_max = oracle_max(&y)?;
                let plan = plan_pairs(&y, &variant.loss, &mut pair_rng)?;
                let tape = Tape::new();
                let bound = mapper.params().bind(&tape, true);
                let pass = forward_bound(mapper.config(), &geom, &bound, &x, Mode::Train)?;
                let (total, report) =
                    loss_total(pass.logits, &y, batch_s_max, &plan, &variant.loss)?;
                if !report.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        step,
                        last_good: Box::new(snapshot(&mapper)),
                    });
                }
                sums.add(&report.terms, report.total, batch.len());
                tape.backward(total)?;
                let grads = bound.grads(&tape);
                for (a, &i) in acc.iter_mut().zip(&trainable) {
                    if let Some(g) = &grads[i] {
                        for (d, s) in a.data_mut().iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                }
                drop(bound);
                let stats = pass.bn_stats;
                let momentum = mapper.config().bn_momentum;
                for (prefix, st) in &stats {
                    mapper
                        .params_mut()
                        .update_running_stats(prefix, st, momentum)?;
                }
            }
            if group.len() > 1 {
                let inv = 1.0 / group.len() as f64;
                acc.iter_mut()
                    .for_each(|a| a.data_mut().iter_mut().for_each(|v| *v *= inv));
            }
            for (a, name) in acc.iter().zip(&names) {
                if !a.is_finite() {
                    return Err(TrainError::NonFiniteGradient(name.clone()));
                }
            }
            norm_sum += clip_gradients(&mut acc, config.grad_clip)?;
            norm_count += 1;
            let lr = schedule.lr(step);
            let grads: Vec<&Tensor> = acc.iter().collect();
            let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut params: Vec<&mut Tensor> = mapper
                .params_mut()
                .entries_mut()
                .iter_mut()
                .filter(|e| e.trainable)
                .map(|e| &mut e.tensor)
                .collect();
            adamw_step(&mut params, &grads, &name_refs, &mut adam, config, lr)?;
        }

        let (val_loss, val_terms) = validation_loss(&mapper, &val_ex, &variant.loss, config)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                step: adam.step,
                last_good: Box::new(best),
            });
        }
        let val_captured_mass = captured_mass(&mapper, &val_full, config.batch_size)?;
        schedule.observe(adam.step, val_loss);
        let (train_loss, train_terms) = sums.mean();
        history.push(EpochRecord {
            epoch,
            lr: schedule.lr(adam.step.max(1)),
            train_loss,
            train_terms,
            val_loss,
            val_terms,
            val_captured_mass,
            grad_norm: norm_sum / norm_count.max(1) as f64,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = Some(epoch);
            best = snapshot(&mapper);
        }
    }
    Ok(TrainOutcome {
        best,
        last: snapshot(&mapper),
        best_epoch,
        history,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}

/// Example-weighted running means of the loss terms.
#[derive(Default)]
struct Sums {
    total: f64,
    terms: [f64; 5],
    count: usize,
}

impl Sums {
    fn add(&mut self, terms: &TermValues, total: f64, n: usize) {
        let w = n as f64;
        self.total += w * total;
        for (s, t) in self.terms.iter_mut().zip(LossTerm::ALL) {
            *s += w * terms.get(t);
        }
        self.count += n;
    }

    fn mean(&self) -> (f64, TermValues) {
        let c = self.count.max(1) as f64;
        let t = self.terms.map(|v| v / c);
        (
            self.total / c,
            TermValues {
                mse: t[0],
                bin: t[1],
                fine: t[2],
                global: t[3],
                cos: t[4],
            },
        )
    }
}

/// Validation loss with batch norms in eval mode. Pair subsampling uses a
/// fixed stream so epochs are compared on identical pairs.
fn validation_loss(
    mapper: &HybridAxialMapper,
    examples: &[Example],
    loss: &LossConfig,
    config: &TrainConfig,
) -> Result<(f64, TermValues), TrainError> {
    let geom = mapper.geometry();
    let mut rng = config.rng(STREAM_VAL_PAIRS);
    let mut sums = Sums::default();
    let refs: Vec<&Example> = examples.iter().collect();
    for batch in refs.chunks(config.batch_size) {
        let (x, y) = stack(batch, geom)?;
        let plan = plan_pairs(&y, loss, &mut rng)?;
        let tape = Tape::new();
        let bound = mapper.params().bind(&tape, false);
        let pass = forward_bound(mapper.config(), geom, &bound, &x, Mode::Eval)?;
        let (_, report) = loss_total(pass.logits, &y, oracle_max(&y)?, &plan, loss)?;
        sums.add(&report.terms, report.total, batch.len());
    }
    Ok(sums.mean())
}

/// Mean captured-mass ratio at [`HISTORY_RATIO`] over full-length examples.
fn captured_mass(
    mapper: &HybridAxialMapper,
    examples: &[Example],
    batch_size: usize,
) -> Result<f64, TrainError> {
    let geom = mapper.geometry();
    let refs: Vec<&Example> = examples.iter().collect();
    let mut total = 0.0;
    let mut slices = 0usize;
    for batch in refs.chunks(batch_size) {
        let (x, y) = stack(batch, geom)?;
        let pred = mapper.sliding_forward(&x, Mode::Eval)?;
        let scores = captured_mass_ratio(&topk_mask(&pred, HISTORY_RATIO)?, &y)?;
        total += scores.per_slice.iter().sum::<f64>();
        slices += scores.per_slice.len();
    }
    Ok(total / slices.max(1) as f64)
}

/// Scores stacked predictions against stacked oracle values, one report
/// per ratio.
pub fn evaluate_scores(
    pred: &Tensor,
    y: &Tensor,
    ratios: &[f64],
) -> Result<Vec<MetricReport>, TrainError> {
    ratios
        .iter()
        .map(|&r| score(pred, y, r).map_err(TrainError::from))
        .collect()
}

/// Runs the checkpoint over every sample and target layer and reports all
/// pruning metrics per ratio.
pub fn evaluate(
    checkpoint: &Checkpoint,
    data: &Dataset,
    ratios: &[f64],
) -> Result<Vec<MetricReport>, TrainError> {
    let pred = predict(checkpoint, data)?;
    let g = data.geometry();
    let flat = [data.len() * g.target_layers, g.target_heads, data.tokens()];
    let y: Vec<f64> = data
        .samples()
        .iter()
        .flat_map(|s| s.y.data().iter().copied())
        .collect();
    evaluate_scores(
        &pred.reshape(&flat)?,
        &Tensor::new(flat.to_vec(), y)?,
        ratios,
    )
}

/// Predicted scores `[S, L_l, H_l, N]` for every sample.
pub fn predict(checkpoint: &Checkpoint, data: &Dataset) -> Result<Tensor, TrainError> {
    let g = data.geometry();
    if checkpoint.mapper.geometry() != g {
        return Err(TrainError::GeometryMismatch {
            checkpoint: *checkpoint.mapper.geometry(),
            dataset: *g,
        });
    }
    let n = data.tokens();
    let mut out = Vec::with_capacity(data.len() * g.target_layers * g.target_heads * n);
    for chunk in data.samples().chunks(8) {
        let x: Vec<f64> = chunk
            .iter()
            .flat_map(|s| s.x.data().iter().copied())
            .collect();
        let x = Tensor::new(vec![chunk.len(), g.proxy_layers, g.proxy_heads, n], x)?;
        out.extend_from_slice(checkpoint.mapper.forward_full(&x)?.data());
    }
    Ok(Tensor::new(
        vec![data.len(), g.target_layers, g.target_heads, n],
        out,
    )?)
}

#[cfg(test)]
mod tests;
