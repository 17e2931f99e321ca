//! AdamW, global-norm clipping and the warmup + plateau learning-rate
//! schedule.

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::autodiff::Tensor;

/// First and second moment estimates, one pair per optimized tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { step: 0, m, v }
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`:
/// `p ← p − lr · (m̂ / (√v̂ + ε) + wd · p)`.
///
/// `names` label the tensors in diagnostics. Nothing is modified when any
/// gradient is non-finite.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    names: &[&str],
    state: &mut AdamState,
    config: &TrainConfig,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() || names.len() != params.len() {
        return Err(TrainError::Config(format!(
            "adamw_step: {} params, {} grads, {} moments, {} names",
            params.len(),
            grads.len(),
            state.m.len(),
            names.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * (m_hat / (v_hat.sqrt() + config.adam_eps) + config.weight_decay * *w);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64, TrainError> {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient("global gradient norm".into()));
    }
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    Ok(norm)
}

/// Linear warmup, then multiplicative decay whenever the monitored loss
/// stalls for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    base: f64,
    warmup_steps: u64,
    factor: f64,
    patience: usize,
    threshold: f64,
    scale: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl LrSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            base: config.lr,
            warmup_steps: config.warmup_steps,
            factor: config.plateau_factor,
            patience: config.plateau_patience,
            threshold: config.plateau_threshold,
            scale: 1.0,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Learning rate for optimizer step `step` (1-based).
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.base * step as f64 / self.warmup_steps as f64
        } else {
            self.base * self.scale
        }
    }

    /// Feeds one epoch's monitored loss after `steps_done` optimizer steps.
    /// Epochs that end inside the warmup are ignored. Returns whether the
    /// rate was reduced.
    pub fn observe(&mut self, steps_done: u64, loss: f64) -> bool {
        if steps_done < self.warmup_steps {
            return false;
        }
        match self.best {
            Some(best) if loss >= best * (1.0 - self.threshold) => {
                self.bad_epochs += 1;
                if self.bad_epochs >= self.patience {
                    self.scale *= self.factor;
                    self.bad_epochs = 0;
                    return true;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad_epochs = 0;
            }
        }
        false
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}
