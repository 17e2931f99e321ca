//! Synthetic proxy/target score pairs with a planted cross-head
//! relationship, and the portable trace format.
//!
//! Proxy features `X[L_s, H_s, N]` are accumulated causal attention mass.
//! Target scores are `Y_h[n] = (box_w ∗ Σ_s W[h, s] · X_s)[n]^p · ((n + 1) / N)^τ`
//! at the paired proxy layer, with multiplicative log-normal noise, rescaled
//! so each sample peaks at `s_max`. The tilt `τ` undoes part of the causal
//! accumulation's bias toward early tokens, which only a position-aware
//! mapper can reproduce.

mod trace;

pub use trace::{read_trace, write_trace, TraceError, TraceHeader, TRACE_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::mapper::{layer_pair, window_offsets, MapperError, ModelGeometry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("attention row {row} sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("attention must be [B, H, Nq, Nk], got {0:?}")]
    AttentionShape(Vec<usize>),
    #[error(transparent)]
    Mapper(#[from] MapperError),
}

/// How target heads mix proxy heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Mixing {
    /// One random matrix shared by every target layer; target head `h`
    /// leans on proxy head `h mod H_s`.
    Random,
    /// A fresh random matrix per target layer.
    RandomPerLayer,
    /// Target head `h` copies proxy head `h mod H_s`.
    OneHot,
    /// `[L_l][H_l][H_s]` rows, each non-negative and summing to 1.
    Explicit { matrices: Vec<Vec<Vec<f64>>> },
}

/// Parameters of the synthetic oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub geometry: ModelGeometry,
    pub tokens: usize,
    pub mixing: Mixing,
    /// Odd width of the box filter applied along tokens.
    pub smoothing_width: usize,
    pub exponent: f64,
    /// Exponent `τ` of the positional tilt `((n + 1) / N)^τ`; 0 disables it.
    pub position_tilt: f64,
    /// Standard deviation of the log-normal noise factor.
    pub noise: f64,
    /// Fraction of leading tokens that act as attention sinks.
    pub sink_fraction: f64,
    /// Attention weight multiplier of sink tokens.
    pub sink_boost: f64,
    /// Largest target score per sample.
    pub s_max: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: ModelGeometry {
                target_layers: 4,
                target_heads: 4,
                proxy_layers: 2,
                proxy_heads: 2,
                head_dim: 8,
            },
            tokens: 128,
            mixing: Mixing::Random,
            smoothing_width: 5,
            exponent: 2.0,
            position_tilt: 1.0,
            noise: 0.05,
            sink_fraction: 0.02,
            sink_boost: 5.0,
            s_max: 1.0,
        }
    }
}

impl GeneratorSpec {
    /// Noise-free one-hot head selection: `Y` is a rescaled copy of one
    /// proxy head.
    pub fn identity_planting(self) -> Self {
        Self {
            mixing: Mixing::OneHot,
            smoothing_width: 1,
            exponent: 1.0,
            position_tilt: 0.0,
            noise: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let fail = |m: String| Err(OracleError::Spec(m));
        self.geometry.validate()?;
        if self.tokens == 0 {
            return fail("tokens must be positive".into());
        }
        if self.smoothing_width % 2 == 0 {
            return fail(format!(
                "smoothing_width must be odd, got {}",
                self.smoothing_width
            ));
        }
        if !(self.exponent > 0.0)
            || !(self.noise >= 0.0)
            || !(self.s_max > 0.0)
            || !(self.position_tilt >= 0.0)
        {
            return fail(
                "exponent and s_max must be positive, noise and position_tilt non-negative".into(),
            );
        }
        if !(0.0..=1.0).contains(&self.sink_fraction) || !(self.sink_boost > 0.0) {
            return fail("sink_fraction must lie in [0, 1] and sink_boost be positive".into());
        }
        if let Mixing::Explicit { matrices } = &self.mixing {
            let g = &self.geometry;
            let shape_ok = matrices.len() == g.target_layers
                && matrices.iter().all(|m| {
                    m.len() == g.target_heads && m.iter().all(|r| r.len() == g.proxy_heads)
                });
            if !shape_ok {
                return fail("explicit mixing must be [L_l][H_l][H_s]".into());
            }
            let rows_ok = matrices
                .iter()
                .flatten()
                .all(|r| r.iter().all(|&v| v >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if !rows_ok {
                return fail("mixing rows must be non-negative and sum to 1".into());
            }
        }
        Ok(())
    }

    /// Mixing matrices `[L_l][H_l][H_s]` implied by these settings.
    pub fn mixing_matrices(&self) -> Vec<Vec<Vec<f64>>> {
        let g = &self.geometry;
        let mut rng = self.stream(u64::MAX);
        let random = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..g.target_heads)
                .map(|h| {
                    // A dominant weight on proxy head `h mod H_s` keeps target
                    // heads distinct; the remainder is spread by exponential
                    // draws.
                    let own = h % g.proxy_heads;
                    if g.proxy_heads == 1 {
                        return vec![1.0];
                    }
                    let dominant = rng.random_range(0.6..0.9);
                    let raw: Vec<f64> = (0..g.proxy_heads)
                        .map(|_| -rng.random_range(f64::EPSILON..1.0).ln())
                        .collect();
                    let rest: f64 = raw
                        .iter()
                        .enumerate()
                        .filter(|&(s, _)| s != own)
                        .map(|(_, v)| v)
                        .sum();
                    (0..g.proxy_heads)
                        .map(|s| {
                            if s == own {
                                dominant
                            } else {
                                (1.0 - dominant) * raw[s] / rest
                            }
                        })
                        .collect()
                })
                .collect()
        };
        match &self.mixing {
            Mixing::Random => vec![random(&mut rng); g.target_layers],
            Mixing::RandomPerLayer => (0..g.target_layers).map(|_| random(&mut rng)).collect(),
            Mixing::OneHot => {
                let m: Vec<Vec<f64>> = (0..g.target_heads)
                    .map(|h| {
                        (0..g.proxy_heads)
                            .map(|s| f64::from(s == h % g.proxy_heads))
                            .collect()
                    })
                    .collect();
                vec![m; g.target_layers]
            }
            Mixing::Explicit { matrices } => matrices.clone(),
        }
    }

    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// One sequence: proxy features `x[L_s, H_s, N]` and oracle `y[L_l, H_l, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSample {
    pub x: Tensor,
    pub y: Tensor,
}

/// Column sums of row-stochastic attention `[B, H, Nq, Nk]` -> `[B, H, Nk]`.
pub fn accumulate_attention(attn: &Tensor) -> Result<Tensor, OracleError> {
    let s = attn.shape();
    if s.len() != 4 || s.contains(&0) {
        return Err(OracleError::AttentionShape(s.to_vec()));
    }
    let (b, h, nq, nk) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[b, h, nk]);
    for (bh, block) in attn.data().chunks_exact(nq * nk).enumerate() {
        let dst = &mut out.data_mut()[bh * nk..(bh + 1) * nk];
        for (q, row) in block.chunks_exact(nk).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
                return Err(OracleError::NotStochastic {
                    row: bh * nq + q,
                    sum,
                });
            }
            dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
    }
    Ok(out)
}

/// Per-(layer, head) traits of the synthetic proxy's attention.
struct HeadTraits {
    /// Weight of the shared token salience.
    salience: f64,
    /// Penalty per unit of normalized query-key distance.
    recency: f64,
}

/// Deterministic samples; sample `i` depends only on `spec` and `i`.
pub fn generate(spec: &GeneratorSpec, n_samples: usize) -> Result<Vec<OracleSample>, OracleError> {
    spec.validate()?;
    let g = &spec.geometry;
    let mut traits_rng = spec.stream(u64::MAX - 1);
    let traits: Vec<HeadTraits> = (0..g.proxy_layers * g.proxy_heads)
        .map(|_| HeadTraits {
            salience: traits_rng.random_range(0.5..2.0),
            recency: traits_rng.random_range(0.0..4.0),
        })
        .collect();
    let mixing = spec.mixing_matrices();
    (0..n_samples)
        .map(|i| generate_one(spec, &traits, &mixing, &mut spec.stream(i as u64)))
        .collect()
}

fn generate_one(
    spec: &GeneratorSpec,
    traits: &[HeadTraits],
    mixing: &[Vec<Vec<f64>>],
    rng: &mut ChaCha8Rng,
) -> Result<OracleSample, OracleError> {
    let g = &spec.geometry;
    let n = spec.tokens;
    let sinks = (spec.sink_fraction * n as f64).round() as usize;
    let sink_logit = spec.sink_boost.ln();
    let salience: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();

    let mut x = Tensor::zeros(&[g.proxy_layers, g.proxy_heads, n]);
    let mut logits = vec![0.0; n];
    let mut attn = vec![0.0; n * n];
    for (lh, t) in traits.iter().enumerate() {
        let own: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
        for k in 0..n {
            logits[k] =
                t.salience * salience[k] + own[k] + if k < sinks { sink_logit } else { 0.0 };
        }
        attn.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..n {
            let row = &mut attn[q * n..(q + 1) * n];
            let score = |k: usize| logits[k] - t.recency * (q - k) as f64 / n as f64;
            let max = (0..=q).map(score).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..=q {
                row[k] = (score(k) - max).exp();
                sum += row[k];
            }
            row[..=q].iter_mut().for_each(|v| *v /= sum);
        }
        let acc =
            accumulate_attention(&Tensor::new(vec![1, 1, n, n], attn.clone()).expect("square"))?;
        x.data_mut()[lh * n..(lh + 1) * n].copy_from_slice(acc.data());
    }

    let mut y = Tensor::zeros(&[g.target_layers, g.target_heads, n]);
    let half = spec.smoothing_width / 2;
    let mut mixed = vec![0.0; n];
    for l in 0..g.target_layers {
        let proxy = layer_pair(l + 1, g)? - 1;
        for h in 0..g.target_heads {
            mixed.iter_mut().for_each(|v| *v = 0.0);
            for (s, &w) in mixing[l][h].iter().enumerate() {
                let src = &x.data()[(proxy * g.proxy_heads + s) * n..][..n];
                mixed.iter_mut().zip(src).for_each(|(m, v)| *m += w * v);
            }
            let dst = &mut y.data_mut()[(l * g.target_heads + h) * n..][..n];
            for (i, d) in dst.iter_mut().enumerate() {
                let (lo, hi) = (i.saturating_sub(half), (i + half).min(n - 1));
                let box_mean = mixed[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
                let tilt = ((i + 1) as f64 / n as f64).powf(spec.position_tilt);
                let eps: f64 = StandardNormal.sample(&mut *rng);
                *d = box_mean.powf(spec.exponent) * tilt * (spec.noise * eps).exp();
            }
        }
    }
    let peak = y.max();
    if peak > 0.0 {
        let scale = spec.s_max / peak;
        y.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok(OracleSample {
        x: to_f32_precision(x),
        y: to_f32_precision(y),
    })
}

/// Rounds through `f32` so samples survive the trace format unchanged.
fn to_f32_precision(t: Tensor) -> Tensor {
    t.map(|v| f64::from(v as f32))
}

/// Aligned token-axis crops of a sample, using the sliding-window offsets.
pub fn crop_windows(sample: &OracleSample, crop_len: usize, stride: usize) -> Vec<OracleSample> {
    let n = *sample.x.shape().last().expect("3-d sample");
    if n <= crop_len {
        return vec![sample.clone()];
    }
    let crop = |t: &Tensor, off: usize| {
        let mut shape = t.shape().to_vec();
        let data = t
            .data()
            .chunks_exact(n)
            .flat_map(|row| row[off..off + crop_len].iter().copied())
            .collect();
        *shape.last_mut().expect("3-d sample") = crop_len;
        Tensor::new(shape, data).expect("crop keeps element count")
    };
    window_offsets(n, crop_len, stride)
        .into_iter()
        .map(|off| OracleSample {
            x: crop(&sample.x, off),
            y: crop(&sample.y, off),
        })
        .collect()
}
