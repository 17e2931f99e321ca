use serde::{Deserialize, Serialize};

use super::MapperError;

/// Layer and head counts of the target and proxy models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGeometry {
    /// Target layer count.
    pub target_layers: usize,
    /// Target heads per layer.
    pub target_heads: usize,
    /// Proxy layer count.
    pub proxy_layers: usize,
    /// Proxy heads per layer.
    pub proxy_heads: usize,
    /// Attention head dimension of the underlying models. Metadata only.
    pub head_dim: usize,
}

impl ModelGeometry {
    /// Llama-3.1-8B target paired with a Llama-3.2-1B proxy.
    pub fn llama_8b_1b() -> Self {
        Self {
            target_layers: 32,
            target_heads: 32,
            proxy_layers: 16,
            proxy_heads: 32,
            head_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<(), MapperError> {
        let all = [
            self.target_layers,
            self.target_heads,
            self.proxy_layers,
            self.proxy_heads,
            self.head_dim,
        ];
        if all.contains(&0) {
            return Err(MapperError::Config(format!(
                "geometry extents must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

impl Default for ModelGeometry {
    fn default() -> Self {
        Self::llama_8b_1b()
    }
}

/// Whether a mapper stage runs or is replaced by its ablation stand-in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    #[default]
    Active,
    /// Identity for the conv stem and cross-attention, mean-pool for the
    /// time encoder.
    Disabled,
}

/// Per-stage switches used by component leave-one-out ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageModes {
    pub conv: StageMode,
    pub time: StageMode,
    pub head: StageMode,
}

impl StageModes {
    pub fn all_disabled() -> Self {
        Self {
            conv: StageMode::Disabled,
            time: StageMode::Disabled,
            head: StageMode::Disabled,
        }
    }
}

/// Architectural hyperparameters of the mapper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapperConfig {
    /// Bottleneck width of the temporal latent.
    pub d_time: usize,
    /// Output channels of the first stem convolution; `None` means `d_time / 2`.
    pub stem_hidden: Option<usize>,
    pub kernel_size: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub ffn_mult: usize,
    /// Width of each synthetic head token and target query.
    pub d_head: usize,
    /// Synthetic head count for the cross-attention; `None` uses the proxy
    /// head count.
    pub synthetic_heads: Option<usize>,
    /// Longest sequence a single forward pass accepts.
    pub crop_len: usize,
    pub stride: usize,
    pub stage_modes: StageModes,
    /// Divide each input row by its mean before the stem.
    pub normalize_input: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ln_eps: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            d_time: 512,
            stem_hidden: None,
            kernel_size: 3,
            enc_layers: 6,
            enc_heads: 8,
            ffn_mult: 4,
            d_head: 64,
            synthetic_heads: None,
            crop_len: 2048,
            stride: 1024,
            stage_modes: StageModes::default(),
            normalize_input: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl MapperConfig {
    /// Small configuration used by the desk-scale experiments and tests.
    pub fn toy() -> Self {
        Self {
            d_time: 16,
            enc_layers: 2,
            enc_heads: 2,
            d_head: 8,
            crop_len: 128,
            stride: 64,
            ..Self::default()
        }
    }

    pub fn stem_hidden(&self) -> usize {
        self.stem_hidden.unwrap_or((self.d_time / 2).max(1))
    }

    pub fn synthetic_heads(&self, geom: &ModelGeometry) -> usize {
        self.synthetic_heads.unwrap_or(geom.proxy_heads)
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    pub fn validate(&self) -> Result<(), MapperError> {
        let fail = |msg: String| Err(MapperError::Config(msg));
        if self.d_time == 0 || self.d_head == 0 || self.crop_len == 0 || self.stride == 0 {
            return fail("d_time, d_head, crop_len and stride must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.stride > self.crop_len {
            return fail(format!(
                "stride {} exceeds crop_len {}",
                self.stride, self.crop_len
            ));
        }
        if self.enc_layers > 0 && (self.enc_heads == 0 || self.d_time % self.enc_heads != 0) {
            return fail(format!(
                "d_time {} must be divisible by enc_heads {}",
                self.d_time, self.enc_heads
            ));
        }
        if self.d_time % 2 != 0 {
            return fail(format!(
                "d_time must be even for positional encodings, got {}",
                self.d_time
            ));
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be positive".into());
        }
        if self.synthetic_heads == Some(0) || self.stem_hidden == Some(0) {
            return fail("synthetic_heads and stem_hidden must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 || self.ln_eps <= 0.0 {
            return fail("normalization constants out of range".into());
        }
        Ok(())
    }
}
