//! The hybrid axial mapper: proxy attention features `X[B, H_s, N]` in,
//! target importance logits `Ŷ[B, H_l, N]` out.
//!
//! Stage 1 is a temporal convolution stem, stage 2 a pre-norm transformer
//! encoder along the token axis, stage 3 a cross-attention along the head
//! axis in which learnable target queries attend over synthetic proxy heads.

mod checkpoint;
mod config;
mod forward;
mod params;
mod window;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION,
};
pub use config::{MapperConfig, ModelGeometry, StageMode, StageModes};
pub use forward::{forward_bound, ForwardPass, Mode};
pub use params::{Bound, MapperParams, NamedTensor, ParamCensus};
pub use window::window_offsets;

use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapperError {
    #[error("invalid mapper configuration: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds crop_len {crop_len}; use sliding_forward")]
    ExceedsCrop { len: usize, crop_len: usize },
    #[error("sliding_forward runs in eval mode only")]
    TrainModeWindow,
    #[error("target layer {layer} outside 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("input shape {actual:?} does not match expected {expected}")]
    InputShape {
        expected: String,
        actual: Vec<usize>,
    },
    #[error("parameter tensor {0} missing")]
    MissingTensor(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Proxy layer (1-based) paired with target layer `target` (1-based):
/// `⌈target · L_s / L_l⌉`.
pub fn layer_pair(target: usize, geom: &ModelGeometry) -> Result<usize, MapperError> {
    if target == 0 || target > geom.target_layers {
        return Err(MapperError::LayerOutOfRange {
            layer: target,
            layers: geom.target_layers,
        });
    }
    Ok((target * geom.proxy_layers).div_ceil(geom.target_layers))
}

/// Interleaved sine/cosine positional encoding of shape `[n, width]`:
/// slot `2i` holds `sin(pos / 10000^(2i/width))`, slot `2i+1` the cosine.
pub fn sinusoidal_pe(n: usize, width: usize) -> Result<Tensor, MapperError> {
    if width == 0 || width % 2 != 0 {
        return Err(MapperError::Config(format!(
            "positional encoding width must be even and positive, got {width}"
        )));
    }
    Ok(Tensor::from_fn(&[n, width], |flat| {
        let (pos, slot) = (flat / width, flat % width);
        let pair = (slot / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
        if slot % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// A mapper instance: configuration, geometry and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridAxialMapper {
    config: MapperConfig,
    geometry: ModelGeometry,
    params: MapperParams,
}

impl HybridAxialMapper {
    pub fn new<R: Rng + ?Sized>(
        config: MapperConfig,
        geometry: ModelGeometry,
        rng: &mut R,
    ) -> Result<Self, MapperError> {
        let params = MapperParams::init(&config, &geometry, rng)?;
        Ok(Self {
            config,
            geometry,
            params,
        })
    }

    /// Reassembles a mapper; the tensor set must match what `config` and
    /// `geometry` produce.
    pub fn from_parts(
        config: MapperConfig,
        geometry: ModelGeometry,
        params: MapperParams,
    ) -> Result<Self, MapperError> {
        config.validate()?;
        geometry.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = MapperParams::init(&config, &geometry, &mut rng)?;
        if reference.len() != params.len() {
            return Err(MapperError::Config(format!(
                "expected {} tensors, got {}",
                reference.len(),
                params.len()
            )));
        }
        for (want, got) in reference.entries().iter().zip(params.entries()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(MapperError::Config(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        Ok(Self {
            config,
            geometry,
            params,
        })
    }

    pub fn config(&self) -> &MapperConfig {
        &self.config
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &MapperParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MapperParams {
        &mut self.params
    }

    pub fn census(&self) -> ParamCensus {
        self.params.census()
    }

    /// One forward pass on a fresh tape without gradients. `x` is
    /// `[B, H_s, N]` with `N ≤ crop_len`; the result is `[B, H_l, N]`.
    pub fn forward_pair(&self, x: &Tensor, mode: Mode) -> Result<Tensor, MapperError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let pass = forward_bound(&self.config, &self.geometry, &bound, x, mode)?;
        Ok(pass.logits.to_tensor())
    }

    /// Eval-mode inference over arbitrary lengths by overlap-averaged
    /// windows of `crop_len` tokens.
    pub fn sliding_forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor, MapperError> {
        window::sliding_forward(self, x, mode)
    }

    /// Scores every target layer from `x_all[B, L_s, H_s, N]`, returning
    /// `[B, L_l, H_l, N]`. Target layers sharing a proxy layer reuse its
    /// scores.
    pub fn forward_full(&self, x_all: &Tensor) -> Result<Tensor, MapperError> {
        let g = &self.geometry;
        let s = x_all.shape();
        if s.len() != 4 || s[1] != g.proxy_layers || s[2] != g.proxy_heads {
            return Err(MapperError::InputShape {
                expected: format!("[B, {}, {}, N]", g.proxy_layers, g.proxy_heads),
                actual: s.to_vec(),
            });
        }
        let (b, n) = (s[0], s[3]);
        let slab = g.proxy_heads * n;
        let out_slab = g.target_heads * n;
        let mut cache: Vec<Option<Tensor>> = vec![None; g.proxy_layers];
        let mut out = vec![0.0; b * g.target_layers * out_slab];
        for target in 1..=g.target_layers {
            let proxy = layer_pair(target, g)? - 1;
            if cache[proxy].is_none() {
                let mut data = Vec::with_capacity(b * slab);
                for bi in 0..b {
                    let start = (bi * g.proxy_layers + proxy) * slab;
                    data.extend_from_slice(&x_all.data()[start..start + slab]);
                }
                let x = Tensor::new(vec![b, g.proxy_heads, n], data)?;
                cache[proxy] = Some(self.sliding_forward(&x, Mode::Eval)?);
            }
            let y = cache[proxy].as_ref().expect("filled above");
            for bi in 0..b {
                let dst = (bi * g.target_layers + target - 1) * out_slab;
                out[dst..dst + out_slab]
                    .copy_from_slice(&y.data()[bi * out_slab..(bi + 1) * out_slab]);
            }
        }
        Ok(Tensor::new(
            vec![b, g.target_layers, g.target_heads, n],
            out,
        )?)
    }
}
