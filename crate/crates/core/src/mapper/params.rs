use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{MapperConfig, MapperError, ModelGeometry, StageMode};
use crate::autodiff::{BatchStats, Tape, Tensor, Var};

/// A named tensor owned by the mapper. Buffers (`trainable == false`) hold
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// All learnable tensors and buffers of the mapper, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MapperParams {
    entries: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

impl MapperParams {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate tensor {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(NamedTensor {
            name,
            tensor,
            trainable,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name)
            .map(move |i| &mut self.entries[i].tensor)
    }

    fn require(&self, name: &str) -> Result<&Tensor, MapperError> {
        self.get(name)
            .ok_or_else(|| MapperError::MissingTensor(name.to_string()))
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Records every tensor on `tape`; trainable ones become gradient leaves
    /// when `requires_grad` is set.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape, requires_grad: bool) -> Bound<'s, 't> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.leaf(e.tensor.clone(), requires_grad && e.trainable))
            .collect();
        Bound { params: self, vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Exponential-moving-average update of one batch norm's running
    /// statistics.
    pub fn update_running_stats(
        &mut self,
        prefix: &str,
        stats: &BatchStats,
        momentum: f64,
    ) -> Result<(), MapperError> {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let name = format!("{prefix}.{suffix}");
            let t = self
                .get_mut(&name)
                .ok_or_else(|| MapperError::MissingTensor(name.clone()))?;
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }
}

/// Parameters recorded on a tape for one forward episode.
pub struct Bound<'s, 't> {
    params: &'s MapperParams,
    vars: Vec<Var<'t>>,
}

impl<'s, 't> Bound<'s, 't> {
    /// Binds externally created vars, one per entry in store order.
    pub fn from_vars(params: &'s MapperParams, vars: Vec<Var<'t>>) -> Result<Self, MapperError> {
        if vars.len() != params.len() {
            return Err(MapperError::Config(format!(
                "expected {} bound tensors, got {}",
                params.len(),
                vars.len()
            )));
        }
        Ok(Self { params, vars })
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>, MapperError> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| MapperError::MissingTensor(name.to_string()))
    }

    pub fn params(&self) -> &'s MapperParams {
        self.params
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients aligned with the store entries (`None` for buffers or
    /// tensors the loss did not reach).
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| tape.grad(*v)).collect()
    }
}

/// Parameter counts per mapper stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamCensus {
    pub conv_stem: usize,
    pub encoder: usize,
    pub cross_attention: usize,
    pub total: usize,
}

impl MapperParams {
    pub fn census(&self) -> ParamCensus {
        let count = |prefix: &str| -> usize {
            self.entries
                .iter()
                .filter(|e| e.trainable && e.name.starts_with(prefix))
                .map(|e| e.tensor.numel())
                .sum()
        };
        let conv_stem = count("stem.");
        let encoder = count("encoder.");
        let cross_attention = count("head.");
        ParamCensus {
            conv_stem,
            encoder,
            cross_attention,
            total: self.trainable_count(),
        }
    }

    /// Fresh parameters. Weights are drawn from `U(-1/√fan_in, 1/√fan_in)`,
    /// biases start at zero, target queries from `N(0, 1)/√d_head`.
    pub fn init<R: Rng + ?Sized>(
        config: &MapperConfig,
        geom: &ModelGeometry,
        rng: &mut R,
    ) -> Result<Self, MapperError> {
        config.validate()?;
        geom.validate()?;
        let mut p = Self::default();
        let d = config.d_time;
        let hs = geom.proxy_heads;
        let k = config.kernel_size;

        let mut uniform = |shape: &[usize], fan_in: usize| uniform_init(&mut *rng, shape, fan_in);
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let ones = |n: usize| Tensor::full(&[n], 1.0);

        match config.stage_modes.conv {
            StageMode::Active => {
                let hid = config.stem_hidden();
                p.insert("stem.conv1.weight", uniform(&[hid, hs, k], hs * k), true);
                p.insert("stem.conv2.weight", uniform(&[d, hid, k], hid * k), true);
                for (bn, c) in [("stem.bn1", hid), ("stem.bn2", d)] {
                    p.insert(format!("{bn}.gamma"), ones(c), true);
                    p.insert(format!("{bn}.beta"), zeros(c), true);
                    p.insert(format!("{bn}.running_mean"), zeros(c), false);
                    p.insert(format!("{bn}.running_var"), ones(c), false);
                }
            }
            StageMode::Disabled => {
                p.insert("stem.proj.weight", uniform(&[hs, d], hs), true);
                p.insert("stem.proj.bias", zeros(d), true);
            }
        }

        if config.stage_modes.time == StageMode::Active {
            let f = config.ffn_mult * d;
            for l in 0..config.enc_layers {
                let pre = format!("encoder.{l}");
                p.insert(format!("{pre}.ln1.gamma"), ones(d), true);
                p.insert(format!("{pre}.ln1.beta"), zeros(d), true);
                p.insert(format!("{pre}.attn.wq"), uniform(&[d, d], d), true);
                p.insert(format!("{pre}.attn.bq"), zeros(d), true);
                p.insert(format!("{pre}.attn.wk"), uniform(&[d, d], d), true);
                p.insert(format!("{pre}.attn.wv"), uniform(&[d, d], d), true);
                p.insert(format!("{pre}.attn.bv"), zeros(d), true);
                p.insert(format!("{pre}.attn.wo"), uniform(&[d, d], d), true);
                p.insert(format!("{pre}.attn.bo"), zeros(d), true);
                p.insert(format!("{pre}.ln2.gamma"), ones(d), true);
                p.insert(format!("{pre}.ln2.beta"), zeros(d), true);
                p.insert(format!("{pre}.ffn.w1"), uniform(&[d, f], d), true);
                p.insert(format!("{pre}.ffn.b1"), zeros(f), true);
                p.insert(format!("{pre}.ffn.w2"), uniform(&[f, d], f), true);
                p.insert(format!("{pre}.ffn.b2"), zeros(d), true);
            }
        }

        let s = config.synthetic_heads(geom);
        let dh = config.d_head;
        if config.stage_modes.head == StageMode::Active {
            p.insert("head.wk", uniform(&[d, s * dh], d), true);
        }
        p.insert("head.wv", uniform(&[d, s * dh], d), true);
        p.insert("head.bv", zeros(s * dh), true);
        if config.stage_modes.head == StageMode::Active {
            let scale = 1.0 / (dh as f64).sqrt();
            let queries = Tensor::from_fn(&[geom.target_heads, dh], |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            });
            p.insert("head.queries", queries, true);
        }
        p.insert(
            "head.out.weight",
            uniform_init(&mut *rng, &[dh, 1], dh),
            true,
        );
        p.insert("head.out.bias", zeros(1), true);
        Ok(p)
    }

    pub(crate) fn tensor(&self, name: &str) -> Result<&Tensor, MapperError> {
        self.require(name)
    }
}

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}
