//! Run configuration: one TOML document, optionally patched by
//! `PROXYPRUNE_<SECTION>__<KEY>` environment variables.

use std::path::{Path, PathBuf};

use proxyprune::loss::LossConfig;
use proxyprune::mapper::{MapperConfig, ModelGeometry};
use proxyprune::oracle::{GeneratorSpec, Mixing};
use proxyprune::pipeline::{LatencyProfile, MemoryPhases};
use proxyprune::train::{AblationSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "PROXYPRUNE_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("environment override {var}: {message}")]
    Env { var: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Synthetic-data settings; geometry and seed come from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub samples: usize,
    pub tokens: usize,
    pub mixing: Mixing,
    pub smoothing_width: usize,
    pub exponent: f64,
    pub position_tilt: f64,
    pub noise: f64,
    pub sink_fraction: f64,
    pub sink_boost: f64,
    pub s_max: f64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let d = GeneratorSpec::default();
        Self {
            samples: 200,
            tokens: d.tokens,
            mixing: d.mixing,
            smoothing_width: d.smoothing_width,
            exponent: d.exponent,
            position_tilt: d.position_tilt,
            noise: d.noise,
            sink_fraction: d.sink_fraction,
            sink_boost: d.sink_boost,
            s_max: d.s_max,
        }
    }
}

/// File locations; relative paths resolve against the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory for every output not given an explicit path.
    pub out_dir: PathBuf,
    pub trace: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            trace: None,
            checkpoint: None,
        }
    }
}

impl Paths {
    pub fn trace(&self) -> PathBuf {
        self.trace
            .clone()
            .unwrap_or_else(|| self.out_dir.join("trace.pkvt"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("mapper.pxmc"))
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives generation, initialization, data order and pair sampling.
    pub seed: u64,
    /// Retention ratios reported by `eval` and `ablate`.
    pub ratios: Vec<f64>,
    /// Retention ratio used by `prune`.
    pub prune_ratio: f64,
    pub geometry: ModelGeometry,
    pub mapper: MapperConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub generator: GeneratorSection,
    /// Variant trained by `train`.
    pub ablation: AblationSpec,
    /// Variants trained by `ablate`, in order.
    pub ablations: Vec<AblationSpec>,
    pub profile: LatencyProfile,
    pub memory: MemoryPhases,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ratios: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            prune_ratio: 0.2,
            geometry: ModelGeometry::default(),
            mapper: MapperConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            generator: GeneratorSection::default(),
            ablation: AblationSpec::Full,
            ablations: AblationSpec::loss_loo_suite(),
            profile: LatencyProfile {
                t_prefill: 10.0,
                t_secondary: 22.1,
                t_proxy: 2.0,
                t_mapper: 0.5,
                shared_contention: 0.4,
            },
            memory: MemoryPhases::reference(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text; errors carry line and column.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// Reads `path` (or starts from defaults), applies environment
    /// overrides and validates.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        let parsed = Self::from_toml(&text).map_err(|e| match (path, e) {
            (Some(p), ConfigError::Parse(m)) => ConfigError::Parse(format!("{}: {m}", p.display())),
            (_, e) => e,
        })?;
        let config = apply_env(parsed, env)?;
        config.validate()?;
        Ok(config)
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        let g = &self.generator;
        GeneratorSpec {
            seed: self.seed,
            geometry: self.geometry,
            tokens: g.tokens,
            mixing: g.mixing.clone(),
            smoothing_width: g.smoothing_width,
            exponent: g.exponent,
            position_tilt: g.position_tilt,
            noise: g.noise,
            sink_fraction: g.sink_fraction,
            sink_boost: g.sink_boost,
            s_max: g.s_max,
        }
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.geometry.validate().map_err(|e| invalid(&e))?;
        self.mapper.validate().map_err(|e| invalid(&e))?;
        self.loss.validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.generator_spec().validate().map_err(|e| invalid(&e))?;
        self.profile.validate().map_err(|e| invalid(&e))?;
        self.memory.validate().map_err(|e| invalid(&e))?;
        if self.generator.samples == 0 {
            return Err(ConfigError::Invalid(
                "generator.samples must be positive".into(),
            ));
        }
        let ratio_ok = |r: &f64| *r > 0.0 && *r <= 1.0;
        if self.ratios.is_empty()
            || !self.ratios.iter().all(ratio_ok)
            || !ratio_ok(&self.prune_ratio)
        {
            return Err(ConfigError::Invalid(
                "retention ratios must lie in (0, 1]".into(),
            ));
        }
        if self.ablations.is_empty() {
            return Err(ConfigError::Invalid(
                "ablations must list at least one variant".into(),
            ));
        }
        Ok(())
    }
}

/// Applies `PROXYPRUNE_<PATH>` variables, where `__` separates nested keys
/// (`PROXYPRUNE_TRAIN__EPOCHS=3`, `PROXYPRUNE_SEED=7`). Values are read as
/// TOML literals, falling back to plain strings.
pub fn apply_env(
    config: RunConfig,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<RunConfig, ConfigError> {
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    if vars.is_empty() {
        return Ok(config);
    }
    vars.sort();
    let mut root = toml::Value::try_from(&config).map_err(|e| ConfigError::Parse(e.to_string()))?;
    for (var, raw) in &vars {
        let err = |message: String| ConfigError::Env {
            var: var.clone(),
            message,
        };
        let path: Vec<String> = var[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(err("empty key segment".into()));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut table = root.as_table_mut().expect("config is a table");
        for key in parents {
            table = table
                .entry(key.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| err(format!("{key} is not a section")))?;
        }
        table.insert(last.clone(), value);
    }
    root.try_into().map_err(|e: toml::de::Error| {
        let names: Vec<&str> = vars.iter().map(|(k, _)| k.as_str()).collect();
        ConfigError::Env {
            var: names.join(", "),
            message: e.to_string(),
        }
    })
}
