//! Latency and memory model of scoring the cache with a proxy stream that
//! runs beside the target prefill, plus a two-worker demonstration of the
//! same overlap on real mapper inference.

mod live;

pub use live::{live_pipeline_demo, sequential_masks, PipelineRun, StageTimes};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::TensorError;
use crate::mapper::MapperError;
use crate::metrics::MetricsError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid latency profile: {0}")]
    Profile(String),
    #[error("invalid memory phases: {0}")]
    Phases(String),
    #[error("pipeline worker failed: {0}")]
    Worker(String),
    #[error(transparent)]
    Mapper(#[from] MapperError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Stage durations in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyProfile {
    /// Target model prefill.
    pub t_prefill: f64,
    /// Second prefill the reconstruction oracle needs for its scores.
    pub t_secondary: f64,
    pub t_proxy: f64,
    pub t_mapper: f64,
    /// Fraction of proxy work serialized against the target when both share
    /// one device.
    pub shared_contention: f64,
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let times = [
            self.t_prefill,
            self.t_secondary,
            self.t_proxy,
            self.t_mapper,
        ];
        if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(SimError::Profile(format!(
                "durations must be finite and ≥ 0: {times:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.shared_contention) {
            return Err(SimError::Profile(format!(
                "shared_contention must lie in [0, 1], got {}",
                self.shared_contention
            )));
        }
        Ok(())
    }

    /// Proxy prefill plus mapper inference.
    pub fn scoring_time(&self) -> f64 {
        self.t_proxy + self.t_mapper
    }
}

/// Device placement of the proxy stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Proxy on its own device.
    Dual,
    /// Proxy and target share a device.
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    /// Prefill wall time with proxy scoring.
    pub proxykv_time: f64,
    /// Prefill plus the oracle's secondary pass.
    pub baseline_time: f64,
    pub speedup: f64,
    /// Scoring fits inside the target prefill.
    pub budget_ok: bool,
}

fn report(profile: &LatencyProfile, proxykv_time: f64) -> SpeedupReport {
    let baseline_time = profile.t_prefill + profile.t_secondary;
    SpeedupReport {
        proxykv_time,
        baseline_time,
        speedup: if proxykv_time > 0.0 {
            baseline_time / proxykv_time
        } else {
            1.0
        },
        budget_ok: profile.scoring_time() <= profile.t_prefill,
    }
}

/// Separate devices: scoring overlaps the prefill completely.
pub fn simulate_dual(profile: &LatencyProfile) -> Result<SpeedupReport, SimError> {
    profile.validate()?;
    Ok(report(
        profile,
        profile.t_prefill.max(profile.scoring_time()),
    ))
}

/// One device: a fraction β of the scoring work serializes against the
/// prefill. Never faster than the scoring stream alone.
pub fn simulate_shared(profile: &LatencyProfile) -> Result<SpeedupReport, SimError> {
    profile.validate()?;
    let serialized = profile.t_prefill + profile.shared_contention * profile.scoring_time();
    Ok(report(profile, serialized.max(profile.scoring_time())))
}

pub fn simulate(profile: &LatencyProfile, regime: Regime) -> Result<SpeedupReport, SimError> {
    match regime {
        Regime::Dual => simulate_dual(profile),
        Regime::Shared => simulate_shared(profile),
    }
}

/// Fraction of the scored prefill's wall time spent in the mapper.
pub fn mapper_share(profile: &LatencyProfile, regime: Regime) -> Result<f64, SimError> {
    let r = simulate(profile, regime)?;
    Ok(if r.proxykv_time > 0.0 {
        profile.t_mapper / r.proxykv_time
    } else {
        0.0
    })
}

/// Memory of one device in GB, as totals per phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceMemory {
    pub name: String,
    /// Resident after model load.
    pub weights: f64,
    /// Peak during prefill, weights included.
    pub prefill_peak: f64,
    /// Steady level while decoding, weights included.
    pub decode_steady: f64,
}

impl DeviceMemory {
    pub fn activation_peak(&self) -> f64 {
        self.prefill_peak - self.weights
    }

    pub fn retained_kv(&self) -> f64 {
        self.decode_steady - self.weights
    }
}

/// Per-device memory and phase durations (seconds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryPhases {
    pub target: DeviceMemory,
    pub proxy: DeviceMemory,
    pub load_s: f64,
    pub prefill_s: f64,
    pub decode_s: f64,
}

impl MemoryPhases {
    /// An 8B target beside a 1B proxy on separate devices.
    pub fn reference() -> Self {
        Self {
            target: DeviceMemory {
                name: "target".into(),
                weights: 16.1,
                prefill_peak: 39.7,
                decode_steady: 20.5,
            },
            proxy: DeviceMemory {
                name: "proxy".into(),
                weights: 3.5,
                prefill_peak: 26.7,
                decode_steady: 3.5,
            },
            load_s: 2.0,
            prefill_s: 4.0,
            decode_s: 6.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for d in [&self.target, &self.proxy] {
            let ok = [d.weights, d.prefill_peak, d.decode_steady]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
                && d.weights <= d.decode_steady
                && d.decode_steady <= d.prefill_peak;
            if !ok {
                return Err(SimError::Phases(format!(
                    "device {} needs 0 ≤ weights ≤ decode_steady ≤ prefill_peak",
                    d.name
                )));
            }
        }
        if self.proxy.decode_steady != self.proxy.weights {
            return Err(SimError::Phases(
                "the proxy must release its cache after prefill".into(),
            ));
        }
        let durations = [self.load_s, self.prefill_s, self.decode_s];
        if durations.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(SimError::Phases(format!(
                "phase durations must be ≥ 0: {durations:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Load,
    Prefill,
    Decode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySample {
    pub t: f64,
    pub phase: Phase,
    pub target_gb: f64,
    pub proxy_gb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryTimeline {
    pub samples: Vec<MemorySample>,
    /// `(joint prefill peak − target-alone peak) / target-alone peak`, the
    /// joint peak being both devices' prefill peaks combined.
    pub premium: f64,
}

/// Default sampling cadence of the timeline, in seconds.
pub const SAMPLE_INTERVAL: f64 = 0.05;

/// Piecewise-constant usage per device, sampled every `interval` seconds
/// from load through decode.
pub fn memory_timeline(phases: &MemoryPhases, interval: f64) -> Result<MemoryTimeline, SimError> {
    phases.validate()?;
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(SimError::Phases(format!(
            "sample interval must be positive, got {interval}"
        )));
    }
    let prefill_start = phases.load_s;
    let decode_start = prefill_start + phases.prefill_s;
    let end = decode_start + phases.decode_s;
    let steps = (end / interval).floor() as usize;
    let samples = (0..=steps)
        .map(|i| {
            let t = i as f64 * interval;
            let phase = if t < prefill_start {
                Phase::Load
            } else if t < decode_start {
                Phase::Prefill
            } else {
                Phase::Decode
            };
            let level = |d: &DeviceMemory| match phase {
                Phase::Load => d.weights,
                Phase::Prefill => d.prefill_peak,
                Phase::Decode => d.decode_steady,
            };
            MemorySample {
                t,
                phase,
                target_gb: level(&phases.target),
                proxy_gb: level(&phases.proxy),
            }
        })
        .collect();
    let base = phases.target.prefill_peak;
    let premium = if base > 0.0 {
        phases.proxy.prefill_peak / base
    } else {
        0.0
    };
    Ok(MemoryTimeline { samples, premium })
}

impl MemoryTimeline {
    /// Distinct consecutive levels of one device, e.g. `[3.5, 26.7, 3.5]`.
    pub fn levels(&self, device: impl Fn(&MemorySample) -> f64) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for s in &self.samples {
            let v = device(s);
            if out.last() != Some(&v) {
                out.push(v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
