//! Subcommands of the `proxyprune` binary, callable as a library.
//!
//! Every command is deterministic given its configuration: reports and
//! checkpoints are byte-identical across re-runs.

pub mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use proxyprune::mapper::{Checkpoint, CheckpointError};
use proxyprune::metrics::{apply_mask, MetricReport};
use proxyprune::oracle::{generate, read_trace, write_trace, OracleError, TraceError, TraceHeader};
use proxyprune::pipeline::{
    live_pipeline_demo, mapper_share, memory_timeline, simulate_dual, simulate_shared, Regime,
    SimError, SpeedupReport, SAMPLE_INTERVAL,
};
use proxyprune::train::{evaluate, run_ablation, train, Dataset, EpochRecord, TrainError};
use serde::Serialize;
use thiserror::Error;

pub use config::{ConfigError, RunConfig};

/// Failure of a command after its configuration was accepted.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: CheckpointError,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), RunError> {
    let csv_err = |source| RunError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn load_dataset(path: &Path) -> Result<Dataset, RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let (header, samples) =
        read_trace(std::io::BufReader::new(file)).map_err(|source| RunError::Trace {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(Dataset::new(header.geometry, samples)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, RunError> {
    Checkpoint::load(path).map_err(|source| RunError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), RunError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    ckpt.save(path).map_err(|source| RunError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `generator.samples` synthetic samples to the trace path.
pub fn cmd_gen(config: &RunConfig) -> Result<PathBuf, RunError> {
    let spec = config.generator_spec();
    let samples = generate(&spec, config.generator.samples)?;
    let path = config.paths.trace();
    let header = TraceHeader::for_spec(&spec, samples.len());
    let mut w = create(&path)?;
    write_trace(&mut w, &header, &samples).map_err(|source| RunError::Trace {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub variant: String,
    pub best_epoch: Option<usize>,
    pub checksum: String,
    pub final_val_captured_mass: Option<f64>,
    pub train_samples: usize,
    pub val_samples: usize,
}

fn history_rows(history: &[EpochRecord]) -> Vec<Vec<String>> {
    history.iter().map(EpochRecord::csv_row).collect()
}

/// Trains the configured variant on the trace; writes the best checkpoint,
/// `history.csv` and `train.json`.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary, RunError> {
    let data = load_dataset(&config.paths.trace())?;
    let out = train(
        &data,
        &config.mapper,
        &config.loss,
        &config.train_config(),
        &config.ablation,
    )?;
    let label = config
        .ablation
        .variants(&config.mapper, &config.loss)?
        .remove(0)
        .label;
    save_checkpoint(&out.best, &config.paths.checkpoint())?;
    write_csv(
        &config.paths.output("history.csv"),
        &EpochRecord::csv_header(),
        &history_rows(&out.history),
    )?;
    let summary = TrainSummary {
        variant: label,
        best_epoch: out.best_epoch,
        checksum: out.best.checksum(),
        final_val_captured_mass: out.history.last().map(|r| r.val_captured_mass),
        train_samples: out.train_indices.len(),
        val_samples: out.val_indices.len(),
    };
    write_json(&config.paths.output("train.json"), &summary)?;
    Ok(summary)
}

/// Slice-averaged metrics at one retention ratio.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub ratio: f64,
    pub captured_mass_ratio: f64,
    pub topk_overlap: f64,
    pub spearman: f64,
}

impl MetricRow {
    fn header() -> Vec<String> {
        ["ratio", "captured_mass_ratio", "topk_overlap", "spearman"]
            .map(String::from)
            .to_vec()
    }

    fn cells(&self) -> Vec<String> {
        [
            self.ratio,
            self.captured_mass_ratio,
            self.topk_overlap,
            self.spearman,
        ]
        .map(|v| v.to_string())
        .to_vec()
    }
}

impl From<&MetricReport> for MetricRow {
    fn from(r: &MetricReport) -> Self {
        Self {
            ratio: r.ratio,
            captured_mass_ratio: r.captured_mass_ratio.mean,
            topk_overlap: r.topk_overlap.mean,
            spearman: r.spearman.mean,
        }
    }
}

/// Scores the checkpoint on the trace at every configured ratio; writes
/// `eval.csv` and `eval.json`.
pub fn cmd_eval(config: &RunConfig) -> Result<Vec<MetricRow>, RunError> {
    let ckpt = load_checkpoint(&config.paths.checkpoint())?;
    let data = load_dataset(&config.paths.trace())?;
    let rows: Vec<MetricRow> = evaluate(&ckpt, &data, &config.ratios)?
        .iter()
        .map(MetricRow::from)
        .collect();
    let cells: Vec<Vec<String>> = rows.iter().map(MetricRow::cells).collect();
    write_csv(
        &config.paths.output("eval.csv"),
        &MetricRow::header(),
        &cells,
    )?;
    write_json(&config.paths.output("eval.json"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
pub struct PruneOutput {
    pub ratio: f64,
    pub k: usize,
    /// Retained token indices per sample, target layer and head.
    pub retained: Vec<Vec<Vec<Vec<usize>>>>,
    /// KV bytes freed across all samples at 16-bit precision.
    pub bytes_saved: u64,
}

/// Runs the two-worker scoring pipeline over the trace and writes the
/// retained indices to `prune.json`.
pub fn cmd_prune(config: &RunConfig) -> Result<PruneOutput, RunError> {
    let ckpt = load_checkpoint(&config.paths.checkpoint())?;
    let data = load_dataset(&config.paths.trace())?;
    let run = live_pipeline_demo(data.samples(), &ckpt, config.prune_ratio)?;
    let g = data.geometry();
    let mut out = PruneOutput {
        ratio: config.prune_ratio,
        k: run.masks.first().map_or(0, |m| m.k()),
        retained: Vec::with_capacity(run.masks.len()),
        bytes_saved: 0,
    };
    for mask in &run.masks {
        let applied = apply_mask(mask, g.head_dim, 2);
        out.bytes_saved += applied.bytes_saved_total;
        out.retained.push(
            applied
                .retained
                .chunks(g.target_heads)
                .map(<[Vec<usize>]>::to_vec)
                .collect(),
        );
    }
    write_json(&config.paths.output("prune.json"), &out)?;
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct SimulateOutput {
    pub dual: SpeedupReport,
    pub shared: SpeedupReport,
    pub mapper_share_dual: f64,
    pub mapper_share_shared: f64,
    pub memory_premium: f64,
}

/// Evaluates the latency profile in both regimes and the memory timeline;
/// writes `simulate.json` and `timeline.csv`.
pub fn cmd_simulate(config: &RunConfig) -> Result<SimulateOutput, RunError> {
    let p = &config.profile;
    let timeline = memory_timeline(&config.memory, SAMPLE_INTERVAL)?;
    let out = SimulateOutput {
        dual: simulate_dual(p)?,
        shared: simulate_shared(p)?,
        mapper_share_dual: mapper_share(p, Regime::Dual)?,
        mapper_share_shared: mapper_share(p, Regime::Shared)?,
        memory_premium: timeline.premium,
    };
    let header = ["t", "phase", "target_gb", "proxy_gb"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = timeline
        .samples
        .iter()
        .map(|s| {
            let phase = serde_json::to_value(s.phase).expect("phase serializes");
            vec![
                format!("{:.2}", s.t),
                phase.as_str().unwrap_or_default().to_string(),
                s.target_gb.to_string(),
                s.proxy_gb.to_string(),
            ]
        })
        .collect();
    write_csv(&config.paths.output("timeline.csv"), &header, &rows)?;
    write_json(&config.paths.output("simulate.json"), &out)?;
    Ok(out)
}

/// One row of the ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(flatten)]
    pub metrics: MetricRow,
}

/// Trains every configured variant and scores each on the shared
/// validation split; writes `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(config: &RunConfig) -> Result<Vec<AblationRow>, RunError> {
    let data = load_dataset(&config.paths.trace())?;
    let runs = run_ablation(
        &data,
        &config.mapper,
        &config.loss,
        &config.train_config(),
        &config.ablations,
    )?;
    let mut rows = Vec::new();
    for (variant, outcome) in &runs {
        let val = data.subset(&outcome.val_indices)?;
        for r in evaluate(&outcome.best, &val, &config.ratios)? {
            rows.push(AblationRow {
                variant: variant.label.clone(),
                metrics: MetricRow::from(&r),
            });
        }
    }
    let mut header = vec!["variant".to_string()];
    header.extend(MetricRow::header());
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            std::iter::once(r.variant.clone())
                .chain(r.metrics.cells())
                .collect()
        })
        .collect();
    write_csv(&config.paths.output("ablation.csv"), &header, &cells)?;
    write_json(&config.paths.output("ablation.json"), &rows)?;
    Ok(rows)
}
