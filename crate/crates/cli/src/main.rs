use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use proxyprune_cli::{
    cmd_ablate, cmd_eval, cmd_gen, cmd_prune, cmd_simulate, cmd_train, ConfigError, RunConfig,
    RunError,
};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "proxyprune",
    version,
    about = "Proxy-scored KV-cache pruning laboratory"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace.
    Gen,
    /// Train the mapper on a trace.
    Train {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Report pruning metrics of a checkpoint on a trace.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Comma-separated retention ratios.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Write retained token indices for every sample of a trace.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Evaluate the latency profile and memory timeline.
    Simulate,
    /// Train and compare the configured ablation variants.
    Ablate {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

enum Failure {
    Config(ConfigError),
    Run(RunError),
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut config = RunConfig::load(cli.common.config.as_deref(), std::env::vars())?;
    if let Some(seed) = cli.common.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.common.out {
        config.paths.out_dir = out.clone();
    }
    match &cli.command {
        Command::Train { trace } | Command::Ablate { trace } => {
            if trace.is_some() {
                config.paths.trace = trace.clone();
            }
        }
        Command::Eval {
            checkpoint,
            trace,
            ratios,
        } => {
            config.paths.checkpoint = checkpoint.clone().or(config.paths.checkpoint);
            config.paths.trace = trace.clone().or(config.paths.trace);
            if let Some(r) = ratios {
                config.ratios = r.clone();
            }
        }
        Command::Prune {
            checkpoint,
            trace,
            ratio,
        } => {
            config.paths.checkpoint = checkpoint.clone().or(config.paths.checkpoint);
            config.paths.trace = trace.clone().or(config.paths.trace);
            config.prune_ratio = ratio.unwrap_or(config.prune_ratio);
        }
        Command::Gen | Command::Simulate => {}
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let config = resolve(cli).map_err(Failure::Config)?;
    match &cli.command {
        Command::Gen => {
            let path = cmd_gen(&config).map_err(Failure::Run)?;
            println!(
                "wrote {} samples to {}",
                config.generator.samples,
                path.display()
            );
        }
        Command::Train { .. } => {
            let s = cmd_train(&config).map_err(Failure::Run)?;
            println!(
                "trained {} (best epoch {:?}), checkpoint {} sha256 {}",
                s.variant,
                s.best_epoch,
                config.paths.checkpoint().display(),
                s.checksum
            );
            if let Some(m) = s.final_val_captured_mass {
                println!("validation captured mass at 0.2: {m:.4}");
            }
        }
        Command::Eval { .. } => {
            println!("ratio  captured_mass  overlap  spearman");
            for r in cmd_eval(&config).map_err(Failure::Run)? {
                println!(
                    "{:<5}  {:<13.4}  {:<7.4}  {:.4}",
                    r.ratio, r.captured_mass_ratio, r.topk_overlap, r.spearman
                );
            }
        }
        Command::Prune { .. } => {
            let p = cmd_prune(&config).map_err(Failure::Run)?;
            println!(
                "kept {} tokens per head over {} samples; {} bytes freed",
                p.k,
                p.retained.len(),
                p.bytes_saved
            );
        }
        Command::Simulate => {
            let s = cmd_simulate(&config).map_err(Failure::Run)?;
            println!(
                "dual: speedup {:.2} (budget {})",
                s.dual.speedup,
                if s.dual.budget_ok { "ok" } else { "exceeded" }
            );
            println!("shared: speedup {:.2}", s.shared.speedup);
            println!(
                "mapper share: {:.1}% dual, {:.1}% shared",
                100.0 * s.mapper_share_dual,
                100.0 * s.mapper_share_shared
            );
            println!("memory premium: {:.1}%", 100.0 * s.memory_premium);
        }
        Command::Ablate { .. } => {
            println!("variant      ratio  captured_mass  overlap  spearman");
            for r in cmd_ablate(&config).map_err(Failure::Run)? {
                let m = &r.metrics;
                println!(
                    "{:<11}  {:<5}  {:<13.4}  {:<7.4}  {:.4}",
                    r.variant, m.ratio, m.captured_mass_ratio, m.topk_overlap, m.spearman
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
