use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use projectnet::experiments::{self, ExperimentConfig, RunOutput};
use projectnet::{Error, Result};

/// Runs learned-projection experiments from JSON configs.
#[derive(Parser)]
#[command(name = "projectnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write report.json, metrics.csv and checkpoints.
    Run(Opts),
    /// Time ProjectNet and oracle-in-the-loop training over a size sweep.
    Bench(Opts),
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Opts {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output` or `out/<id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for batch solves.
    #[arg(long)]
    threads: Option<usize>,
}

fn prepare(opts: &Opts) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(n) = opts.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    let out = opts
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("out").join(cfg.experiment.id()));
    Ok((cfg, out))
}

fn execute(opts: &Opts, f: fn(&ExperimentConfig) -> Result<RunOutput>) -> Result<()> {
    let (cfg, out) = prepare(opts)?;
    let run = f(&cfg)?;
    run.write(&out)?;
    for row in &run.report.rows {
        let setting = row.setting.as_deref().map(|s| format!(" [{s}]")).unwrap_or_default();
        println!("{}{setting}: {:.6}", row.method, row.mean_cost);
    }
    for (k, v) in &run.report.summary {
        println!("{k}: {v:.6}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(opts) => execute(opts, experiments::run),
        Command::Bench(opts) => execute(opts, experiments::bench),
        Command::Validate { config } => {
            let findings = match std::fs::read_to_string(config) {
                Ok(text) => ExperimentConfig::diagnose(&text),
                Err(e) => vec![format!("cannot read {}: {e}", config.display())],
            };
            if findings.is_empty() {
                println!("ok");
                return ExitCode::SUCCESS;
            }
            for f in &findings {
                println!("{f}");
            }
            return ExitCode::from(1);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiments::exit_code(&e))
        }
    }
}
