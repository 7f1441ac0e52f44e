//! papforge command-line interface: builds generalizable parallel algorithm
//! portfolios for binary optimization problems and runs the surrounding
//! evaluation, analysis and verification pipelines.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use manifest::{Manifest, Scale};

#[derive(Parser)]
#[command(
    name = "papforge",
    version,
    about = "Co-evolve parallel algorithm portfolios for binary optimization problems"
)]
struct Cli {
    /// Path to the JSON run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    /// Output directory (overrides the manifest's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed (overrides the manifest's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to PAPFORGE_WORKERS or the core count.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Sampling scale preset.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    scale: Scale,

    /// Overwrite completed outputs.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the shared surrogate networks and per-instance embeddings.
    NirTrain,
    /// Full co-evolution run with embedding-space instance generation.
    DaceRun,
    /// Baseline co-evolution run with the domain-specific instance generator.
    CepsRun,
    /// Apply a portfolio to the manifest's test instances (20 repetitions
    /// per instance by default).
    Evaluate {
        /// Portfolio checkpoint (pap.json) to evaluate.
        #[arg(long, conflicts_with = "baseline")]
        pap: Option<PathBuf>,
        /// Evaluate the manual baseline portfolio instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Extract neighborhood features and 2D projections.
    Features {
        /// Run directory whose surrogate pool should be included.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Closest-instance verification of surrogate fidelity.
    OnemaxVerify,
    /// Emit CSV/JSON reports from a completed run directory.
    Report {
        /// Run directory to summarize.
        #[arg(long)]
        run: PathBuf,
    },
}

/// Kind of portfolio the evaluate command applies.
pub enum PapSource {
    Baseline,
    File(PathBuf),
}

/// One JSON log line on stderr.
pub fn log_line(level: &str, msg: &str) {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    eprintln!(
        "{}",
        serde_json::json!({ "ts": ts, "level": level, "msg": msg })
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let workers = cli
        .workers
        .or_else(|| {
            std::env::var("PAPFORGE_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(num_cpus);
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
    {
        log_line("warn", &format!("worker pool already initialized: {e}"));
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log_line("error", &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn num_cpus() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut manifest = match &cli.manifest {
        Some(path) => Manifest::load(path)?,
        None => Manifest::defaults(),
    };
    if let Some(seed) = cli.seed {
        manifest.seed = seed;
    }
    let scale = cli.scale;
    let force = cli.force;

    match cli.command {
        Command::NirTrain => {
            let out = commands::resolve_out(cli.out, &manifest, "nir-train-out");
            commands::nir_train(&manifest, scale, &out, force)
        }
        Command::DaceRun => {
            let out = commands::resolve_out(cli.out, &manifest, "dace-run-out");
            commands::dace_run(&manifest, scale, &out, force)
        }
        Command::CepsRun => {
            let out = commands::resolve_out(cli.out, &manifest, "ceps-run-out");
            commands::ceps_run(&manifest, scale, &out, force)
        }
        Command::Evaluate { pap, baseline } => {
            let source = match (pap, baseline) {
                (Some(path), false) => PapSource::File(path),
                (None, true) => PapSource::Baseline,
                (None, false) => anyhow::bail!("pass --pap <pap.json> or --baseline"),
                (Some(_), true) => unreachable!("clap conflicts_with"),
            };
            let out = commands::resolve_out(cli.out, &manifest, "evaluate-out");
            commands::evaluate(&manifest, scale, &source, &out, force)
        }
        Command::Features { run } => {
            let out = commands::resolve_out(cli.out, &manifest, "features-out");
            commands::features(&manifest, scale, run.as_deref(), &out, force)
        }
        Command::OnemaxVerify => {
            let out = commands::resolve_out(cli.out, &manifest, "onemax-verify-out");
            commands::onemax_verify(&manifest, &out, force).map(|_| ())
        }
        Command::Report { run } => {
            let out = commands::resolve_out(cli.out, &manifest, "report-out");
            commands::report(&run, &out, force)
        }
    }
}
