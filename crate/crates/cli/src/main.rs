//! `kpf`: simulate articulated scenes, fuse detector runs, group parts into
//! instances, match against ground truth and evaluate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "kpf", version, about = "Kinematics-aware part fusion toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML or JSON config file (format chosen by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate scenes and simulated detector runs.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Seed of the first scene; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of scenes, seeded consecutively.
        #[arg(long, default_value_t = 1)]
        scenes: u64,
    },
    /// Fuse the runs of every scene into one set of parts.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        runs: PathBuf,
        /// nms-only, oversampled, fused-box-iou or kpf.
        #[arg(long, default_value = "kpf")]
        pipeline: String,
    },
    /// Group fused parts into instances.
    Group {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        parts: PathBuf,
        /// Embedding distance threshold; defaults to twice the training margin 0.5.
        #[arg(long)]
        tau_z: Option<f64>,
    },
    /// Hungarian matching with per-pair loss terms.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        parts: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Occupancy samples per matched pair.
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Detection and joint metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        parts: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Instance groups; parts are grouped at the default threshold when absent.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Overrides the config seed used for surface sampling.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate several report.json files into one CSV.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { common, seed, scenes } => commands::simulate(&common, seed, scenes),
        Command::Fuse { common, runs, pipeline } => commands::fuse(&common, &runs, &pipeline),
        Command::Group { common, parts, tau_z } => commands::group(&common, &parts, tau_z),
        Command::Match { common, parts, truth, samples, seed } => commands::match_parts(&common, &parts, &truth, samples, seed),
        Command::Eval { common, parts, truth, instances, seed } => {
            commands::eval(&common, &parts, &truth, instances.as_deref(), seed)
        }
        Command::Report { common, reports } => commands::report(&common, &reports),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kpf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
