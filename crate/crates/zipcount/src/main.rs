//! `zipcount` command-line interface.
//!
//! Exit codes: 0 on success, 1 on validation or check failure, 2 on usage
//! errors (from clap).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use zipcount::blockgrid::{default_bins, BinScheme};
use zipcount::cli::{
    cmd_eval, cmd_grad_check, cmd_gt_map, cmd_stats, cmd_train_demo, with_worker_pool,
    GtMapOptions, StatsOptions, TrainDemoConfig,
};

#[derive(Parser)]
#[command(
    name = "zipcount",
    version,
    about = "Blockwise zero-inflated Poisson count modeling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of annotation JSON files into .bcm count maps.
    GtMap {
        /// Directory of annotation JSON documents.
        #[arg(long)]
        ann_dir: PathBuf,
        /// Output directory for the .bcm maps and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Block size in pixels.
        #[arg(long, default_value_t = 16)]
        block: usize,
        /// Worker threads (falls back to ZIPCOUNT_WORKERS, then all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Blockwise count histograms and zero fractions over .bcm maps.
    Stats {
        #[arg(long)]
        map_dir: PathBuf,
        /// Optional output directory for report.json and the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Roll the histogram up into the default bin scheme of this block size.
        #[arg(long)]
        block: Option<usize>,
        /// Roll the histogram up into a bin scheme from a JSON config file.
        #[arg(long)]
        bins: Option<PathBuf>,
    },
    /// Verify every analytic gradient against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Randomized instances per gradient term.
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        /// Optional output directory for report.json and the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the reference model on a synthetic corpus and report the
    /// ZIP-vs-Poisson comparison, counting metrics and the structural-zero AUC.
    TrainDemo {
        /// JSON config; flags below override individual fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Cross-entropy weight in the total loss.
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        block: Option<usize>,
        /// Worker threads for corpus generation.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Score a prediction CSV against ground-truth annotations.
    Eval {
        /// CSV with header `image_id,count`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        ann_dir: PathBuf,
        /// Optional output directory for report.json and the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn run(cli: Cli) -> zipcount::Result<bool> {
    match cli.command {
        Command::GtMap {
            ann_dir,
            out,
            block,
            workers,
        } => {
            let report = cmd_gt_map(&GtMapOptions {
                ann_dir,
                out_dir: out,
                block,
                workers,
            })?;
            print!("{}", report.text());
            Ok(report.ok())
        }
        Command::Stats {
            map_dir,
            out,
            block,
            bins,
        } => {
            let scheme: Option<BinScheme> = match (bins, block) {
                (Some(path), _) => Some(BinScheme::from_json_file(&path)?),
                (None, Some(block)) => Some(default_bins(block)?),
                (None, None) => None,
            };
            let report = cmd_stats(&StatsOptions {
                map_dir,
                out_dir: out,
                bins: scheme,
            })?;
            print!("{}", report.text());
            Ok(true)
        }
        Command::GradCheck { seed, trials, out } => {
            let report = cmd_grad_check(seed, trials, None)?;
            if let Some(out) = &out {
                std::fs::create_dir_all(out)?;
                std::fs::write(
                    out.join("report.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
                std::fs::write(
                    out.join("manifest.json"),
                    serde_json::to_string_pretty(&report.manifest)?,
                )?;
            }
            print!("{}", report.text());
            Ok(report.passed)
        }
        Command::TrainDemo {
            config,
            out,
            seed,
            omega,
            block,
            workers,
        } => {
            let mut cfg = match config {
                Some(path) => TrainDemoConfig::from_json_file(&path)?,
                None => TrainDemoConfig::default(),
            };
            // Flags win over the config file.
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(omega) = omega {
                cfg.omega = omega;
            }
            if let Some(block) = block {
                cfg.block = block;
            }
            let report = with_worker_pool(workers, || cmd_train_demo(&cfg, &out))?;
            print!("{}", report.text());
            Ok(true)
        }
        Command::Eval {
            pred,
            ann_dir,
            out,
            workers,
        } => {
            let report = cmd_eval(&pred, &ann_dir, out.as_deref(), workers)?;
            print!("{}", report.text());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
