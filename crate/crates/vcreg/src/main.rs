use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vcreg::commands;
use vcreg::config::{ConfigLevel, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "vcreg",
    version,
    about = "Variance-covariance regularization experiments at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the configured model, one run per seed
    Train {
        /// Experiment TOML
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this single seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Linear probe on a checkpoint's penultimate features
    Probe {
        #[arg(long)]
        config: PathBuf,
        /// checkpoint.json written by train
        #[arg(long)]
        checkpoint: PathBuf,
        /// Label level: label, sub_label, or super_label
        #[arg(long, default_value = "label")]
        level: String,
        /// Probe a different dataset seed than the checkpoint's
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Time identity/naive/fast/bn_like variants of one scenario
    Bench {
        /// Scenario TOML
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train every cell of the config's alpha/beta grid
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (defaults to the config's jobs setting)
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Decision map CSV for a checkpoint over a 2-d dataset
    Boundary {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> vcreg::Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let outputs = commands::run_train(&cfg, &out)?;
            for o in &outputs {
                let f = &o.report.outcome;
                println!(
                    "seed {}: train {:.4} test {:.4} -> {}",
                    o.seed,
                    f.train_accuracy,
                    f.test_accuracy,
                    o.report_path.display()
                );
            }
        }
        Cmd::Probe {
            config,
            checkpoint,
            level,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let level = ConfigLevel::parse(&level)?;
            let o = commands::run_probe(&cfg, &checkpoint, level, seed, &out)?;
            println!(
                "probe at {} level: accuracy {:.4} (l2 {}) -> {}",
                o.report.level,
                o.report.accuracy,
                o.report.best_l2,
                o.report_path.display()
            );
        }
        Cmd::Bench { config, out } => {
            let (report, path) = commands::run_bench_cmd(&config, &out)?;
            print!("{}", commands::bench_summary(&report));
            println!("-> {}", path.display());
        }
        Cmd::Sweep { config, jobs, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (report, path) = commands::run_sweep(&cfg, jobs, &out)?;
            let ok = report.cells.iter().filter(|c| c.status == "ok").count();
            println!(
                "{ok}/{} cells succeeded -> {}",
                report.cells.len(),
                path.display()
            );
        }
        Cmd::Boundary {
            config,
            checkpoint,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path = commands::run_boundary(&cfg, &checkpoint, &out)?;
            println!("-> {}", path.display());
        }
    }
    Ok(())
}
