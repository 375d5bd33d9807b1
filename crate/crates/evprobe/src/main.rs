//! Command-line front end for the evidence probing experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use evprobe::experiments::{
    self, default_lambda_grid, ExperimentConfig, ToyOptions,
};

#[derive(Parser)]
#[command(name = "evprobe", version, about = "Score representations by Bayesian probe evidence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full comparison grid and emit table JSON + CSV.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Weight decay sweep at fixed precisions for one task and representation.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        rep: Option<String>,
        /// Probe depth; 0 is a linear probe.
        #[arg(long, default_value_t = 0)]
        depth: usize,
        /// Comma-separated precision grid; defaults to 1e-4..1e8.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Per-parameter precision (ARD) run with a linear probe.
    Ard {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        rep: Option<String>,
    },
    /// Two-dimensional toy comparison of representations and probes.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-render comparison outputs from serialized fits, no retraining.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> evprobe::Result<bool> {
    match cli.command {
        Command::Compare { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let table = experiments::run_comparison(&cfg)?;
            println!(
                "wrote {} cells to {}",
                table.cells.len(),
                cfg.output_dir.display()
            );
            if table.any_errors() {
                for cell in table.cells.iter().filter(|c| !c.errors.is_empty()) {
                    eprintln!(
                        "cell ({}, {}) had failures: {}",
                        cell.task,
                        cell.representation,
                        cell.errors.join("; ")
                    );
                }
                return Ok(false);
            }
            Ok(true)
        }
        Command::Sweep {
            config,
            task,
            rep,
            depth,
            grid,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let grid = grid.unwrap_or_else(default_lambda_grid);
            let path = experiments::run_decay_sweep(
                &cfg,
                task.as_deref(),
                rep.as_deref(),
                depth,
                &grid,
            )?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Ard { config, task, rep } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path = experiments::run_ard(&cfg, task.as_deref(), rep.as_deref())?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Toy { out, seed } => {
            let opts = ToyOptions {
                seed,
                ..ToyOptions::default()
            };
            let result = experiments::run_toy(&opts, Some(&out))?;
            for (key, lz) in &result.log_evidences {
                println!("{key}: log evidence {lz:.2}");
            }
            Ok(true)
        }
        Command::Report { dir } => {
            let table = experiments::report(&dir)?;
            println!("re-rendered {} cells in {}", table.cells.len(), dir.display());
            Ok(!table.any_errors())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
