// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use endp_cli::{commands, Config, Overrides};

/// Ensemble density propagation experiments.
#[derive(Parser)]
#[command(name = "endp", version)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from or to evaluate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write records.csv, records.json and checkpoints/.
    Train,
    /// Evaluate a checkpoint under the configured conditions.
    Eval,
    /// Attack a checkpoint; writes attack.csv and, if configured, images.bin.
    Attack,
    /// Train one model per ensemble size.
    SweepN {
        /// Ensemble sizes, e.g. `10,50,200`.
        #[arg(long = "n", value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
    /// Compare the training gradient with finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 1e-2)]
        tolerance: f64,
    },
}

fn run(cli: Cli) -> Result<bool> {
    endp_cli::init_threads()?;
    let path = cli.config.context("--config is required")?;
    let cfg = Config::load(&path)?;
    let ov = Overrides {
        seed: cli.seed,
        out: cli.out,
        checkpoint: cli.checkpoint,
    };
    match cli.command {
        Command::Train => {
            let done = commands::train(&cfg, &ov)?;
            print!("{}", commands::summary_table(&done.records));
            println!("wrote {}", done.out.join("records.csv").display());
        }
        Command::Eval => {
            let r = commands::eval(&cfg, &ov)?;
            print!("{}", commands::summary_table(std::slice::from_ref(&r)));
        }
        Command::Attack => {
            for r in commands::attack(&cfg, &ov)? {
                let hit = r.target_hit_rate.map_or_else(|| "-".into(), |h| format!("{h:.4}"));
                println!("{:<20} accuracy {:.4}  target hit rate {hit}", r.condition, r.accuracy);
            }
        }
        Command::SweepN { sizes } => {
            println!("{:>6} {:>9} {:>14}", "N", "accuracy", "epoch seconds");
            for r in commands::sweep_n(&cfg, &ov, &sizes)? {
                println!("{:>6} {:>9.4} {:>14.2}", r.n, r.accuracy, r.epoch_seconds);
            }
        }
        Command::CheckGrad { tolerance } => {
            let r = commands::check_grad(&cfg, &ov, tolerance)?;
            println!(
                "max relative error {:.3e} at coordinate {} over {} coordinates: {}",
                r.max_rel_error,
                r.worst_index,
                r.coordinates,
                if r.passed { "pass" } else { "FAIL" }
            );
            return Ok(r.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
