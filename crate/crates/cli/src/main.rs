use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hierslu::experiment;
use hierslu::{Error, ExperimentConfig};

/// Hierarchical conversation model for spoken dialog act recognition.
#[derive(Parser)]
#[command(name = "hierslu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a single config value, e.g. `--set training.learning_rate=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into <output_dir>/corpus.
    GenData(Common),
    /// Train a model and write checkpoint.bin and metrics.jsonl.
    Train(Common),
    /// Evaluate a checkpoint and write eval_report.{json,txt}.
    Eval(Common),
    /// Finite-difference gradient verification on a tiny model.
    Gradcheck(Common),
    /// Multi-seed ablation table and DropFrame sweep.
    Ablate(Common),
}

fn run(cli: Cli) -> Result<(), Error> {
    let (Command::GenData(c) | Command::Train(c) | Command::Eval(c) | Command::Gradcheck(c) | Command::Ablate(c)) =
        &cli.command;
    let cfg = ExperimentConfig::load(&c.config, &c.overrides)?;
    match cli.command {
        Command::GenData(_) => {
            let dir = experiment::gen_data(&cfg)?;
            println!("corpus written to {}", dir.display());
        }
        Command::Train(_) => {
            let summary = experiment::run_train(&cfg, |r| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  dev macro-F1 {:.4}  {:.2}s",
                    r.epoch, r.losses.total, r.dev_macro_f1, r.wall_secs
                )
            })?;
            println!(
                "best epoch {} dev macro-F1 {:.4} after {} epochs",
                summary.best_epoch, summary.best_dev_macro_f1, summary.epochs_run
            );
        }
        Command::Eval(_) => {
            let report = experiment::run_eval(&cfg)?;
            print!("{}", report.to_table());
        }
        Command::Gradcheck(_) => {
            let report = experiment::run_gradcheck(&cfg)?;
            println!(
                "{} tensors checked, max relative error {:.3e} (tolerance {:.0e})",
                report.checks.len(),
                report.max_rel_error,
                report.tolerance
            );
            if !report.passed {
                let worst = report
                    .checks
                    .iter()
                    .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
                    .expect("at least one check");
                return Err(Error::Numerical {
                    index: 0,
                    message: format!("gradient check failed on {} / {}", worst.case, worst.tensor),
                });
            }
        }
        Command::Ablate(_) => {
            let report = experiment::run_ablate(&cfg)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
