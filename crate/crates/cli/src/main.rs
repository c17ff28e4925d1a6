use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use grucnn_core::experiment::{self, ExperimentConfig, Overrides, Precision, TrainOptions};
use grucnn_core::Error;

/// Recurrent convolutional classifiers on noisy image sequences.
#[derive(Parser, Debug)]
#[command(name = "grucnn", version)]
struct Cli {
    /// Experiment config (TOML). Without one the desk-scale defaults are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output (run) directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Floating-point precision of training and evaluation.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    /// Independent runs processed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the toyset (or validate CIFAR-10 files) and print corpus statistics.
    Generate,
    /// Train every configured run and seed, resuming from checkpoints.
    Train {
        /// Stop each run after this many updates (a checkpoint is written).
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Evaluate checkpoints on the test protocol and write prediction tables.
    Eval,
    /// Analyse prediction tables and write the report.
    Report,
    /// Print the resolved configuration.
    Config,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Format { .. }
        | Error::MissingPath(_)
        | Error::Io { .. }
        | Error::Json(_)
        | Error::CheckpointMismatch(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        precision: cli.precision.as_deref().map(|p| if p == "32" { Precision::F32 } else { Precision::F64 }),
    });
    cfg.validate()?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()?),
        Command::Generate => {
            let s = experiment::run_generate(&cfg)?;
            println!("train images {}  test images {}", s.train_images, s.test_images);
            println!("raw pixel mean {:.4} std {:.4}", s.raw.mean, s.raw.std);
            println!("normalized pixel mean {:.2e} std {:.6}", s.normalized.mean, s.normalized.std);
            println!("digest {}", s.digest);
        }
        Command::Train { max_steps } => {
            let out = experiment::run_train(&cfg, &TrainOptions { jobs: cli.jobs, max_steps })?;
            for o in out {
                let loss = o.final_loss.map_or("-".into(), |l| format!("{l:.4}"));
                let state = if o.finished { "done" } else { "stopped" };
                println!("{}  {state}  steps {}  last loss {loss}", o.name, o.steps);
            }
        }
        Command::Eval => {
            for p in experiment::run_eval(&cfg, cli.jobs)? {
                println!("{}", p.display());
            }
        }
        Command::Report => {
            let r = experiment::run_report(&cfg)?;
            for m in &r.accuracy_curves {
                for c in &m.curves {
                    let first = c.percent.first().copied().unwrap_or(f64::NAN);
                    let last = c.percent.last().copied().unwrap_or(f64::NAN);
                    let mode = if c.bayes { "bayes" } else { "raw" };
                    println!(
                        "{}-{} {mode:5} snr {:>5}  frame 0 {first:6.2}%  last {last:6.2}%",
                        m.model, m.train_set, c.snr
                    );
                }
            }
            for g in &r.gaps {
                println!("gap: {g}");
            }
            println!("report written to {}", cfg.out.join("report").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
