use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use optcharge::commands::{compare_cmd, eval_cmd, gen_data, gradcheck_cmd, train_cmd};
use optcharge::{EvalTarget, Experiment, Overrides};
use optcharge_core::learner::TrainMode;

#[derive(Debug, Parser)]
#[command(name = "optcharge", version, about = "Decision-focused demand forecasting for EV charging stations")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,

    /// Training regime.
    #[arg(long, global = true)]
    mode: Option<TrainMode>,

    /// Number of training rows to use.
    #[arg(long, global = true)]
    samples: Option<usize>,

    /// Experiment seed; overrides the configuration.
    #[arg(long, global = true, env = "OPTCHARGE_SEED")]
    seed: Option<u64>,

    /// Concurrent training runs in `compare`.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Output directory; overrides the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a customer population and write the train and test sets.
    GenData,
    /// Train a forecaster and write its checkpoint and trace.
    Train,
    /// Score a checkpoint (or the true demand laws) on the test set.
    Eval {
        /// Checkpoint to score; defaults to the one `train` wrote for `--mode`.
        #[arg(long, conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the true demand laws instead of a trained model.
        #[arg(long)]
        oracle: bool,
    },
    /// Train both regimes across sample sizes and seeds and tabulate the results.
    Compare,
    /// Check the implicit gradients against finite differences.
    Gradcheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        mode: cli.mode,
        samples: cli.samples,
        seed: cli.seed,
        jobs: cli.jobs,
        out: cli.out,
    };
    let run = || -> optcharge::Result<()> {
        let exp = Experiment::load(&cli.config)?;
        match cli.command {
            Command::GenData => gen_data(&exp, &overrides).map(drop),
            Command::Train => train_cmd(&exp, &overrides).map(drop),
            Command::Eval { checkpoint, oracle } => {
                let target = match (checkpoint, oracle) {
                    (_, true) => EvalTarget::Oracle,
                    (Some(path), false) => EvalTarget::Checkpoint(path),
                    (None, false) => EvalTarget::Trained(overrides.mode.unwrap_or(exp.config.train.mode)),
                };
                eval_cmd(&exp, &overrides, &target).map(drop)
            }
            Command::Compare => compare_cmd(&exp, &overrides).map(drop),
            Command::Gradcheck => gradcheck_cmd(&exp, &overrides).map(drop),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
