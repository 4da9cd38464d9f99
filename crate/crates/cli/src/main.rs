use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Synthetic-data segmentation distillation: data generation, teacher
/// training, distillation, evaluation and loss verification.
#[derive(Debug, Parser)]
#[command(name = "i2ckd", version)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train a teacher network on the task loss.
    TrainTeacher(TrainArgs),
    /// Train a student against a frozen teacher.
    Distill(DistillArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every op and loss.
    GradCheck(GradCheckArgs),
    /// Evaluate the loss terms on dumped tensors.
    LossEval(LossEvalArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Number of classes, including background.
    #[arg(long)]
    classes: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory written by `gen-data`. Without it the dataset is
    /// generated in memory from the config.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct LossArgs {
    #[arg(long)]
    lambda_sm: Option<f64>,
    #[arg(long)]
    lambda_i2ckd: Option<f64>,
    /// Triplet margin.
    #[arg(long)]
    margin: Option<f64>,
    /// Softmax temperature of the channel KL term.
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Debug, Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    loss: LossArgs,
    /// Teacher checkpoint directory.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Run the three-row loss ablation over the configured seeds.
    #[arg(long)]
    ablation: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[command(flatten)]
    common: Common,
    /// Central-difference step.
    #[arg(long)]
    perturb: Option<f64>,
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Debug, Args)]
struct LossEvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    loss: LossArgs,
    /// Directory holding features_t.stf, features_s.stf, scores_t.stf,
    /// scores_s.stf and mask.stf.
    #[arg(long)]
    dumps: Option<PathBuf>,
    /// Recompute everything with the brute-force references and require
    /// agreement.
    #[arg(long)]
    reference: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::VerificationFailed>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
