//! Command-line front end: argument parsing, config resolution, dispatch,
//! and the exit-code contract (0 success, 1 internal/numeric failure,
//! 2 usage or configuration error).

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod results;
pub mod triggerfile;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Result;
use commands::Ctx;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "ibau",
    version,
    about = "Poison a small classifier with backdoor triggers, then remove them by minimax unlearning with implicit hypergradients"
)]
struct Cli {
    /// Config file (key=value lines, # comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// Master seed: re-seeds every pipeline stage deterministically.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic blob data and write train/defense/test CSVs.
    GenData,
    /// Inject the configured backdoor into the training CSV.
    Poison {
        /// Clean training CSV (default: <out>/train.csv).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the classifier on a (poisoned) CSV and save a checkpoint.
    Train {
        /// Training CSV (default: <out>/train_poisoned.csv).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Remove backdoors from a checkpoint using clean data only.
    Unlearn {
        /// Poisoned model checkpoint (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Clean defense CSV (default: <out>/defense.csv).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trigger plan for per-round evaluation (default: <out>/plan.trigger).
        #[arg(long)]
        trigger_file: Option<PathBuf>,
        /// Test CSV for per-round evaluation (default: <out>/test.csv).
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Measure ACC/ASR of a checkpoint under a stored trigger plan.
    AttackEval {
        /// Checkpoint to evaluate (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trigger plan file (default: <out>/plan.trigger).
        #[arg(long)]
        trigger_file: Option<PathBuf>,
        /// Clean test CSV (default: <out>/test.csv).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Optional training CSV for the error-gap diagnostic.
        #[arg(long)]
        train_csv: Option<PathBuf>,
    },
    /// Verify the hypergradient core against closed-form oracles.
    OracleCheck {
        /// Use exact oracle Hessian products (tightens the threshold to 1e-8).
        #[arg(long)]
        analytic_hvp: bool,
    },
    /// Run the pipeline across one axis and tabulate the results.
    Sweep {
        /// norm_bound | poison_ratio | clean_size | seed
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values (defaults depend on the axis).
        #[arg(long)]
        values: Option<String>,
    },
}

fn build_ctx(cli: &Cli) -> Result<Ctx> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.apply_master_seed(seed);
    }
    std::fs::create_dir_all(&cli.out)
        .map_err(|e| crate::error::Error::io(&cli.out, e))?;
    Ok(Ctx {
        cfg,
        out: cli.out.clone(),
        force: cli.force,
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let ctx = build_ctx(cli)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Poison { data } => commands::poison_cmd(&ctx, data.as_deref()),
        Command::Train { data } => commands::train_cmd(&ctx, data.as_deref()),
        Command::Unlearn {
            checkpoint,
            data,
            trigger_file,
            test,
        } => commands::unlearn_cmd(
            &ctx,
            checkpoint.as_deref(),
            data.as_deref(),
            trigger_file.as_deref(),
            test.as_deref(),
        ),
        Command::AttackEval {
            checkpoint,
            trigger_file,
            test,
            train_csv,
        } => commands::attack_eval(
            &ctx,
            checkpoint.as_deref(),
            trigger_file.as_deref(),
            test.as_deref(),
            train_csv.as_deref(),
        ),
        Command::OracleCheck { analytic_hvp } => commands::oracle_check(&ctx, *analytic_hvp),
        Command::Sweep { axis, values } => commands::sweep(&ctx, axis, values.as_deref()),
    }
}

/// Entry point for the `ibau` binary. Returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/version through the error path too; those are
            // successes, genuine usage errors exit 2.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
