use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sain::cli::{self, CliError, Overrides, SplitSelector};
use sain::gradcheck::REL_TOLERANCE;
use sain::train::ModelKind;

#[derive(Parser)]
#[command(name = "sain", version, about = "Hybrid rating prediction: SAIN and BiasedMF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a run manifest.
    Train {
        manifest: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Evaluate a checkpoint on one split of its dataset.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitSelector,
        /// Report path (default: eval_<split>.json next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one rating and show the integration gates.
    Predict {
        checkpoint: PathBuf,
        user: String,
        item: String,
    },
    /// Export per-head attention matrices for one pair as CSV.
    Attention {
        checkpoint: PathBuf,
        user: String,
        item: String,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Train one SAIN model per top-K value and tabulate test metrics.
    SweepK {
        manifest: PathBuf,
        /// Comma-separated K values (default 2,4,8,m+n).
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Seeds per K; results are averaged.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Finite-difference certification of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            model: a.model,
            output_dir: a.output_dir,
            seed: a.seed,
            max_epochs: a.max_epochs,
            batch_size: a.batch_size,
            patience: a.patience,
            lr: a.lr,
            weight_decay: a.weight_decay,
            dim: a.dim,
            top_k: a.top_k,
            dropout: a.dropout,
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { manifest, overrides } => {
            let s = cli::cmd_train(&manifest, &overrides.into())?;
            println!(
                "checkpoint={} best_epoch={} epochs={} val_rmse={}",
                s.checkpoint.display(),
                s.best_epoch,
                s.epochs_run,
                s.best_val_rmse
            );
        }
        Command::Evaluate { checkpoint, split, out } => {
            let r = cli::cmd_evaluate(&checkpoint, split, out.as_deref())?;
            println!("RMSE={} MAE={} N={}", r.rmse, r.mae, r.n);
        }
        Command::Predict { checkpoint, user, item } => {
            let p = cli::cmd_predict(&checkpoint, &user, &item)?;
            match p.gates {
                Some((gu, gi)) => println!("score={} gate_user={gu} gate_item={gi}", p.score),
                None => println!("score={}", p.score),
            }
        }
        Command::Attention {
            checkpoint,
            user,
            item,
            out_dir,
        } => {
            for path in cli::cmd_attention(&checkpoint, &user, &item, &out_dir)? {
                println!("{}", path.display());
            }
        }
        Command::SweepK {
            manifest,
            k,
            repeats,
            overrides,
        } => {
            let (path, rows) = cli::cmd_sweep(&manifest, &overrides.into(), &k, repeats)?;
            for r in rows {
                println!("k={} test_rmse={} test_mae={}", r.k, r.test_rmse, r.test_mae);
            }
            println!("{}", path.display());
        }
        Command::Gradcheck { seeds } => {
            let reports = cli::cmd_gradcheck(seeds)?;
            let mut worst = 0.0f64;
            for r in &reports {
                worst = worst.max(r.max_rel_error());
            }
            let failed = reports.iter().filter(|r| !r.passed()).count();
            println!(
                "fixtures={} failed={failed} max_rel_error={worst:e} tolerance={REL_TOLERANCE:e}",
                reports.len()
            );
            if failed > 0 {
                std::process::exit(11);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
