use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use raydf::cli::{self, Stage, Sweep};
use raydf::config::RunConfig;

#[derive(Parser)]
#[command(name = "raydf", version, about = "Ray-surface distance fields from depth scans")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render ground-truth scans and build the training store.
    Generate,
    /// Train the visibility classifier, the distance field, or both.
    Train {
        #[arg(long, default_value = "both")]
        stage: Stage,
        /// Classifier checkpoint for `--stage distance`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render views from a distance-field checkpoint.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute metrics on the test views.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate rendered rasters in this directory instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        rasters: Option<PathBuf>,
    },
    /// Retrain with one setting varied and tabulate the metrics.
    Ablate {
        #[arg(long)]
        sweep: Sweep,
    },
}

fn run(args: Args) -> raydf::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    let stdout = &mut std::io::stdout();
    match args.command {
        Command::Generate => cli::cmd_generate(&cfg, stdout),
        Command::Train { stage, checkpoint } => cli::cmd_train(&cfg, stage, checkpoint.as_deref(), stdout),
        Command::Render { checkpoint } => cli::cmd_render(&cfg, checkpoint.as_deref(), stdout).map(drop),
        Command::Eval { checkpoint, rasters } => cli::cmd_eval(&cfg, checkpoint.as_deref(), rasters.as_deref(), stdout).map(drop),
        Command::Ablate { sweep } => cli::cmd_ablate(&cfg, &sweep, stdout).map(drop),
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
