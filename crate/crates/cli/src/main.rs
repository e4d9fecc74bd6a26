mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bad input or configuration; exits with status 2.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

#[derive(Parser)]
#[command(name = "xdr", version, about = "Cross-domain deep-cascade MRI reconstruction")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; falls back to the config, then $XDR_OUTPUT_DIR, then ./xdr-output.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Overrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Acceleration factor of the undersampling masks.
    #[arg(long)]
    pub accel: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a sampling mask.
    Mask(commands::MaskArgs),
    /// Convert an image directory into complex slices with synthetic phase.
    Synth(commands::SynthArgs),
    /// Train a cascade on one configured dataset.
    Train {
        #[arg(long)]
        dataset: String,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Reconstruct one slice with a checkpoint.
    Recon(commands::ReconArgs),
    /// Evaluate a checkpoint on the test split of a configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Row label of the results (default: the checkpoint's training dataset).
        #[arg(long)]
        train_domain: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train on every train domain and evaluate on every test domain.
    Xdomain {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Patch-wise nearest-neighbour distances between datasets.
    Patchdist {
        #[arg(long)]
        seed: Option<u64>,
        /// Source tile size of the distance computation.
        #[arg(long)]
        block_size: Option<usize>,
        #[arg(long)]
        patch_norm: Option<String>,
        /// wilcoxon or mann-whitney.
        #[arg(long)]
        test: Option<String>,
    },
    /// Bundle tables and error images from earlier runs.
    Report,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ValidationError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<xdr_core::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            anyhow::bail!(ValidationError("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = commands::Context::new(cli.config.as_deref(), cli.output_dir)?;
    match cli.command {
        Command::Mask(a) => commands::mask(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train { dataset, overrides } => commands::train(ctx, &dataset, &overrides),
        Command::Recon(a) => commands::recon(ctx, a),
        Command::Eval {
            checkpoint,
            dataset,
            train_domain,
            overrides,
        } => commands::eval(ctx, &checkpoint, &dataset, train_domain, &overrides),
        Command::Xdomain { overrides } => commands::xdomain(ctx, &overrides),
        Command::Patchdist {
            seed,
            block_size,
            patch_norm,
            test,
        } => commands::patchdist(ctx, seed, block_size, patch_norm, test),
        Command::Report => commands::report(ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
