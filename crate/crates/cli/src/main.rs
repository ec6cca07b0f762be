//! Command-line driver: reproducible data generation, training,
//! completion, ablation sweeps, and artifact inspection on top of the
//! core library. Every run is described by one JSON config (plus
//! `--set` overrides) whose hash stamps the artifacts it produces.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ensemblegen_core::CoreError;

/// CLI-level error with a process exit code: 2 for usage and
/// configuration mistakes, 3 for unreadable or malformed data, 4 for
/// numerical failures inside an otherwise well-posed run.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Core(CoreError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Data(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                CoreError::Contract(_) | CoreError::Dimension { .. } => 2,
                CoreError::Format { .. } | CoreError::Io(_) | CoreError::Json(_) => 3,
                CoreError::Numerical(_) | CoreError::Domain(_) => 4,
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ensemblegen",
    version,
    about = "Ensemble field reconstruction: constrained per-realization VAEs with GP latent completion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to an ENSB file in the output directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. --set data.synthetic.seed=7.
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
        /// File name inside the output directory.
        #[arg(long, default_value = "data.ensb")]
        out: String,
    },
    /// Train the constrained per-realization ensemble; write checkpoints,
    /// the anchor set, and loss traces.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
        /// Shorthand for --set plan.lambda=VALUE.
        #[arg(long)]
        lambda: Option<f64>,
        /// Worker threads for independent model fits.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Reconstruct the held-out realization from trained checkpoints:
    /// mask, complete the latent field, decode, and score.
    Complete {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
        /// Shorthand for --set eval.alpha=VALUE.
        #[arg(long)]
        alpha: Option<f64>,
        /// Shorthand for --set eval.held_out=VALUE.
        #[arg(long)]
        held_out: Option<usize>,
        /// Directory holding model_r*.lccv and anchor_set.json
        /// (defaults to the configured output directory).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Sweep training-set size, coverage, policy, and seed; write the
    /// summary CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
        /// Worker threads; cells are independent and results do not
        /// depend on the thread count.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print a JSON summary of an artifact to stdout.
    Inspect {
        /// An ENSB dataset file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// A model checkpoint; includes a parameter-count audit.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// An evaluation report JSON file.
        #[arg(long)]
        report: Option<PathBuf>,
        /// A completed latent field CSV.
        #[arg(long)]
        latent_field: Option<PathBuf>,
    },
    /// Convert a flat CSV (realization,lat,lon,month_index,value) to ENSB.
    ImportCsv {
        #[arg(long)]
        input: PathBuf,
        /// Destination ENSB path.
        #[arg(long)]
        out: PathBuf,
        /// Calendar year of month_index 0.
        #[arg(long, default_value_t = 1979)]
        start_year: i32,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, set, out } => commands::gen_data(&config, &set, &out),
        Command::Train { config, set, lambda, workers } => {
            commands::train(&config, &set, lambda, workers)
        }
        Command::Complete { config, set, alpha, held_out, checkpoints } => {
            commands::complete(&config, &set, alpha, held_out, checkpoints.as_deref())
        }
        Command::Ablate { config, set, workers } => commands::ablate(&config, &set, workers),
        Command::Inspect { data, checkpoint, report, latent_field } => {
            commands::inspect(
                data.as_deref(),
                checkpoint.as_deref(),
                report.as_deref(),
                latent_field.as_deref(),
            )
        }
        Command::ImportCsv { input, out, start_year } => {
            commands::import_csv(&input, &out, start_year)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
