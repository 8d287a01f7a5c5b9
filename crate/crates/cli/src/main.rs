use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Segmentation of small, sparse structures with a recurrent residual
/// attention U-Net.
#[derive(Parser, Debug)]
#[command(name = "r2au", version, arg_required_else_help = true)]
struct Cli {
    /// Print the full run configuration with its defaults and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic blob dataset in the DSB-2018 layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Target mean foreground fraction.
        #[arg(long, default_value_t = 0.08)]
        imbalance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and keep the best checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset root; overrides `data.root` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint and print one metrics row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        /// Split manifest; defaults to `manifest.json` beside the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Average metrics per image instead of pooling pixels.
        #[arg(long)]
        per_image: bool,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image and write a 0/255 PNG mask.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        base_channels: usize,
        /// Number of random seeds, starting at 0.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Train one model per loss configuration and tabulate the metrics.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `table1` or a JSON file holding a list of loss configurations.
        #[arg(long, default_value = "table1")]
        grid: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run only these 1-based grid rows, e.g. `2,14`.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<usize>,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: String) -> Self {
        CliError { code: 2, message }
    }

    pub fn runtime(message: String) -> Self {
        CliError { code: 1, message }
    }
}

impl From<r2au_core::Error> for CliError {
    fn from(e: r2au_core::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.print_config {
        print!("{}", config::RunConfig::default().to_pretty_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::usage("no subcommand given".into()));
    };
    match command {
        Command::Synth {
            out,
            n,
            size,
            imbalance,
            seed,
        } => commands::synth(&out, n, size, imbalance, seed),
        Command::Train { config, data, out } => commands::train(&config, data.as_deref(), &out),
        Command::Eval {
            ckpt,
            data,
            split,
            manifest,
            per_image,
            threshold,
            out,
        } => commands::eval(&commands::EvalArgs {
            ckpt,
            data,
            split: match split {
                SplitArg::Train => Some(r2au_core::data::Split::Train),
                SplitArg::Val => Some(r2au_core::data::Split::Val),
                SplitArg::All => None,
            },
            manifest,
            per_image,
            threshold,
            out,
        }),
        Command::Predict {
            ckpt,
            image,
            out,
            threshold,
        } => commands::predict(&ckpt, &image, &out, threshold),
        Command::Gradcheck {
            depth,
            size,
            base_channels,
            seeds,
        } => commands::gradcheck(depth, size, base_channels, seeds),
        Command::Ablate {
            config,
            grid,
            data,
            rows,
            out,
        } => commands::ablate(&config, &grid, data.as_deref(), &rows, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
