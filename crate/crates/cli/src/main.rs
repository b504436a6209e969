mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use compt::featurize::FeaturizerConfig;

use config::{DataConfig, DataFormat, RunConfig};
use error::CliError;

/// Molecular property prediction with a communicative message passing
/// transformer.
#[derive(Parser)]
#[command(name = "compt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    GraphCsv,
    NodeJsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and featurize a dataset into a binary cache.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: InputFormat,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "smiles")]
        smiles_column: String,
        /// Target column (repeatable); required for graph-csv.
        #[arg(long = "target")]
        targets: Vec<String>,
        #[arg(long)]
        feature_overrides: Option<PathBuf>,
        #[arg(long, default_value_t = FeaturizerConfig::default().distance_cap)]
        distance_cap: usize,
        #[arg(long, default_value_t = FeaturizerConfig::default().max_atoms)]
        max_atoms: usize,
    },
    /// Split, train, and write checkpoint, history and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training and initialization seed; replaces train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted-path override such as model.use_diffusion=false.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the metric report for one partition of a featurized cache.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, valid, test or all.
        #[arg(long, default_value = "test")]
        partition: String,
        /// Run config whose model section must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write per-molecule (or per-atom) predictions for a CSV of SMILES.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "smiles")]
        smiles_column: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// `all` or a single op name.
        #[arg(long, default_value = "all")]
        ops: String,
    },
    /// Dump message matrices before and after diffusion for one molecule.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        smiles: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Featurize {
            input,
            format,
            out,
            smiles_column,
            targets,
            feature_overrides,
            distance_cap,
            max_atoms,
        } => {
            let format = match format {
                InputFormat::GraphCsv => DataFormat::GraphCsv,
                InputFormat::NodeJsonl => DataFormat::NodeJsonl,
            };
            if format == DataFormat::GraphCsv && targets.is_empty() {
                return Err(CliError::Input("graph-csv input needs at least one --target".into()));
            }
            let data = DataConfig {
                path: input,
                format,
                smiles_column,
                target_columns: targets,
                feature_overrides,
            };
            let featurizer = FeaturizerConfig {
                distance_cap,
                max_atoms,
            };
            commands::featurize(&data, &featurizer, &out)
        }
        Command::Train {
            config,
            seed,
            mut overrides,
        } => {
            if let Some(s) = seed {
                overrides.push(format!("train.seed={s}"));
            }
            commands::train(RunConfig::load(&config, &overrides)?)
        }
        Command::Eval {
            checkpoint,
            data,
            partition,
            config,
            overrides,
        } => {
            let expected = commands::config_for(config.as_ref(), &overrides)?;
            let ckpt = commands::open_checkpoint(&checkpoint, expected.as_ref())?;
            commands::eval(&ckpt, &data, &partition)
        }
        Command::Predict {
            checkpoint,
            input,
            out,
            smiles_column,
            config,
            overrides,
        } => {
            let expected = commands::config_for(config.as_ref(), &overrides)?;
            let ckpt = commands::open_checkpoint(&checkpoint, expected.as_ref())?;
            commands::predict(&ckpt, &input, &smiles_column, &out)
        }
        Command::Gradcheck { ops } => commands::gradcheck(&ops),
        Command::Inspect {
            checkpoint,
            smiles,
            layer,
        } => {
            let ckpt = commands::open_checkpoint(&checkpoint, None)?;
            commands::inspect(&ckpt, &smiles, layer)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(compt::train::thread_count())
        .build_global()
    {
        log::warn!("thread pool: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
