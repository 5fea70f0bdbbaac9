//! `blockcore`: ingest, generate, search, train and evaluate block-core models.
//!
//! Exit status: 0 on success, 2 for usage errors, 3 for data errors and 4 for
//! numeric failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use blockcore::core_tensor::Preset;
use blockcore::planted::DEFAULT_MAX_DRAWS;
use blockcore::{Error, ErrorClass, Result};
use clap::{Parser, Subcommand};

use commands::{ArchitectureSource, IngestArgs, SynthConfig};
use config::{DataFlags, RunConfig, SearchFlags, TrainFlags};

#[derive(Debug, Parser)]
#[command(name = "blockcore", version, about = "Block-sparse core tensor models for n-ary facts")]
struct Cli {
    /// TOML file of run settings; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel scoring and gradients
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse TSV fact files into a dataset directory with a stats report
    Ingest {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Keep only facts of this arity
        #[arg(long)]
        arity: Option<usize>,
        #[arg(long)]
        holdout_fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Accept validation and test symbols never seen in training
        #[arg(long)]
        lenient: bool,
    },
    /// Generate a dataset from a hidden architecture
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        entities: usize,
        #[arg(long, default_value_t = 2)]
        relations: usize,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        arities: Vec<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long = "segments")]
        segment_count: Option<usize>,
        /// Preset used as the hidden architecture
        #[arg(long, default_value = "complex", conflicts_with = "truth_file")]
        truth: String,
        /// Architecture file used as the hidden architecture
        #[arg(long)]
        truth_file: Option<PathBuf>,
        /// Facts generated per arity, split 80/10/10
        #[arg(long, default_value_t = 2000)]
        facts: usize,
        /// Minimum hidden score of a fact
        #[arg(long)]
        margin: Option<f64>,
        /// Without --margin, admit this share of random tuples
        #[arg(long, default_value_t = 0.15)]
        keep: f64,
        #[arg(long, default_value_t = 200_000)]
        probe_samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_MAX_DRAWS)]
        max_draws: u64,
    },
    /// Search block codes; writes architecture.json, theta.json and trace.jsonl
    Search {
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        search: SearchFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train embeddings for a fixed architecture and write a checkpoint
    Train {
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Architecture file
        #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
        arch: Option<PathBuf>,
        /// cp, distmult, complex or simple
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filtered ranking metrics of a checkpoint on one split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        /// train, valid or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the metrics document here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two architecture files block by block
    DiffArch { a: PathBuf, b: PathBuf },
    /// Validate and summarize an architecture or theta file
    InspectArch { path: PathBuf },
}

/// `base` with the config file's keys applied on top.
fn layered(base: RunConfig, file: Option<&PathBuf>) -> Result<RunConfig> {
    match file {
        Some(path) => base.overlay_file(path),
        None => Ok(base),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidArgument("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot start {n} workers: {e}")))?;
    }
    let file = cli.config.as_ref();
    let base = layered(RunConfig::default(), file)?;
    match cli.command {
        Command::Ingest {
            train,
            valid,
            test,
            out,
            arity,
            holdout_fraction,
            seed,
            lenient,
        } => {
            let mut config = base;
            if arity.is_some() {
                config.arity = arity;
            }
            config.holdout_fraction = holdout_fraction.unwrap_or(config.holdout_fraction);
            config.seed = seed.unwrap_or(config.seed);
            config.strict &= !lenient;
            commands::ingest(&IngestArgs { train, valid, test, out }, &config)
        }
        Command::Synth {
            out,
            entities,
            relations,
            arities,
            dim,
            segment_count,
            truth,
            truth_file,
            facts,
            margin,
            keep,
            probe_samples,
            seed,
            max_draws,
        } => {
            let settings = SynthConfig {
                entities,
                relations,
                arities,
                dim: dim.unwrap_or(if file.is_some() { base.dim } else { 16 }),
                segment_count: segment_count.unwrap_or(base.segment_count),
                truth,
                facts_per_arity: facts,
                margin,
                keep,
                probe_samples,
                seed: seed.unwrap_or(base.seed),
                max_draws,
            };
            commands::synth(&settings, truth_file.as_deref(), &out)
        }
        Command::Search { data, train, search, out } => commands::search(&data, &train, &search, &base, &out),
        Command::Train {
            data,
            train,
            arch,
            preset,
            out,
        } => {
            let source = match (arch, preset) {
                (Some(path), _) => ArchitectureSource::File(path),
                (None, Some(name)) => ArchitectureSource::Preset(name.parse::<Preset>()?),
                (None, None) => return Err(Error::InvalidArgument("pass --arch or --preset".into())),
            };
            commands::train(&data, &train, &source, &base, &out)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => commands::eval(&checkpoint, &data, &split, file, out.as_deref()),
        Command::DiffArch { a, b } => commands::print_diff(&a, &b),
        Command::InspectArch { path } => commands::inspect_arch(&path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
