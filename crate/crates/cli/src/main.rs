//! `fedseg`: synthetic data, model inspection, federated training,
//! evaluation, aggregator comparison and crop export.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedseg::ErrorKind;

#[derive(Parser, Debug)]
#[command(name = "fedseg", version, about = "Federated U-Net segmentation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic plate dataset (PNG pairs and a JSON-lines manifest).
    GenSynthetic(GenSyntheticArgs),
    /// Print the layer table and parameter totals.
    InspectModel(InspectArgs),
    /// Federated training; writes a checkpoint, round log and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Train once per aggregator and seed and tabulate the results.
    CompareAggregators(CompareArgs),
    /// Crop the largest predicted region out of every image.
    ExportCrops(CropArgs),
}

#[derive(Args, Debug)]
struct GenSyntheticArgs {
    /// Total number of samples.
    #[arg(long)]
    count: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Samples assigned to the test split (default: count / 8). The last
    /// samples are used.
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing dataset in `out`.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Table,
    Csv,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Run config; its `unet` section is used.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Network preset when no config is given.
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    width_scale: Option<f64>,
    /// Square input side.
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

/// Flags shared by commands that train.
#[derive(Args, Debug)]
struct TrainingFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Shifted copies per training image.
    #[arg(long)]
    copies: Option<usize>,
    /// Write 0 in the wall_ms column so logs are byte-reproducible.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainingFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// mean, dpf or pqep, with default parameters.
    #[arg(long)]
    aggregator: Option<String>,
    /// Noise multiplier for the dpf and pqep aggregators.
    #[arg(long)]
    noise_multiplier: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for fedseg::dataset::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => fedseg::dataset::Split::Train,
            SplitArg::Test => fedseg::dataset::Split::Test,
        }
    }
}

/// Flags shared by commands that run a trained checkpoint.
#[derive(Args, Debug)]
struct CheckpointFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Run config (default: config.json beside the checkpoint, if present).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset statistics (default: stats.json beside the checkpoint, if present).
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CheckpointFlags,
    /// Metrics CSV to write; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    common: TrainingFlags,
    /// Comma-separated labels out of mean, dpf, pqep.
    #[arg(long, value_delimiter = ',')]
    aggregators: Option<Vec<String>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    noise_multiplier: Option<f64>,
}

#[derive(Args, Debug)]
struct CropArgs {
    #[command(flatten)]
    common: CheckpointFlags,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 2,
        ErrorKind::Runtime => 3,
        ErrorKind::Io => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(&a),
        Command::InspectModel(a) => commands::inspect_model(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::CompareAggregators(a) => commands::compare_aggregators(&a),
        Command::ExportCrops(a) => commands::export_crops(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
