//! Command-line front end. Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod manifest;
mod parse;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(String),
}

impl From<neuromed::Error> for CliError {
    fn from(e: neuromed::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "neuromed", version, about = "Capsule, CNN and spiking-network experiments on synthetic brain-slice data")]
pub struct Cli {
    /// Worker threads for sample-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// `key=value` file supplying defaults for any long flag of this command.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset (NGDS).
    GenData(GenDataArgs),
    /// Patient-disjoint, class-stratified train/test split.
    Split(SplitArgs),
    /// Train a model (NNIR) and write its per-epoch history.
    Train(TrainArgs),
    /// Convert a trained CNN into a spiking network (SNNC).
    Convert(ConvertArgs),
    /// Run a spiking network over a dataset.
    Simulate(SimulateArgs),
    /// Accuracy, sample-efficiency, energy and throughput comparison.
    Benchmark(BenchmarkArgs),
    /// Decode perturbed capsule vectors into an image grid.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    patients: Option<usize>,
    /// Comma-separated class priors.
    #[arg(long)]
    priors: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    train_out: Option<PathBuf>,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// capsnet | cnn | dense | resnet
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation set scored after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Start from this model's parameters instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// History CSV (default: `<out>.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// constant:LR | exp:LR:RATE | cyclical:BASE:MAX:STEP
    #[arg(long)]
    lr_policy: Option<String>,
    /// adam | sgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    momentum: Option<f32>,
    /// Layers to freeze, e.g. `0..4` or `0,1,5`.
    #[arg(long)]
    freeze: Option<String>,
    /// Per-layer-range learning-rate multipliers, e.g. `0..3:0.1,3..9:1`.
    #[arg(long)]
    lr_groups: Option<String>,
    /// Principal components for the dense model's input projection.
    #[arg(long)]
    pca: Option<usize>,
    /// Hidden widths of the dense model, comma-separated.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    dropout: Option<f32>,
    /// Residual blocks of the resnet model.
    #[arg(long)]
    blocks: Option<usize>,
    /// Convolution filters of the resnet model.
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    reconstruction_weight: Option<f32>,
    /// Train on this stratified fraction of the data.
    #[arg(long)]
    fraction: Option<f64>,
    /// Patient-grouped k-fold cross-validation; `--out` receives the fold table.
    #[arg(long)]
    kfold: Option<usize>,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Conversion report CSV (default: `<out>.report.csv`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Timesteps for the calibration-set evaluation; 0 skips it.
    #[arg(long)]
    eval_timesteps: Option<usize>,
    /// `auto` or a number added to every output bias.
    #[arg(long, allow_hyphen_values = true)]
    output_shift: Option<String>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    snn: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long = "T")]
    timesteps: Option<usize>,
    /// poisson | constant
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    max_rate_scale: Option<f32>,
    /// Comma-separated ascending timestep list.
    #[arg(long = "sweep-T")]
    sweep: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step output spikes of one sample as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    trace_index: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated `name=path` entries (NNIR or SNNC files).
    #[arg(long)]
    models: Option<String>,
    /// Test set.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training set for the reduced-data column.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    efficiency_epochs: Option<usize>,
    #[arg(long)]
    energy_config: Option<PathBuf>,
    #[arg(long = "T")]
    timesteps: Option<usize>,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    throughput_inferences: Option<usize>,
    #[arg(long)]
    throughput_runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample index within `--data`.
    #[arg(long)]
    image: Option<usize>,
    /// Class capsule to perturb (default: the predicted class).
    #[arg(long)]
    capsule: Option<usize>,
    /// Capsule dimensions, e.g. `0..4` or `0,3,7`.
    #[arg(long)]
    dims: Option<String>,
    /// Comma-separated perturbations, e.g. `-0.25,0,0.25`.
    #[arg(long, allow_hyphen_values = true)]
    deltas: Option<String>,
    /// Output dataset (NGDS) with one image per (dimension, delta); `<out>.grid.csv` maps indices.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Run(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Split(a) => commands::split(a),
        Command::Train(a) => commands::train(a),
        Command::Convert(a) => commands::convert(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Explain(a) => commands::explain(a),
    }
}
