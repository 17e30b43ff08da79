use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Solar-farm segmentation with EM attention: synthesize data, train,
/// evaluate, predict on large rasters, verify gradients.
#[derive(Parser, Debug)]
#[command(name = "solarnet", version, about)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic image/mask corpus with manifest.csv.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint and append a row to the results CSV.
    Eval(EvalArgs),
    /// Segment one raster of any size by tiling and stitching.
    Predict(PredictArgs),
    /// Run finite-difference and EM reference checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Texture grain, blending and distractors, in [0, 1].
    #[arg(long, default_value_t = 0.3)]
    pub difficulty: f64,
    #[arg(long, default_value_t = 0.7)]
    pub farm_probability: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` config file; CLI flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// desk (default), paper or tiny.
    #[arg(long)]
    pub preset: Option<String>,
    /// solarnet or unet.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// all, train or test; train/test re-derive the seeded split.
    #[arg(long, default_value = "all")]
    pub split: String,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "results.csv")]
    pub results: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub tile: usize,
    /// Defaults to tile / 2.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Model name in the results row; defaults to the checkpoint's model kind.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub tile: usize,
    #[arg(long, default_value_t = 256)]
    pub stride: usize,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Sign-flip the backward pass of one op (mutation testing).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
