use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod input;

#[derive(Parser, Debug)]
#[command(name = "mdnpose", version, about = "Multi-hypothesis 3D pose lifting with a mixture density network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic kinematic-chain dataset with a known solution set.
    GenData(GenDataArgs),
    /// Train a network and write a checkpoint plus a per-epoch loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write every hypothesis for each 2D input row.
    Predict(PredictArgs),
    /// Lift each view separately, then fuse the views in world coordinates.
    FuseViews(FuseArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output CSV; companions are written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    bones: usize,
    /// Comma-separated bone lengths (default: all 1).
    #[arg(long, value_delimiter = ',')]
    bone_lengths: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    reflection_mix: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 2 adds a side camera and writes one file per view plus a camera file.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    views: u8,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Continue from this checkpoint's optimizer state and epoch count.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma_elu: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay_rate: Option<f64>,
    #[arg(long)]
    decay_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_norm: Option<f64>,
    #[arg(long)]
    occlusion_k: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Oracle file from gen-data; enables mode coverage.
    #[arg(long)]
    oracle: Option<PathBuf>,
    /// Also evaluate with 1..=K hidden limb joints.
    #[arg(long, default_value_t = 0)]
    occlude_k: usize,
    /// Normalization statistics to check against the checkpoint.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Use millimetre thresholds instead of fractions of the skeleton length.
    #[arg(long)]
    metric: bool,
    /// Protocol #2 alignment also fits a scale.
    #[arg(long)]
    allow_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file or headerless CSV of 2N image coordinates per row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Auto,
    Exhaustive,
    Greedy,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// One input file per camera, in any order; repeat the flag.
    #[arg(long = "view", required = true)]
    views: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Strategy::Auto)]
    strategy: Strategy,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::FuseViews(a) => commands::fuse_views(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
