//! The `mvpose` command line: synthesis, matcher and lifter training,
//! inference, evaluation and plotting over JSON-lines datasets.
//!
//! Exit codes: 1 for i/o failures, 2 for configuration and schema errors,
//! 3 for numeric failures during training, 4 for checkpoint mismatches.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mvpose_core::lifter::ArchProfile;

mod commands;
pub mod config;
pub mod manifest;
pub mod plot;

pub use config::RunConfig;

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Artifact(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Artifact(_) => 4,
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mvpose", version, about = "Multi-camera multi-person 3D pose estimation")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed applied to synthesis and both training loops.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Lifter layer sizes.
    #[arg(long, global = true, value_parser = parse_profile)]
    pub profile: Option<ArchProfile>,
}

fn parse_profile(s: &str) -> Result<ArchProfile, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a rig, single-person training tracks and mixed evaluation frames.
    Synth(SynthArgs),
    /// Train the view matcher on single-person tracks.
    TrainMatcher(TrainArgs),
    /// Train the lifter on single-person tracks.
    TrainLifter(TrainArgs),
    /// Group detections and estimate 3D poses frame by frame.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Draw skeletons as orthographic SVG views and export joint coordinates.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of single-person tracks.
    #[arg(long, default_value_t = 20)]
    pub tracks: usize,
    /// Frames per track.
    #[arg(long, default_value_t = 200)]
    pub frames: usize,
    /// Mixed-scene evaluation frames.
    #[arg(long, default_value_t = 100)]
    pub eval_frames: usize,
    /// Largest number of persons in an evaluation frame.
    #[arg(long, default_value_t = 4)]
    pub max_persons: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Track files or directories of `.jsonl` track files.
    #[arg(long, num_args = 1..)]
    pub tracks: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub matcher: PathBuf,
    /// Required unless `--baseline` is given.
    #[arg(long)]
    pub lifter: Option<PathBuf>,
    /// Triangulate each joint instead of running the lifter.
    #[arg(long)]
    pub baseline: bool,
    /// Grouping threshold; defaults to the matcher's sidecar value.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    /// Detections file carrying ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    /// Timing file written by `infer`; adds the timing rows.
    #[arg(long)]
    pub timing: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Predictions file.
    #[arg(long, conflicts_with = "dataset", required_unless_present = "dataset")]
    pub pred: Option<PathBuf>,
    /// Detections file with ground truth.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of frames to draw, from the start of the file.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::resolve(&cli.common)?;
    match cli.command {
        Command::Synth(a) => commands::synth(&config, &a),
        Command::TrainMatcher(a) => commands::train_matcher(&config, &a),
        Command::TrainLifter(a) => commands::train_lifter(&config, &a),
        Command::Infer(a) => commands::infer(&config, &a),
        Command::Eval(a) => commands::eval(&config, &a),
        Command::Plot(a) => commands::plot(&config, &a),
    }
}
