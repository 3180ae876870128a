//! `clod`: synthesize scenes, train continuous-detail models, render and
//! evaluate them, and serve frames over HTTP.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "clod", version, about = "Continuous level-of-detail Gaussian splatting")]
struct Cli {
    /// Worker threads for rendering and training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a ground-truth scene, a perturbed initialization and train/test views.
    Synth(SynthArgs),
    /// Train a model from an initialization and posed images.
    Train(TrainArgs),
    /// Render one frame at a chosen detail level.
    Render(RenderArgs),
    /// Quality and rendered ratio over a grid of scales, as CSV.
    Curve(CurveArgs),
    /// Compare a discrete two-level composite with a continuous one.
    DlodCompare(DlodArgs),
    /// Quality at full detail, primitive count and file size, as JSON.
    Summarize(ModelCameras),
    /// Scene statistics of a PLY, as JSON.
    Info(InfoArgs),
    /// Serve frames over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment description (TOML or JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// uniform-box, textured-plane or cluster-mix.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long)]
    pub sh_degree: Option<usize>,
    /// Total views before the held-out split.
    #[arg(long)]
    pub cameras: Option<usize>,
    #[arg(long)]
    pub camera_seed: Option<u64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `synth`; supplies the initialization and views.
    #[arg(long, required_unless_present_all = ["init", "cameras"])]
    pub data: Option<PathBuf>,
    /// Initial model, overriding `<data>/init.ply`.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Training views, overriding `<data>/train/cameras.json`.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// Held-out views evaluated after training (default `<data>/test/cameras.json` when present).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration (TOML or JSON); flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the small-scene schedule instead of the full one; `--config` merges over it.
    #[arg(long)]
    pub desk: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub mechanism_start: Option<usize>,
    #[arg(long)]
    pub s_max: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    /// full, no-weight, no-loss or no-weight-no-loss.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub sigma_d_init: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Camera file; `--frame` picks the view.
    #[arg(long, conflicts_with = "orbit")]
    pub cameras: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// `azimuth,elevation,radius` in degrees and world units, aimed at the scene centroid.
    #[arg(long, required_unless_present = "cameras")]
    pub orbit: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 60.0)]
    pub fov: f64,
    /// Viewing scale, >= 1.
    #[arg(long, default_value_t = 1.0)]
    pub sv: f64,
    #[arg(long, default_value_t = clod_core::clod::DEFAULT_TAU)]
    pub tau: f64,
    /// clod, off or topk:N.
    #[arg(long, default_value = "clod")]
    pub mode: String,
    /// Output image (.png or .ppm).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ModelCameras {
    #[arg(long)]
    pub model: PathBuf,
    /// Camera file with ground-truth images.
    #[arg(long)]
    pub cameras: PathBuf,
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    #[command(flatten)]
    pub input: ModelCameras,
    /// `start:end:step` or a comma-separated list.
    #[arg(long, default_value = "1:5:0.5")]
    pub grid: String,
    #[arg(long, default_value_t = clod_core::clod::DEFAULT_TAU)]
    pub tau: f64,
    /// CSV path (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DlodArgs {
    /// Model rendered continuously across the strips.
    #[arg(long)]
    pub clod: PathBuf,
    /// Full-detail discrete level.
    #[arg(long)]
    pub high: PathBuf,
    /// Coarse discrete level (default: top-K pruning of `--high`).
    #[arg(long)]
    pub low: Option<PathBuf>,
    /// Share of the high level's rendered count kept by the top-K coarse level.
    #[arg(long, default_value_t = 0.2)]
    pub low_ratio: f64,
    #[arg(long)]
    pub cameras: PathBuf,
    /// `ramp` (budget-matched) or four comma-separated scales, left to right.
    #[arg(long, default_value = "ramp")]
    pub schedule: String,
    #[arg(long, default_value_t = clod_core::clod::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory of `.ply` scenes.
    #[arg(long)]
    pub scenes_dir: PathBuf,
    #[arg(long, default_value_t = clod_service::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
    /// Largest accepted frame, as a side length: requests above size x size pixels are rejected.
    #[arg(long, default_value_t = 1024)]
    pub max_size: usize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Curve(a) => commands::curve(&a),
        Command::DlodCompare(a) => commands::dlod_compare(&a),
        Command::Summarize(a) => commands::summarize(&a),
        Command::Info(a) => commands::info(&a),
        Command::Serve(a) => commands::serve(&a),
    }
}
