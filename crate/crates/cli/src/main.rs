//! `roarnet`: pose solving, oracle-driven detection runs, parameter sweeps and
//! desynchronization experiments over KITTI-layout datasets.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roarnet_core::kitti::Difficulty;
use roarnet_core::pipeline::PipelineMode;

use crate::config::{Overrides, RunConfig};

/// Error classes, each with its own exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config values or argument combinations.
    Usage(anyhow::Error),
    /// Missing or malformed input files.
    Data(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Internal(e) => e,
        }
    }
}

pub trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }

    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

#[derive(Parser, Debug)]
#[command(name = "roarnet", version, about = "Monocular-seeded 3D car detection experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Config file with [sections] of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Dataset root; falls back to ROARNET_DATASET_ROOT.
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    /// Split name under ImageSets/, or a path to a list file.
    #[arg(long, global = true)]
    split: Option<String>,
    /// single_stage, single_stage_twice or rpn_brn_brn.
    #[arg(long, global = true)]
    mode: Option<PipelineMode>,
    /// Size deviation ratio for scattering.
    #[arg(long, global = true)]
    scatter_s: Option<f64>,
    /// Seed stride in meters.
    #[arg(long, global = true)]
    scatter_m: Option<f64>,
    #[arg(long, global = true)]
    objectness_threshold: Option<f64>,
    #[arg(long, global = true)]
    nms_threshold: Option<f64>,
    /// Relative standard deviation of oracle dimensions.
    #[arg(long, global = true)]
    dims_noise: Option<f64>,
    /// Standard deviation of oracle heading, radians.
    #[arg(long, global = true)]
    yaw_noise: Option<f64>,
    /// Standard deviation of oracle box centers, meters.
    #[arg(long, global = true)]
    center_noise: Option<f64>,
    /// Standard deviation of oracle 2D box edges, pixels.
    #[arg(long, global = true)]
    box2d_noise: Option<f64>,
    /// easy, moderate or hard.
    #[arg(long, global = true)]
    difficulty: Option<Difficulty>,
    #[arg(long, global = true)]
    iou_threshold: Option<f64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset_root: self.dataset_root.clone(),
            split: self.split.clone(),
            scatter_s: self.scatter_s,
            scatter_m: self.scatter_m,
            objectness: self.objectness_threshold,
            nms_bev: self.nms_threshold,
            dims_noise: self.dims_noise,
            yaw_noise: self.yaw_noise,
            center_noise: self.center_noise,
            box2d_noise: self.box2d_noise,
            mode: self.mode,
            difficulty: self.difficulty,
            iou_threshold: self.iou_threshold,
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            jobs: self.jobs,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in the KITTI layout.
    Synth {
        /// Destination; defaults to the dataset root.
        dest: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        min_cars: usize,
        #[arg(long, default_value_t = 5)]
        max_cars: usize,
    },
    /// Summarize the frames and labels of a split.
    Inspect {
        #[arg(long)]
        json: bool,
    },
    /// Recover a box center from a 2D box, dimensions and heading.
    SolvePose(SolvePoseArgs),
    /// Run the detector with oracle predictors and score the result.
    Detect,
    /// Write a parameter sweep as CSV.
    Sweep {
        #[command(subcommand)]
        kind: SweepKind,
    },
    /// Cluster label dimensions into size prototypes.
    FitSizes {
        #[arg(long, default_value_t = 3)]
        clusters: usize,
    },
}

#[derive(Args, Debug)]
pub struct SolvePoseArgs {
    /// `xmin,ymin,xmax,ymax` in pixels.
    #[arg(long = "box", value_name = "BOX")]
    box2d: Option<String>,
    /// `w,h,l` in meters.
    #[arg(long)]
    dims: Option<String>,
    /// Heading in radians.
    #[arg(long, allow_negative_numbers = true)]
    yaw: Option<f64>,
    /// Calibration file in the KITTI layout; required with `--box`.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Take the box, dimensions and heading from this frame's labels.
    #[arg(long, conflicts_with_all = ["box2d", "dims", "yaw", "calib"])]
    frame: Option<String>,
    /// Label index within `--frame`.
    #[arg(long, default_value_t = 0, requires = "frame")]
    object: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
pub enum SweepKind {
    /// Proposal recall and proposals per car versus the size deviation ratio.
    Scatter {
        /// `start:stop:step` or a comma list.
        #[arg(long, default_value = "0:0.6:0.1")]
        values: String,
    },
    /// Proposal recall and proposals per car versus the objectness threshold.
    Objectness {
        #[arg(long, default_value = "0.05:0.5:0.05")]
        values: String,
    },
    /// Detection metric versus the desynchronization bound, in meters.
    Desync {
        #[arg(long, default_value = "0:0.8:0.1")]
        values: String,
        /// Desynchronization draws averaged per magnitude.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = DesyncMetricArg::Recall)]
        metric: DesyncMetricArg,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DesyncMetricArg {
    Recall,
    Ap,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::from_file(path).usage()?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.global.overrides());
    cfg.validate().usage()?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().internal()?;
    }
    log::debug!("effective config:\n{}", cfg.to_toml());
    match cli.command {
        Command::Synth {
            dest,
            frames,
            min_cars,
            max_cars,
        } => commands::synth(&cfg, dest, frames, min_cars, max_cars),
        Command::Inspect { json } => commands::inspect(&cfg, json),
        Command::SolvePose(args) => commands::solve_pose(&cfg, &args),
        Command::Detect => commands::detect(&cfg),
        Command::Sweep { kind } => commands::sweep(&cfg, &kind),
        Command::FitSizes { clusters } => commands::fit_sizes(&cfg, clusters),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
