//! `persview`: command-line driver for the portrait perspective pipeline.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use persview::depth::BilateralParams;
use persview::fixture::FixtureKind;
use persview::pipeline::PipelineParams;
use persview::raster::RasterOptions;
use persview::view::{DistanceChange, ViewDelta};

use crate::error::{CliError, CliResult};

/// Environment variable capping rasterizer parallelism.
pub const THREADS_ENV: &str = "PERSVIEW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "persview", version, about = "Perspective correction for close-range portraits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full correction: warp to the novel camera and blend with the generated image.
    Correct {
        /// Session bundle directory.
        bundle: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Warp only: writes warped.png, mask.png, visibility.png and zbuffer.pfm.
    Warp {
        bundle: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Blend a previous warp (warped.png + mask.png) with the bundle's generated image.
    Blend {
        bundle: PathBuf,
        /// Directory holding the output of `warp`.
        #[arg(long)]
        warp_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Fit the original camera to the bundle's landmarks.
    FitCamera {
        bundle: PathBuf,
        /// Reference landmarks in scene coordinates (`{"points": [[x, y, z], ...]}`).
        #[arg(long)]
        scene: PathBuf,
        /// Observed landmarks; defaults to the bundle's landmarks member.
        #[arg(long)]
        observed: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha2: f64,
        #[arg(long, default_value_t = 1)]
        alternation_period: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Write a synthetic session bundle with analytic depth and a ground-truth second view.
    MakeFixture {
        #[arg(long, value_parser = parse_kind)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Pose of the ground-truth view, rotated about the world origin.
        #[command(flatten)]
        truth: ViewArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Score output/reference pairs: `<name>_output.png` against `<name>_reference.png`.
    Eval {
        pairs_dir: PathBuf,
        /// Label of the mean row in the text report.
        #[arg(long, default_value = "persview")]
        method: String,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Debug, Clone, Args)]
struct ViewArgs {
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pitch: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    roll: f64,
    /// Absolute camera distance for the novel view.
    #[arg(long, conflicts_with = "tz_half", allow_hyphen_values = true)]
    tz: Option<f64>,
    /// Halve the camera distance.
    #[arg(long)]
    tz_half: bool,
}

impl ViewArgs {
    fn delta(&self) -> ViewDelta {
        let distance = match (self.tz, self.tz_half) {
            (Some(v), _) => DistanceChange::To(v),
            (None, true) => DistanceChange::Half,
            (None, false) => DistanceChange::Keep,
        };
        ViewDelta {
            yaw_deg: self.yaw,
            pitch_deg: self.pitch,
            roll_deg: self.roll,
            distance,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct PipelineArgs {
    #[arg(long, default_value_t = 80.0)]
    cull_deg: f64,
    #[arg(long, default_value_t = 5)]
    bilateral_k: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma_color: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_space: f64,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 2)]
    erode: usize,
    #[arg(long, default_value_t = 5)]
    blur: usize,
    /// Also write float copies of the color outputs as PFM.
    #[arg(long)]
    float_outputs: bool,
}

impl PipelineArgs {
    fn params(&self, bands: usize) -> PipelineParams {
        PipelineParams {
            bilateral: BilateralParams {
                kernel: self.bilateral_k,
                sigma_color: self.sigma_color,
                sigma_space: self.sigma_space,
            },
            cull_deg: self.cull_deg,
            erode_px: self.erode,
            blur_px: self.blur,
            levels: self.levels,
            raster: RasterOptions { bands },
        }
    }
}

#[derive(Debug, Clone, Args)]
struct OutputArgs {
    /// Output directory.
    #[arg(long, required_unless_present = "dry_run")]
    out: Option<PathBuf>,
    /// Validate inputs and flags without writing anything.
    #[arg(long)]
    dry_run: bool,
}

fn parse_kind(s: &str) -> Result<FixtureKind, String> {
    s.parse()
}

/// Rasterizer band count from the environment; unset means all cores.
fn thread_cap() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::validation("config", format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = thread_cap()?;
    // ignore the error if a pool already exists (only possible in-process)
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match cli.command {
        Command::Correct {
            bundle,
            view,
            pipeline,
            output,
        } => commands::correct(&bundle, &view.delta(), &pipeline.params(threads), pipeline.float_outputs, output.target(), true),
        Command::Warp {
            bundle,
            view,
            pipeline,
            output,
        } => commands::correct(&bundle, &view.delta(), &pipeline.params(threads), pipeline.float_outputs, output.target(), false),
        Command::Blend {
            bundle,
            warp_dir,
            levels,
            output,
        } => commands::blend(&bundle, &warp_dir, levels, output.target()),
        Command::FitCamera {
            bundle,
            scene,
            observed,
            lr,
            max_iters,
            alpha2,
            alternation_period,
            tol,
            output,
        } => {
            let cfg = persview::FitConfig {
                alpha1: 0.0,
                alpha2,
                learning_rate: lr,
                max_iters,
                alternation_period,
                convergence_tol: tol,
            };
            commands::fit_camera(&bundle, &scene, observed.as_deref(), &cfg, output.target())
        }
        Command::MakeFixture { kind, size, truth, output } => commands::make_fixture(kind, size, &truth.delta(), output.target()),
        Command::Eval { pairs_dir, method, output } => commands::eval(&pairs_dir, &method, output.target()),
    }
}

impl OutputArgs {
    /// `None` for a dry run.
    fn target(&self) -> Option<&std::path::Path> {
        if self.dry_run {
            None
        } else {
            self.out.as_deref()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("persview: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
