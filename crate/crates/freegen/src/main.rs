//! Command-line entry point. Exit codes: 0 success, 2 bad arguments,
//! 3 I/O failure, 4 numerical failure.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use freegen::commands;
use freegen::config::RunConfig;
use freegen::{PipelineError, Result};

#[derive(Parser)]
#[command(
    name = "freegen",
    version,
    about = "Feed-forward Gaussian scene reconstruction with a diffusion refiner",
    long_about = "Builds synthetic driving-style datasets, fits 3D Gaussian scenes to them, \
                  trains a convolutional denoiser on degraded renders, co-trains the two \
                  models, and scores everything under lateral camera shifts. All state lives \
                  in the working directory as documented files."
)]
struct Cli {
    /// TOML config file applied over the built-in defaults (flags win).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Working directory for all inputs and outputs (or FREEGEN_WORKDIR).
    #[arg(long, global = true, value_name = "DIR")]
    workdir: Option<PathBuf>,
    /// Global seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Render resolution, e.g. 64x64. Both sides must be multiples of the
    /// tile size.
    #[arg(long, global = true, value_name = "WxH")]
    resolution: Option<String>,
    /// Rasterizer tile edge: 8, 16, or 32.
    #[arg(long, global = true)]
    tile_size: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and ray-trace its ground-truth dataset.
    Scenegen {
        /// Scene preset: street, corridor, or open.
        #[arg(long)]
        preset: Option<String>,
        /// Frames per camera.
        #[arg(long)]
        frames: Option<u32>,
        /// Cameras in the recording rig.
        #[arg(long)]
        cameras: Option<u32>,
    },
    /// Initialize a Gaussian scene from the dataset and optimize it.
    Fit {
        /// Optimization steps (0 writes the raw initialization).
        #[arg(long)]
        steps: Option<usize>,
        /// Pixel stride of the unprojection initializer.
        #[arg(long)]
        init_stride: Option<usize>,
    },
    /// Train the denoising refiner on degraded renders of the dataset.
    RefineTrain {
        /// Training steps.
        #[arg(long)]
        train_steps: Option<usize>,
    },
    /// Alternate reconstruction and generation updates round by round.
    Cotrain {
        /// Co-training rounds (0 copies the checkpoints through).
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Render, refine, and score against the reference under lateral shifts.
    Eval {
        /// Shift magnitudes in meters, comma-separated. Nonzero values are
        /// evaluated at both signs; 0 evaluates the recorded trajectory.
        #[arg(long, value_delimiter = ',')]
        shifts: Option<Vec<f64>>,
        /// Evaluate every stride-th frame of the base trajectory.
        #[arg(long)]
        stride: Option<usize>,
        /// Scene checkpoint to score (default: scene.fggs in the workdir).
        #[arg(long, value_name = "FILE")]
        scene_ckpt: Option<PathBuf>,
        /// Denoiser checkpoint to refine with (default: refiner.fgdn).
        #[arg(long, value_name = "FILE")]
        refiner_ckpt: Option<PathBuf>,
    },
    /// Print a summary of the result files in the workdir.
    Report,
}

fn parse_resolution(s: &str) -> Result<(u32, u32)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| PipelineError::BadArgs(format!("resolution '{s}' is not WxH")))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<u32>()
            .map_err(|_| PipelineError::BadArgs(format!("resolution '{s}' is not WxH")))
    };
    Ok((parse(w)?, parse(h)?))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::from_env();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(w) = cli.workdir {
        cfg.workdir = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = &cli.resolution {
        (cfg.width, cfg.height) = parse_resolution(r)?;
    }
    if let Some(t) = cli.tile_size {
        cfg.tile_size = t;
    }

    match cli.command {
        Command::Scenegen { preset, frames, cameras } => {
            if let Some(p) = preset {
                cfg.preset = p;
            }
            if let Some(f) = frames {
                cfg.video_length = f;
            }
            if let Some(c) = cameras {
                cfg.cameras = c;
            }
            commands::cmd_scenegen(&cfg)
        }
        Command::Fit { steps, init_stride } => {
            if let Some(s) = steps {
                cfg.fit.steps = s;
            }
            if let Some(s) = init_stride {
                cfg.fit.init_stride = s;
            }
            commands::cmd_fit(&cfg)
        }
        Command::RefineTrain { train_steps } => {
            if let Some(s) = train_steps {
                cfg.refiner.train_steps = s;
            }
            commands::cmd_refine_train(&cfg)
        }
        Command::Cotrain { rounds } => {
            if let Some(r) = rounds {
                cfg.cotrain.rounds = r;
            }
            commands::cmd_cotrain(&cfg)
        }
        Command::Eval { shifts, stride, scene_ckpt, refiner_ckpt } => {
            if let Some(s) = shifts {
                cfg.eval.shifts = s;
            }
            if let Some(s) = stride {
                cfg.eval.stride = s;
            }
            commands::cmd_eval(&cfg, scene_ckpt.as_deref(), refiner_ckpt.as_deref())
        }
        Command::Report => commands::cmd_report(&cfg),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
