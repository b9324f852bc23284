//! Command-line entry points and the HTTP service for the annotation tool.

pub mod commands;
pub mod serve;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "gangeal", version, about = "Dense alignment of image collections with generator supervision")]
pub struct Cli {
    /// Run sequentially instead of on the thread pool.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Checkpoint directory, falling back to `GANGEAL_CHECKPOINT`.
#[derive(Debug, Args)]
pub struct CheckpointArg {
    #[arg(short, long, env = "GANGEAL_CHECKPOINT")]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from a key = value config file.
    Train {
        config: PathBuf,
        /// Run directory for metrics.csv, checkpoints and final/.
        #[arg(short, long, default_value = "run")]
        out: PathBuf,
    },
    /// Write the congealed version of every image in a directory.
    Congeal {
        #[command(flatten)]
        ckpt: CheckpointArg,
        input: PathBuf,
        output: PathBuf,
    },
    /// Transfer keypoints from image A to image B.
    Transfer {
        #[command(flatten)]
        ckpt: CheckpointArg,
        image_a: PathBuf,
        image_b: PathBuf,
        /// JSON array of {x, y, visible} in model-resolution pixels.
        keypoints: PathBuf,
        /// Write the result here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Propagate a congealed-space RGBA overlay onto images or video frames.
    Propagate {
        #[command(flatten)]
        ckpt: CheckpointArg,
        overlay: PathBuf,
        /// Directory of images, or of frames when --video is given.
        input: PathBuf,
        output: PathBuf,
        /// Treat the sorted directory as one clip.
        #[arg(long)]
        video: bool,
    },
    /// Rank images by flow smoothness and keep the smoothest fraction.
    Filter {
        #[command(flatten)]
        ckpt: CheckpointArg,
        input: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        keep: f64,
        /// Directory for manifest.json, report.csv and kept.txt.
        #[arg(short, long, default_value = "filtered")]
        out: PathBuf,
    },
    /// Similarity-only crops with zoom and extrapolation limits.
    Align {
        #[command(flatten)]
        ckpt: CheckpointArg,
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = gangealing::datapipe::DEFAULT_ZOOM_LIMIT)]
        zoom_limit: f64,
        #[arg(long, default_value_t = gangealing::datapipe::DEFAULT_EXTRAPOLATION_LIMIT)]
        extrapolation_limit: f64,
        #[arg(long, default_value_t = 1)]
        recursion: usize,
    },
    /// Score a query manifest with PCK.
    Evaluate {
        /// Needed only when some query has no precomputed prediction.
        #[arg(short, long, env = "GANGEAL_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        queries: PathBuf,
        /// Comma separated thresholds; defaults to the alphas in the manifest.
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        /// Image directory for queries without predictions; defaults to the
        /// manifest's directory.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Also write the curve as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Serve the annotation API.
    Serve {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Gallery directory listed by /api/images.
        #[arg(long)]
        gallery: Option<PathBuf>,
        /// Generator samples averaged into each cluster template.
        #[arg(long, default_value_t = 64)]
        template_samples: usize,
    },
}

pub fn load_model(dir: &Path) -> Result<gangealing::trainer::Model> {
    gangealing::checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}
