//! Command-line front end: argument parsing, run configuration and the
//! subcommand implementations.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use aerovit_core::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_CONTRACT: i32 = 5;

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Io => EXIT_IO,
        ErrorKind::Numeric => EXIT_NUMERIC,
        ErrorKind::Contract => EXIT_CONTRACT,
    }
}

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  configuration or usage error
  3  I/O or file format error
  4  numeric failure (non-finite values, singular systems)
  5  contract violation (e.g. stage run out of order)";

#[derive(Debug, Parser)]
#[command(name = "aerovit", version, about = "Oblique-view vision transformer toolkit", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum View {
    Vertical,
    Oblique,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Png,
    Pgm,
    Ppm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Keystone,
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Base,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Override the configured starting checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Override the configured number of optimiser steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Viewing angle of a target versus horizontal distance.
    Geometry {
        #[arg(long)]
        camera_height: f64,
        #[arg(long)]
        target_height: f64,
        /// Also sample the curve up to this distance.
        #[arg(long)]
        max_distance: Option<f64>,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keystone-warped positive pairs with a JSON-lines manifest.
    Pairs {
        #[arg(long)]
        out_dir: PathBuf,
        /// Source images; synthetic scenes when omitted.
        #[arg(long)]
        input_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Variant::Keystone)]
        variant: Variant,
        #[arg(long, default_value_t = 0.5)]
        crop_fraction: f64,
    },
    /// Procedural aerial-like images with a manifest.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = View::Mixed)]
        view: View,
        #[arg(long, value_enum, default_value_t = ImageFormat::Png)]
        format: ImageFormat,
    },
    /// Masked-image pre-training.
    PretrainMim(TrainArgs),
    /// Joint masked-image and contrastive pre-training.
    PretrainJoint(TrainArgs),
    /// Adapter fine-tuning on a frozen backbone.
    FinetuneAdapter(TrainArgs),
    /// Parameter counts with adapters attached and the backbone frozen.
    Params {
        /// Take model and adapter settings from a run configuration.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Toy)]
        preset: Preset,
        /// Fixed bottleneck width instead of channels / factor.
        #[arg(long)]
        bottleneck_width: Option<usize>,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Share of spectral energy near zero frequency.
    Freq {
        /// Images to analyse.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Compare this many synthetic vertical and oblique views instead.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.25)]
        radius: f64,
        #[arg(long)]
        exclude_dc: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG loss and learning-rate charts next to a metrics log.
    Plot {
        #[arg(long)]
        log: PathBuf,
    },
}
