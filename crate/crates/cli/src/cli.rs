//! Command-line surface. Every tunable is optional here; the final value is
//! resolved as flag → `--config` file entry → built-in default, so the help
//! text documents the defaults without hard-coding them into the parser.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use towerseg_core::sampling::SamplerMode;

use crate::corpus::SplitSel;

#[derive(Parser, Debug)]
#[command(
    name = "towerseg",
    version,
    about = "Detect and segment power-transmission towers in airborne LiDAR point clouds",
    after_help = "Exit codes: 0 success, 1 runtime failure, 2 bad invocation or missing named input."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled synthetic corpus (tiles, ground rasters, split)
    Synth(SynthArgs),
    /// Preprocess a corpus into window indexes (HAG, filter, tiling)
    Prep(PrepArgs),
    /// Train the window classifier on the corpus's train blocks
    TrainCls(TrainArgs),
    /// Train the point segmenter on the corpus's train blocks
    TrainSeg(TrainArgs),
    /// Label scenes with the classify-then-segment pipeline
    Infer(InferArgs),
    /// Score predicted tiles against corpus ground truth
    Eval(EvalArgs),
    /// One-at-a-time factor study (sampling, color, class balancing)
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Extra settings from a `key=value` file; explicit flags win
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads; falls back to TOWERSEG_THREADS, then the command's
    /// default (all cores for infer and synth, 1 elsewhere)
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory the corpus is written to
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of scenes [default: 30]
    #[arg(long, value_name = "N")]
    pub scenes: Option<usize>,
    /// Square scene side in meters [default: 320]
    #[arg(long, value_name = "M")]
    pub extent: Option<f64>,
    /// Point density in points/m² [default: 8]
    #[arg(long, value_name = "PTS")]
    pub density: Option<f64>,
    /// Target fraction of windows containing a tower [default: 0.05]
    #[arg(long, value_name = "FRAC")]
    pub prevalence: Option<f64>,
    /// Window side the prevalence is counted against [default: 40]
    #[arg(long, value_name = "M")]
    pub window_side: Option<f64>,
    /// Fraction of tower blocks held out for testing [default: 0.1]
    #[arg(long, value_name = "FRAC")]
    pub holdout: Option<f64>,
    /// Minimum tower height in meters [default: 10]
    #[arg(long, value_name = "M")]
    pub height_min: Option<f64>,
    /// Maximum tower height in meters [default: 50]
    #[arg(long, value_name = "M")]
    pub height_max: Option<f64>,
    /// Maximum tower footprint width in meters [default: 20]
    #[arg(long, value_name = "M")]
    pub tower_width_max: Option<f64>,
    /// Minimum points per tower [default: 20]
    #[arg(long, value_name = "N")]
    pub tower_points_min: Option<u64>,
    /// Maximum points per tower [default: 2434]
    #[arg(long, value_name = "N")]
    pub tower_points_max: Option<u64>,
    /// Low vegetation fraction [default: 0.35]
    #[arg(long, value_name = "FRAC")]
    pub veg_low: Option<f64>,
    /// Mid vegetation fraction [default: 0.25]
    #[arg(long, value_name = "FRAC")]
    pub veg_mid: Option<f64>,
    /// High vegetation fraction [default: 0.08]
    #[arg(long, value_name = "FRAC")]
    pub veg_high: Option<f64>,
    /// Draw all classes from one radiometry distribution (no color signal)
    #[arg(long)]
    pub no_color_signal: bool,
    /// Corpus seed; fixed seeds reproduce byte-identical corpora [default: 0]
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Corpus directory (as written by `synth`)
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Directory the window indexes are written to
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Window side in meters [default: 40]
    #[arg(long, value_name = "M")]
    pub window_side: Option<f64>,
    /// Tiling stride in meters [default: the window side]
    #[arg(long, value_name = "M")]
    pub stride: Option<f64>,
    /// Grid side for localizing tower candidates [default: 20]
    #[arg(long, value_name = "M")]
    pub split_side: Option<f64>,
    /// Minimum tower returns for a centred window [default: 20]
    #[arg(long, value_name = "N")]
    pub min_tower_points: Option<usize>,
    /// Height-above-ground cutoff in meters [default: 100]
    #[arg(long, value_name = "M")]
    pub max_height: Option<f32>,
    /// Which blocks to preprocess: train, test or all [default: all]
    #[arg(long, value_name = "WHICH")]
    pub split: Option<SplitSel>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory (as written by `synth`)
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Directory the checkpoint and history are written to
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Maximum training epochs [default: 50]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Windows per batch [default: 32]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Points sampled per window [default: 2048]
    #[arg(long, value_name = "N")]
    pub n_points: Option<usize>,
    /// Initial Adam learning rate [default: 0.001]
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    /// Epochs without improvement before the learning rate halves [default: 10]
    #[arg(long, value_name = "N")]
    pub plateau_patience: Option<u32>,
    /// Epochs without improvement before training stops [default: 10]
    #[arg(long, value_name = "N")]
    pub early_stop_patience: Option<u32>,
    /// Class-balancing exponent β [default: 0.999]
    #[arg(long, value_name = "BETA")]
    pub beta: Option<f64>,
    /// Window sampler: constrained or random [default: constrained]
    #[arg(long, value_name = "MODE")]
    pub sampler: Option<SamplerMode>,
    /// Zero the color/NDVI feature channels
    #[arg(long)]
    pub no_color: bool,
    /// Model size: light or full [default: light]
    #[arg(long, value_name = "VARIANT")]
    pub variant: Option<String>,
    /// Training seed; fixed seeds reproduce byte-identical checkpoints [default: 0]
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    /// Fraction of tower-free windows kept for segmentation [default: 0.05]
    #[arg(long, value_name = "FRAC")]
    pub bg_keep_frac: Option<f64>,
    /// Fraction of windows carved off for validation [default: 0.1]
    #[arg(long, value_name = "FRAC")]
    pub val_fraction: Option<f64>,
    /// Window side in meters [default: 40]
    #[arg(long, value_name = "M")]
    pub window_side: Option<f64>,
    /// Tiling stride in meters [default: the window side]
    #[arg(long, value_name = "M")]
    pub stride: Option<f64>,
    /// Height-above-ground cutoff in meters [default: 100]
    #[arg(long, value_name = "M")]
    pub max_height: Option<f32>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Corpus directory holding the scenes to label
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Classifier checkpoint (from `train-cls`)
    #[arg(long, value_name = "PATH")]
    pub cls: PathBuf,
    /// Segmenter checkpoint (from `train-seg`)
    #[arg(long, value_name = "PATH")]
    pub seg: PathBuf,
    /// Directory the labeled tiles and decision logs are written to
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Which blocks to label: train, test or all [default: test]
    #[arg(long, value_name = "WHICH")]
    pub split: Option<SplitSel>,
    /// Window side in meters [default: 40]
    #[arg(long, value_name = "M")]
    pub window_side: Option<f64>,
    /// Tiling stride in meters [default: the window side]
    #[arg(long, value_name = "M")]
    pub stride: Option<f64>,
    /// Tower probability at or above which a window is segmented [default: 0.5]
    #[arg(long, value_name = "P")]
    pub threshold: Option<f64>,
    /// Points sampled per window for the classifier [default: 2048]
    #[arg(long, value_name = "N")]
    pub n_points: Option<usize>,
    /// Height-above-ground cutoff in meters [default: 100]
    #[arg(long, value_name = "M")]
    pub max_height: Option<f32>,
    /// Sampling seed; fixed seeds reproduce byte-identical outputs [default: 0]
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Corpus directory holding the ground-truth tiles
    #[arg(long, value_name = "DIR")]
    pub truth: PathBuf,
    /// Directory holding `<block>.pred.pct1` tiles (and optionally
    /// `<block>.decisions.csv` logs) as written by `infer`
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Which blocks to score: train, test or all [default: test]
    #[arg(long, value_name = "WHICH")]
    pub split: Option<SplitSel>,
    /// Optional directory for summary.csv and report.csv
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Window side used at inference time [default: 40]
    #[arg(long, value_name = "M")]
    pub window_side: Option<f64>,
    /// Stride used at inference time [default: the window side]
    #[arg(long, value_name = "M")]
    pub stride: Option<f64>,
    /// Height cutoff used at inference time [default: 100]
    #[arg(long, value_name = "M")]
    pub max_height: Option<f32>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Corpus directory (as written by `synth`)
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Directory ablation.csv is written to
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Comma-separated seeds, one grid pass each [default: 0,1,2]
    #[arg(long, value_name = "LIST")]
    pub seeds: Option<String>,
    /// Maximum training epochs per configuration [default: 8]
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Windows per batch [default: 32]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Points sampled per window [default: 512]
    #[arg(long, value_name = "N")]
    pub n_points: Option<usize>,
    /// Initial Adam learning rate [default: 0.001]
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    /// Fraction of windows carved off for validation [default: 0.1]
    #[arg(long, value_name = "FRAC")]
    pub val_fraction: Option<f64>,
    /// Window side in meters [default: 40]
    #[arg(long, value_name = "M")]
    pub window_side: Option<f64>,
    /// Tiling stride in meters [default: the window side]
    #[arg(long, value_name = "M")]
    pub stride: Option<f64>,
    /// Classification threshold of the evaluated pipeline [default: 0.5]
    #[arg(long, value_name = "P")]
    pub threshold: Option<f64>,
    /// Height-above-ground cutoff in meters [default: 100]
    #[arg(long, value_name = "M")]
    pub max_height: Option<f32>,
    /// Also run the full-size architecture at the default settings
    #[arg(long)]
    pub include_full: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}
