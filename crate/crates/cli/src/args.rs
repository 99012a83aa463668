//! Command-line surface. Flags override values read from `--config` / `--spec` files.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lacune", version, about = "Two-stage lacune detection and segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic cases with planted lacunes and decoys.
    GenPhantoms(GenPhantomsArgs),
    /// Aggregate lesion masks into a prevalence map and its post-processed mask.
    BuildPrevmap(BuildPrevmapArgs),
    /// Train the stage-1 candidate detector.
    TrainDetect(TrainDetectArgs),
    /// Train the stage-2 patch segmenter.
    TrainSegment(TrainSegmentArgs),
    /// Run the full pipeline on one or more cases.
    Predict(PredictArgs),
    /// Score predicted masks against truth masks.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct GenPhantomsArgs {
    /// Number of phantoms.
    #[arg(long)]
    pub n: usize,
    /// JSON phantom specification.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Base seed; phantom `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildPrevmapArgs {
    /// Directory of co-registered lesion masks (`*.nii[.gz]` files or case directories
    /// holding `truth.nii[.gz]`).
    #[arg(long)]
    pub masks: PathBuf,
    /// JSON map-building configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Atlas-space CSF mask removed from the final mask.
    #[arg(long)]
    pub csf: Option<PathBuf>,
    #[arg(long)]
    pub dilation_mm: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainDetectArgs {
    /// Directory of case directories with truth masks.
    #[arg(long)]
    pub cases: PathBuf,
    /// JSON detector configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainSegmentArgs {
    #[arg(long)]
    pub cases: PathBuf,
    /// Atlas-space prevalence mask.
    #[arg(long)]
    pub prevmask: PathBuf,
    /// JSON transform from atlas to subject space (default: identity).
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// JSON segmenter configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON `{"train": [...], "validation": [...]}` case-id split.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Case directory; repeatable.
    #[arg(long)]
    pub case: Vec<PathBuf>,
    /// Directory whose subdirectories are cases.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    /// Detector checkpoint, or `rule-based`.
    #[arg(long)]
    pub detector: String,
    /// Segmenter checkpoint, or `rule-based`.
    #[arg(long)]
    pub segmenter: String,
    /// Atlas-space prevalence mask.
    #[arg(long)]
    pub prevmask: PathBuf,
    /// JSON transform from atlas to subject space (default: identity).
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// Restrict normalization statistics to nonzero voxels.
    #[arg(long)]
    pub foreground_normalization: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-slice PNG overlays.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    /// Cases processed concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted masks (`<id>_seg.nii[.gz]`, `<id>.nii[.gz]` or case directories).
    #[arg(long)]
    pub pred: PathBuf,
    /// Truth masks in the same layouts.
    #[arg(long)]
    pub truth: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Area scale for size classes, matching the detector's upsampling.
    #[arg(long, default_value_t = 4)]
    pub upsample_factor: usize,
    #[arg(long)]
    pub jobs: Option<usize>,
}
