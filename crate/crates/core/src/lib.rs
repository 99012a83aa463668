//! Two-stage lacune detection and segmentation for co-registered T1/T2/FLAIR brain MR.
//!
//! Stage 1 proposes candidates on ×4 upsampled 64×64 slice patches, stage 2 segments 32×32
//! patches centred on the candidates, and a lesion prevalence mask removes false positives
//! that fall outside plausible anatomical locations.

pub mod detector;
pub mod error;
pub mod metrics;
pub mod morphology;
pub mod nifti_io;
pub mod nn;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod prevalence;
pub mod scalar;
pub mod segmenter;
pub mod volume;

pub use detector::{Detection, DetectorConfig, DetectorModel, RuleParams};
pub use error::{Error, Result};
pub use metrics::{BoundingBox, LesionCounts, MetricsReport, SizeClass};
pub use patch::{compute_grid, Fusion, Patch2D, PatchGrid};
pub use phantom::{generate_phantom, Phantom, PhantomSpec, PlantedLesion};
pub use pipeline::{make_uncertainty, predict_case, SegmentationResult};
pub use prevalence::{apply_mask, PrevalenceMap, TransformSpec};
pub use scalar::Real;
pub use segmenter::{PatchPredictor, SegmenterConfig, SegmenterModel, ThresholdSetting};
pub use volume::{Mask3D, MultiModalCase, NormalizeOptions, SliceStack, Volume3D};

/// Single-precision aliases used by the command-line tools.
pub type Volume = Volume3D<f32>;
pub type Case = MultiModalCase<f32>;
pub type Detector = DetectorModel<f32>;
pub type Segmenter = SegmenterModel<f32>;
pub type Prevalence = PrevalenceMap<f32>;
