//! Full prediction path: normalize, detect on upsampled patches, rebuild the candidate map,
//! mask with the prevalence prior, segment at candidates, mask again, and derive the
//! pseudo-uncertainty border.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{candidates_from_detections, detect_case, DetectorModel};
use crate::error::{Result, StageContext};
use crate::morphology::dilate_in_plane;
use crate::prevalence::apply_mask;
use crate::scalar::Real;
use crate::segmenter::{segment_candidates, PatchPredictor};
use crate::volume::{Mask3D, MultiModalCase, NormalizeOptions};

/// Stage names in execution order.
pub const STAGES: [&str; 7] = [
    "normalize",
    "detect",
    "candidates",
    "prevalence_mask",
    "segment",
    "final_mask",
    "uncertainty",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub millis: f64,
    /// Foreground voxels produced by the stage, where meaningful.
    pub voxels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub case_id: String,
    pub stages: Vec<StageRecord>,
    pub detections: usize,
    pub detector: String,
    pub detector_config_sha256: String,
    /// Caller-supplied identifier of the segmenter (e.g. kind and checkpoint digest).
    pub segmenter: String,
    pub prevalence_mask_sha256: String,
    pub normalize: NormalizeOptions,
    pub segmentation_sha256: String,
    pub uncertainty_sha256: String,
}

#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub segmentation: Mask3D,
    pub uncertainty: Mask3D,
    /// Stage-1 candidates after the first prevalence masking.
    pub candidates: Mask3D,
    pub provenance: Provenance,
}

/// Hex SHA-256 of any byte sequence.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    Sha256::digest(bytes.as_ref())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Digest of a mask's shape, spacing and voxel values.
pub fn mask_digest(m: &Mask3D) -> String {
    let mut h = Sha256::new();
    for n in m.shape() {
        h.update((n as u64).to_le_bytes());
    }
    for s in m.spacing() {
        h.update(s.to_le_bytes());
    }
    h.update(m.data().iter().map(|&b| b as u8).collect::<Vec<_>>());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a serializable value's JSON form.
pub fn json_digest(value: &impl Serialize) -> String {
    sha256_hex(serde_json::to_vec(value).expect("serializable"))
}

/// One-pixel 8-connected in-plane ring around the segmentation, excluding it.
pub fn make_uncertainty(seg: &Mask3D) -> Mask3D {
    let grown = dilate_in_plane(seg);
    let data = ndarray::Zip::from(grown.data())
        .and(seg.data())
        .map_collect(|&g, &s| g && !s);
    seg.with_data(data).expect("same geometry")
}

struct Clock {
    stages: Vec<StageRecord>,
    t: Instant,
}

impl Clock {
    fn lap(&mut self, name: &str, voxels: Option<usize>) {
        let now = Instant::now();
        self.stages.push(StageRecord {
            name: name.to_string(),
            millis: (now - self.t).as_secs_f64() * 1e3,
            voxels,
        });
        self.t = now;
    }
}

/// Runs the two-stage pipeline on one case. `subject_mask` is the prevalence mask already
/// resampled to the case grid. Errors carry the name of the failing stage.
pub fn predict_case<T: Real, S>(
    case: &MultiModalCase<T>,
    detector: &DetectorModel<T>,
    segmenter: &S,
    segmenter_id: &str,
    subject_mask: &Mask3D,
    normalize: NormalizeOptions,
) -> Result<SegmentationResult>
where
    S: PatchPredictor<T> + ?Sized,
{
    let mut clock = Clock {
        stages: Vec::new(),
        t: Instant::now(),
    };
    case.t1
        .check_same_geometry(subject_mask, "case vs prevalence mask")
        .stage("normalize")?;
    let norm = case.normalized(normalize).stage("normalize")?;
    clock.lap("normalize", None);

    let detections = detect_case(detector, &norm).stage("detect")?;
    clock.lap("detect", None);

    let raw = candidates_from_detections(
        &detections,
        case.shape(),
        case.spacing(),
        detector.config.upsample_factor,
    )
    .stage("candidates")?;
    clock.lap("candidates", Some(raw.count()));

    let candidates = apply_mask(&raw, subject_mask).stage("prevalence_mask")?;
    clock.lap("prevalence_mask", Some(candidates.count()));

    let seg = segment_candidates(&norm, &candidates, segmenter).stage("segment")?;
    clock.lap("segment", Some(seg.count()));

    let segmentation = apply_mask(&seg, subject_mask).stage("final_mask")?;
    clock.lap("final_mask", Some(segmentation.count()));

    let uncertainty = make_uncertainty(&segmentation);
    clock.lap("uncertainty", Some(uncertainty.count()));

    let provenance = Provenance {
        case_id: case.case_id.clone(),
        stages: clock.stages,
        detections: detections.len(),
        detector: detector.kind_name().to_string(),
        detector_config_sha256: json_digest(&(&detector.kind, &detector.config)),
        segmenter: segmenter_id.to_string(),
        prevalence_mask_sha256: mask_digest(subject_mask),
        normalize,
        segmentation_sha256: mask_digest(&segmentation),
        uncertainty_sha256: mask_digest(&uncertainty),
    };
    Ok(SegmentationResult {
        segmentation,
        uncertainty,
        candidates,
        provenance,
    })
}
