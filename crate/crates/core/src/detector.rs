//! Stage 1: candidate detection on ×4 upsampled 64×64 three-channel slice patches.
//!
//! Two interchangeable models sit behind [`DetectorModel`]: a deterministic rule-based
//! reference (hypointense T1/FLAIR core with bright T2, gated by physical size) and a small
//! trainable fully convolutional objectness network whose components are gated by the anchor
//! configuration.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BoundingBox;
use crate::morphology::{equivalent_diameter_2d, label_2d, Connectivity2};
use crate::nn::{self, Adam, Conv2d, ConvGrads, LossKind};
use crate::patch::{compute_grid, downsample_binarized, extract_patches, upsample_nn, Patch2D};
use crate::scalar::Real;
use crate::volume::{slice_stack, Mask3D, MultiModalCase};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Native patch side before upsampling.
    pub patch_size: usize,
    pub overlap: f64,
    pub upsample_factor: usize,
    /// Anchor sides in upsampled pixels.
    pub anchor_sizes: Vec<f64>,
    /// Height-to-width ratios.
    pub aspect_ratios: Vec<f64>,
    /// Minimum centred IoU between a proposal box and its best anchor.
    pub anchor_match_iou: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden_channels: usize,
    /// Weight of lesion pixels in the objectness loss.
    pub positive_weight: f64,
    /// Objectness probability above which a pixel belongs to a proposal.
    pub objectness_threshold: f64,
    pub score_threshold: f64,
    pub hflip_probability: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            overlap: 0.5,
            upsample_factor: 4,
            anchor_sizes: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            aspect_ratios: vec![0.02, 0.25, 1.0, 2.0, 2.75],
            anchor_match_iou: 0.3,
            batch_size: 6,
            epochs: 20,
            learning_rate: 3e-3,
            hidden_channels: 8,
            positive_weight: 4.0,
            objectness_threshold: 0.5,
            score_threshold: 0.5,
            hflip_probability: 0.5,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.anchor_sizes.is_empty()
            || self.anchor_sizes.iter().any(|&a| !(a > 0.0))
            || self.anchor_sizes.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!("anchor sizes must be positive and ascending: {:?}", self.anchor_sizes));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return bad(format!("aspect ratios must be positive: {:?}", self.aspect_ratios));
        }
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("hflip_probability", self.hflip_probability),
            ("anchor_match_iou", self.anchor_match_iou),
            ("objectness_threshold", self.objectness_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.upsample_factor == 0 || self.patch_size == 0 || self.batch_size == 0 || self.hidden_channels == 0 {
            return bad("patch size, upsample factor, batch size and hidden channels must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1), got {}", self.overlap));
        }
        if !(self.learning_rate > 0.0 && self.positive_weight > 0.0) {
            return bad("learning rate and positive weight must be > 0".into());
        }
        Ok(())
    }

    /// Side of the patches the detector consumes.
    pub fn input_size(&self) -> usize {
        self.patch_size * self.upsample_factor
    }
}

/// One stage-1 candidate in upsampled patch coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Patch-sized instance mask.
    pub mask: Array2<bool>,
    pub score: f64,
    /// Native-resolution origin of the source patch.
    pub patch_origin: (usize, usize),
    pub slice_index: usize,
}

/// Thresholds of the rule-based reference detector, on z-scored intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleParams {
    pub t1_max: f64,
    pub t2_min: f64,
    pub flair_max: f64,
    /// Accepted in-plane equivalent diameter in mm.
    pub diameter_range_mm: [f64; 2],
    /// Widening of the size gate in voxels, for rasterisation.
    pub size_tolerance_voxels: f64,
    /// Steepness of the score as a function of the mean FLAIR core intensity.
    pub score_slope: f64,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            t1_max: 0.6,
            t2_min: 2.0,
            flair_max: 0.6,
            diameter_range_mm: [3.0, 15.0],
            size_tolerance_voxels: 1.0,
            score_slope: 2.0,
        }
    }
}

impl RuleParams {
    pub fn core_pixel<T: Real>(&self, t1: T, t2: T, flair: T) -> bool {
        t1.as_f64() < self.t1_max && t2.as_f64() > self.t2_min && flair.as_f64() < self.flair_max
    }

    /// Size gate on the in-plane equivalent diameter.
    pub fn size_ok(&self, diameter_mm: f64, spacing: [f64; 2]) -> bool {
        let tol = self.size_tolerance_voxels * spacing[0].max(spacing[1]);
        diameter_mm >= self.diameter_range_mm[0] - tol && diameter_mm <= self.diameter_range_mm[1] + tol
    }

    /// Lies in (0.5, 1] for every component that passed the FLAIR threshold.
    pub fn score(&self, mean_flair: f64) -> f64 {
        1.0 - nn::sigmoid(self.score_slope * (mean_flair - self.flair_max))
    }
}

/// Objectness network: block-mean downsampling by the upsample factor, two 3×3 ReLU
/// convolutions and a 1×1 logit head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PixelNet<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub head: Conv2d<T>,
}

struct PixelCache<T> {
    x: Array3<T>,
    a1: Array3<T>,
    a2: Array3<T>,
}

struct PixelGrads<T> {
    conv1: ConvGrads<T>,
    conv2: ConvGrads<T>,
    head: ConvGrads<T>,
}

impl<T: Real> PixelNet<T> {
    pub fn new(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(3, hidden, 3, rng),
            conv2: Conv2d::new(hidden, hidden, 3, rng),
            head: Conv2d::new(hidden, 1, 1, rng),
        }
    }

    fn forward(&self, x: Array3<T>) -> (Array2<T>, PixelCache<T>) {
        let a1 = nn::relu(&self.conv1.forward(&x));
        let a2 = nn::relu(&self.conv2.forward(&a1));
        let z = self.head.forward(&a2).index_axis_move(Axis(0), 0);
        (z, PixelCache { x, a1, a2 })
    }

    fn backward(&self, cache: &PixelCache<T>, grad_logits: Array2<T>, g: &mut PixelGrads<T>) {
        let gz = grad_logits.insert_axis(Axis(0));
        let ga2 = self.head.backward(&cache.a2, &gz, &mut g.head);
        let gh2 = nn::relu_backward(&cache.a2, &ga2);
        let ga1 = self.conv2.backward(&cache.a1, &gh2, &mut g.conv2);
        let gh1 = nn::relu_backward(&cache.a1, &ga1);
        self.conv1.backward(&cache.x, &gh1, &mut g.conv1);
    }

    fn zero_grads(&self) -> PixelGrads<T> {
        PixelGrads {
            conv1: ConvGrads::zeros_like(&self.conv1),
            conv2: ConvGrads::zeros_like(&self.conv2),
            head: ConvGrads::zeros_like(&self.head),
        }
    }

    /// Native-resolution objectness probabilities for a native-resolution input.
    pub fn probabilities(&self, native: Array3<T>) -> Array2<T> {
        self.forward(native).0.mapv(nn::sigmoid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound = "T: Real")]
pub enum DetectorKind<T> {
    RuleBased { params: RuleParams },
    PixelNet { net: PixelNet<T> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainingLog {
    pub epochs_run: usize,
    pub samples: usize,
    pub epochs: Vec<EpochLoss>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DetectorModel<T> {
    pub kind: DetectorKind<T>,
    pub config: DetectorConfig,
    pub log: DetectorTrainingLog,
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta<C, L> {
    pub model: String,
    pub config: C,
    pub log: L,
}

/// `<path>.meta.json`, the metadata file written next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl<T: Real> DetectorModel<T> {
    pub fn rule_based(params: RuleParams, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            kind: DetectorKind::RuleBased { params },
            config,
            log: DetectorTrainingLog::default(),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            DetectorKind::RuleBased { .. } => "rule_based",
            DetectorKind::PixelNet { .. } => "pixel_net",
        }
    }

    /// Writes the checkpoint and its `.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)?;
        write_json(
            &sidecar_path(path),
            &CheckpointMeta {
                model: self.kind_name().to_string(),
                config: &self.config,
                log: &self.log,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = read_json(path)?;
        model.config.validate()?;
        Ok(model)
    }
}

fn check_patch<T>(p: &Patch2D<T>, config: &DetectorConfig) -> Result<()> {
    let n = config.input_size();
    if p.channels.len() != 3 || p.size != n {
        return Err(Error::Geometry(format!(
            "detector expects 3 channels of {n}×{n}, got {} of {}×{}",
            p.channels.len(),
            p.size,
            p.size
        )));
    }
    Ok(())
}

fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Rule-based reference detection on an upsampled, z-scored patch.
pub fn rule_based_detect<T: Real>(
    patch: &Patch2D<T>,
    params: &RuleParams,
    spacing: [f64; 2],
    upsample_factor: usize,
) -> Vec<Detection> {
    let [t1, t2, fl] = [&patch.channels[0], &patch.channels[1], &patch.channels[2]];
    let core = Array2::from_shape_fn(t1.dim(), |i| params.core_pixel(t1[i], t2[i], fl[i]));
    let labels = label_2d(core.view(), Connectivity2::Eight);
    let px_area = spacing[0] * spacing[1] / (upsample_factor * upsample_factor) as f64;
    let mut out = Vec::new();
    for (k, comp) in labels.components.iter().enumerate() {
        let d = equivalent_diameter_2d(comp.len() as f64 * px_area);
        if !params.size_ok(d, spacing) {
            continue;
        }
        let mean_flair = comp.iter().map(|&p| fl[p].as_f64()).sum::<f64>() / comp.len() as f64;
        let id = k as u32 + 1;
        out.push(Detection {
            bbox: BoundingBox::enclosing(comp).expect("non-empty component"),
            mask: labels.labels.mapv(|l| l == id),
            score: params.score(mean_flair),
            patch_origin: patch.origin,
            slice_index: patch.slice_index,
        });
    }
    sort_by_score(&mut out);
    out
}

/// IoU of two boxes sharing a centre.
fn centred_iou(h1: f64, w1: f64, h2: f64, w2: f64) -> f64 {
    let inter = h1.min(h2) * w1.min(w2);
    inter / (h1 * w1 + h2 * w2 - inter)
}

/// Best centred IoU between a box and the anchor set.
pub fn best_anchor_iou(bbox: &BoundingBox, config: &DetectorConfig) -> f64 {
    let (h, w) = (bbox.height() as f64, bbox.width() as f64);
    let mut best: f64 = 0.0;
    for &s in &config.anchor_sizes {
        for &r in &config.aspect_ratios {
            best = best.max(centred_iou(h, w, s * r.sqrt(), s / r.sqrt()));
        }
    }
    best
}

fn block_mean<T: Real>(patch: &Patch2D<T>, factor: usize) -> Array3<T> {
    let n = patch.size;
    let mut x = Array3::zeros((3, n, n));
    for (c, ch) in patch.channels.iter().enumerate() {
        x.index_axis_mut(Axis(0), c).assign(ch);
    }
    nn::avgpool(&x, factor)
}

fn pixel_net_detect<T: Real>(net: &PixelNet<T>, patch: &Patch2D<T>, config: &DetectorConfig) -> Vec<Detection> {
    let f = config.upsample_factor;
    let prob = net.probabilities(block_mean(patch, f));
    let prob_up = crate::patch::upsample_plane(&prob, f);
    let fg = prob_up.mapv(|p| p.as_f64() > config.objectness_threshold);
    let labels = label_2d(fg.view(), Connectivity2::Eight);
    let mut out = Vec::new();
    for (k, comp) in labels.components.iter().enumerate() {
        let bbox = BoundingBox::enclosing(comp).expect("non-empty component");
        if best_anchor_iou(&bbox, config) < config.anchor_match_iou {
            continue;
        }
        let score = comp.iter().map(|&p| prob_up[p].as_f64()).sum::<f64>() / comp.len() as f64;
        let id = k as u32 + 1;
        out.push(Detection {
            bbox,
            mask: labels.labels.mapv(|l| l == id),
            score,
            patch_origin: patch.origin,
            slice_index: patch.slice_index,
        });
    }
    sort_by_score(&mut out);
    out
}

/// Detections on one upsampled patch with score at or above the configured threshold,
/// highest score first. `spacing` is the native in-plane voxel size.
pub fn detect<T: Real>(model: &DetectorModel<T>, patch: &Patch2D<T>, spacing: [f64; 2]) -> Result<Vec<Detection>> {
    check_patch(patch, &model.config)?;
    let mut dets = match &model.kind {
        DetectorKind::RuleBased { params } => rule_based_detect(patch, params, spacing, model.config.upsample_factor),
        DetectorKind::PixelNet { net } => pixel_net_detect(net, patch, &model.config),
    };
    dets.retain(|d| d.score >= model.config.score_threshold);
    Ok(dets)
}

/// Runs the detector over every grid patch of every slice of a normalized case.
pub fn detect_case<T: Real>(model: &DetectorModel<T>, case: &MultiModalCase<T>) -> Result<Vec<Detection>> {
    let cfg = &model.config;
    let [nx, ny, nz] = case.shape();
    let grid = compute_grid((nx, ny), cfg.patch_size, cfg.overlap)?;
    let sp = case.spacing();
    let per_slice: Vec<Result<Vec<Detection>>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let stack = slice_stack(case, z)?;
            let mut out = Vec::new();
            for p in extract_patches(&stack, &grid)? {
                out.extend(detect(model, &upsample_nn(&p, cfg.upsample_factor)?, [sp[0], sp[1]])?);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_slice {
        all.extend(r?);
    }
    Ok(all)
}

/// Downsamples each detection mask, places it at its patch origin and ORs everything into
/// a volume. Order of `detections` does not matter.
pub fn candidates_from_detections(
    detections: &[Detection],
    shape: [usize; 3],
    spacing: [f64; 3],
    upsample_factor: usize,
) -> Result<Mask3D> {
    let mut out = Mask3D::empty(shape, spacing)?;
    let data = out.data_mut();
    for d in detections {
        let m = downsample_binarized(&d.mask.mapv(|b| if b { 1.0f32 } else { 0.0 }), upsample_factor)?;
        let (h, w) = m.dim();
        let (r0, c0) = d.patch_origin;
        if d.slice_index >= shape[2] || r0 + h > shape[0] || c0 + w > shape[1] {
            return Err(Error::OutOfRange(format!(
                "detection patch at {:?} (size {h}) on slice {} outside volume {shape:?}",
                d.patch_origin, d.slice_index
            )));
        }
        let mut dst = data.slice_mut(s![r0..r0 + h, c0..c0 + w, d.slice_index]);
        dst.zip_mut_with(&m, |a, &b| *a |= b);
    }
    Ok(out)
}

/// Ground-truth instance clipped to a patch, in native patch coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: Array2<bool>,
    pub bbox: BoundingBox,
}

/// One training patch at native resolution; the detector sees its ×4 upsampled version.
#[derive(Clone, Debug)]
pub struct DetectionSample<T> {
    pub case_id: String,
    pub patch: Patch2D<T>,
    pub instances: Vec<Instance>,
}

impl<T: Real> DetectionSample<T> {
    pub fn target(&self) -> Array2<bool> {
        let n = self.patch.size;
        let mut t = Array2::from_elem((n, n), false);
        for inst in &self.instances {
            t.zip_mut_with(&inst.mask, |a, &b| *a |= b);
        }
        t
    }

    /// Instances with masks and boxes in upsampled coordinates.
    pub fn upsampled_instances(&self, factor: usize) -> Vec<Instance> {
        self.instances
            .iter()
            .map(|i| Instance {
                mask: crate::patch::upsample_plane(&i.mask, factor),
                bbox: i.bbox.scaled(factor),
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct DetectionDataset<T> {
    pub samples: Vec<DetectionSample<T>>,
}

/// All grid patches of every slice holding truth, with 8-connected truth components of the
/// slice clipped to each patch. Cases are normalized first.
pub fn build_training_set<T: Real>(cases: &[MultiModalCase<T>], config: &DetectorConfig) -> Result<DetectionDataset<T>> {
    config.validate()?;
    let mut samples = Vec::new();
    for raw in cases {
        let truth = raw
            .truth
            .as_ref()
            .ok_or_else(|| Error::Empty(format!("case {} has no truth mask", raw.case_id)))?;
        let case = raw.normalized(Default::default())?;
        let [nx, ny, nz] = case.shape();
        let grid = compute_grid((nx, ny), config.patch_size, config.overlap)?;
        for z in 0..nz {
            let plane = truth.plane(z);
            if !plane.iter().any(|&b| b) {
                continue;
            }
            let labels = label_2d(plane.view(), Connectivity2::Eight);
            let stack = slice_stack(&case, z)?;
            for patch in extract_patches(&stack, &grid)? {
                let (r0, c0) = patch.origin;
                let n = patch.size;
                let sub = labels.labels.slice(s![r0..r0 + n, c0..c0 + n]);
                let mut instances = Vec::new();
                for id in 1..=labels.components.len() as u32 {
                    let mask = sub.mapv(|l| l == id);
                    let pixels: Vec<(usize, usize)> =
                        mask.indexed_iter().filter(|(_, &b)| b).map(|(p, _)| p).collect();
                    if let Some(bbox) = BoundingBox::enclosing(&pixels) {
                        instances.push(Instance { mask, bbox });
                    }
                }
                samples.push(DetectionSample {
                    case_id: case.case_id.clone(),
                    patch,
                    instances,
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Empty("no slices with lacunes in any case".into()));
    }
    Ok(DetectionDataset { samples })
}

fn native_input<T: Real>(p: &Patch2D<T>, flip: bool) -> Array3<T> {
    let n = p.size;
    let mut x = Array3::zeros((3, n, n));
    for (c, ch) in p.channels.iter().enumerate() {
        let src = if flip { crate::patch::flip_cols(ch) } else { ch.clone() };
        x.index_axis_mut(Axis(0), c).assign(&src);
    }
    x
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains the objectness network with weighted cross-entropy, Adam and random horizontal
/// flips. Patches are fed at native resolution, which equals block-mean pooling of their ×4
/// nearest-neighbour upsampling.
pub fn train_detector<T: Real>(dataset: &DetectionDataset<T>, config: &DetectorConfig) -> Result<DetectorModel<T>> {
    config.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::Empty("empty detection dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = PixelNet::<T>::new(config.hidden_channels, &mut rng);
    let mut opt = Adam::<T>::new(config.learning_rate);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut log = DetectorTrainingLog {
        samples: dataset.samples.len(),
        ..Default::default()
    };
    let pos_w = T::lit(config.positive_weight);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let jobs: Vec<(usize, bool)> = chunk
                .iter()
                .map(|&i| (i, rng.gen_bool(config.hflip_probability)))
                .collect();
            let fwd: Vec<(Array2<T>, PixelCache<T>, Vec<bool>)> = jobs
                .par_iter()
                .map(|&(i, flip)| {
                    let s = &dataset.samples[i];
                    let (z, cache) = net.forward(native_input(&s.patch, flip));
                    let t = s.target();
                    let t = if flip { crate::patch::flip_cols(&t) } else { t };
                    (z, cache, t.iter().copied().collect())
                })
                .collect();
            let logits: Vec<Vec<T>> = fwd.iter().map(|(z, _, _)| z.iter().copied().collect()).collect();
            let targets: Vec<Vec<bool>> = fwd.iter().map(|(_, _, t)| t.clone()).collect();
            let (loss, grads) = nn::loss_and_grad(LossKind::Bce, &logits, &targets, pos_w);
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("detector batch of {} patches", chunk.len()),
                });
            }
            losses.push(loss);
            let partial: Vec<PixelGrads<T>> = fwd
                .par_iter()
                .zip(grads.into_par_iter())
                .map(|((z, cache, _), g)| {
                    let mut pg = net.zero_grads();
                    let g = Array2::from_shape_vec(z.dim(), g).expect("logit shape");
                    net.backward(cache, g, &mut pg);
                    pg
                })
                .collect();
            let mut total = net.zero_grads();
            for pg in &partial {
                total.conv1.weight += &pg.conv1.weight;
                total.conv1.bias += &pg.conv1.bias;
                total.conv2.weight += &pg.conv2.weight;
                total.conv2.bias += &pg.conv2.bias;
                total.head.weight += &pg.head.weight;
                total.head.bias += &pg.head.bias;
            }
            let [w1, b1] = total.conv1.slices();
            let [w2, b2] = total.conv2.slices();
            let [w3, b3] = total.head.slices();
            let PixelNet { conv1, conv2, head } = &mut net;
            let [pw1, pb1] = conv1.params_mut();
            let [pw2, pb2] = conv2.params_mut();
            let [pw3, pb3] = head.params_mut();
            opt.step(vec![pw1, pb1, pw2, pb2, pw3, pb3], vec![w1, b1, w2, b2, w3, b3]);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        log.epochs.push(EpochLoss {
            epoch,
            mean,
            median: median(&mut losses),
        });
        log.epochs_run = epoch + 1;
    }
    log.final_loss = log.epochs.last().map(|e| e.mean);
    Ok(DetectorModel {
        kind: DetectorKind::PixelNet { net },
        config: config.clone(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn patch_from(planes: [Array2<f32>; 3], origin: (usize, usize)) -> Patch2D<f32> {
        Patch2D::new(origin, 0, planes.to_vec()).unwrap()
    }

    fn rule_model() -> DetectorModel<f32> {
        DetectorModel::rule_based(RuleParams::default(), DetectorConfig::default()).unwrap()
    }

    /// Tissue-like background with an optional dark disc of radius `r` native pixels.
    fn disc_patch(r: f64) -> Patch2D<f32> {
        let n = 64;
        let inside = |i: usize, j: usize| {
            let (a, b) = (i as f64 - 31.5, j as f64 - 31.5);
            a * a + b * b <= r * r
        };
        let t1 = Array2::from_shape_fn((n, n), |(i, j)| if inside(i, j) { -0.2 } else { 1.3 });
        let t2 = Array2::from_shape_fn((n, n), |(i, j)| if inside(i, j) { 3.9 } else { 1.2 });
        let fl = Array2::from_shape_fn((n, n), |(i, j)| if inside(i, j) { -0.1 } else { 1.3 });
        let p = patch_from([t1, t2, fl], (0, 0));
        upsample_nn(&p, 4).unwrap()
    }

    #[test]
    fn zero_and_uniform_patches_yield_nothing() {
        let z = Array2::<f32>::zeros((256, 256));
        let p = patch_from([z.clone(), z.clone(), z], (0, 0));
        assert!(detect(&rule_model(), &p, [1.0, 1.0]).unwrap().is_empty());
        assert!(detect(&rule_model(), &disc_patch(0.0), [1.0, 1.0]).unwrap().is_empty());
    }

    #[test]
    fn planted_disc_detected_once() {
        let p = disc_patch(4.0);
        let dets = detect(&rule_model(), &p, [1.0, 1.0]).unwrap();
        assert_eq!(dets.len(), 1);
        let d = &dets[0];
        assert!(d.mask[[127, 127]] && d.bbox.contains(127, 127));
        assert!(d.score > 0.5 && d.score <= 1.0);
    }

    #[test]
    fn speck_is_filtered_by_size() {
        let p = disc_patch(0.5);
        assert!(detect(&rule_model(), &p, [1.0, 1.0]).unwrap().is_empty());
        let huge = disc_patch(12.0);
        assert!(detect(&rule_model(), &huge, [1.0, 1.0]).unwrap().is_empty());
    }

    #[test]
    fn score_threshold_one_keeps_only_perfect_scores() {
        let mut m = rule_model();
        m.config.score_threshold = 1.0;
        let dets = detect(&m, &disc_patch(4.0), [1.0, 1.0]).unwrap();
        assert!(dets.iter().all(|d| d.score == 1.0));
    }

    #[test]
    fn wrong_geometry_rejected() {
        let z = Array2::<f32>::zeros((64, 64));
        let p = patch_from([z.clone(), z.clone(), z], (0, 0));
        assert!(matches!(detect(&rule_model(), &p, [1.0, 1.0]), Err(Error::Geometry(_))));
    }

    #[test]
    fn candidate_map_from_one_detection() {
        let p = disc_patch(3.0);
        let dets = detect(&rule_model(), &p, [1.0, 1.0]).unwrap();
        let m = candidates_from_detections(&dets, [96, 96, 3], [1.0; 3], 4).unwrap();
        let expected = downsample_binarized(&dets[0].mask.mapv(|b| b as u8 as f32), 4).unwrap();
        assert_eq!(m.count(), expected.iter().filter(|&&b| b).count());
        assert_eq!(m.data().slice(s![0..64, 0..64, 0]), expected);
        let mut shifted = dets[0].clone();
        shifted.patch_origin = (32, 32);
        let both = candidates_from_detections(&[dets[0].clone(), dets[0].clone()], [96, 96, 3], [1.0; 3], 4).unwrap();
        assert_eq!(both, m);
        let a = candidates_from_detections(&[dets[0].clone(), shifted.clone()], [96, 96, 3], [1.0; 3], 4).unwrap();
        let b = candidates_from_detections(&[shifted, dets[0].clone()], [96, 96, 3], [1.0; 3], 4).unwrap();
        assert_eq!(a, b);
        assert!(!candidates_from_detections(&[], [96, 96, 3], [1.0; 3], 4).unwrap().any());
        let mut bad = dets[0].clone();
        bad.patch_origin = (40, 0);
        assert!(candidates_from_detections(&[bad], [96, 96, 3], [1.0; 3], 4).is_err());
    }

    #[test]
    fn anchors_accept_lacune_sized_boxes() {
        let cfg = DetectorConfig::default();
        let b = BoundingBox::new(0, 0, 24, 20).unwrap();
        assert!(best_anchor_iou(&b, &cfg) > 0.5);
        assert!((best_anchor_iou(&BoundingBox::new(0, 0, 8, 8).unwrap(), &cfg) - 1.0).abs() < 1e-12);
    }

    fn tiny_cases() -> Vec<MultiModalCase<f32>> {
        (0..2)
            .map(|s| {
                let spec = PhantomSpec {
                    shape: [64, 64, 24],
                    n_lacunes: 2,
                    n_decoys_outside_region: 0,
                    diameter_range: [3.0, 6.0],
                    seed: s,
                    ..PhantomSpec::default()
                };
                generate_phantom::<f32>(&spec, &format!("c{s}")).unwrap().case
            })
            .collect()
    }

    #[test]
    fn training_set_uses_only_lesion_slices() {
        let cases = tiny_cases();
        let cfg = DetectorConfig {
            patch_size: 32,
            ..DetectorConfig::default()
        };
        let ds = build_training_set(&cases, &cfg).unwrap();
        for s in &ds.samples {
            let case = cases.iter().find(|c| c.case_id == s.case_id).unwrap();
            assert!(case.truth.as_ref().unwrap().plane(s.patch.slice_index).iter().any(|&b| b));
            for inst in &s.instances {
                assert!(inst.mask.indexed_iter().all(|(p, &b)| !b || inst.bbox.contains(p.0, p.1)));
            }
        }
        let empty = generate_phantom::<f32>(
            &PhantomSpec {
                shape: [64, 64, 24],
                n_lacunes: 0,
                n_decoys_outside_region: 0,
                ..PhantomSpec::default()
            },
            "e",
        )
        .unwrap()
        .case;
        assert!(matches!(build_training_set(&[empty], &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn training_is_seeded_and_zero_epochs_is_valid() {
        let cases = tiny_cases();
        let cfg = DetectorConfig {
            patch_size: 32,
            epochs: 2,
            ..DetectorConfig::default()
        };
        let ds = build_training_set(&cases, &cfg).unwrap();
        let a = train_detector(&ds, &cfg).unwrap();
        let b = train_detector(&ds, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.epochs_run, 2);
        let z = train_detector(&ds, &DetectorConfig { epochs: 0, ..cfg.clone() }).unwrap();
        assert_eq!(z.log.epochs_run, 0);
        let p = upsample_nn(&ds.samples[0].patch, 4).unwrap();
        let dets = detect(&z, &p, [1.0, 1.0]).unwrap();
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.json");
        let m = rule_model();
        m.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        assert_eq!(DetectorModel::<f32>::load(&path).unwrap(), m);
    }
}
