//! Stage 2: patch segmentation at candidate locations.
//!
//! Training patches are sampled around truth voxels and around prevalence-mask background
//! at a fixed lacune/background ratio; the model is a small two-level U-Net; inference runs
//! one candidate-centred patch per component per slice and ORs the thresholded outputs.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array, Array2, Array3, Axis, Dimension};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{read_json, sidecar_path, write_json, CheckpointMeta, RuleParams};
use crate::error::{Error, Result};
use crate::metrics::{dice_arrays, dice_from_counts};
use crate::morphology::{fill_holes_2d, label_3d, Connectivity3};
use crate::nn::{self, Adam, Conv2d, ConvGrads, LossKind};
use crate::patch::{compute_grid, extract_patches, flip_cols, patch_at, reconstruct, Fusion, Patch2D};
use crate::scalar::Real;
use crate::volume::{slice_stack, Mask3D, MultiModalCase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeTag {
    Optimize,
}

/// Either a fixed posterior threshold or `"optimize"` on validation data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSetting {
    Fixed(f64),
    Search(OptimizeTag),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub patch_size: usize,
    /// Overlap of the dense sliding-window helper.
    pub overlap: f64,
    /// (lacune, background) fractions of the training patches.
    pub lacune_background_ratio: [f64; 2],
    /// Cap on positive patches; all truth voxels are eligible centres.
    pub max_positives: Option<usize>,
    /// Maximum random shift of positive patch centres, pixels.
    pub jitter: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub base_channels: usize,
    pub loss: LossKind,
    pub hflip_probability: f64,
    pub threshold: ThresholdSetting,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            overlap: 0.5,
            lacune_background_ratio: [0.1, 0.9],
            max_positives: None,
            jitter: 0,
            epochs: 30,
            batch_size: 8,
            learning_rate: 3e-3,
            base_channels: 8,
            loss: LossKind::DiceBce,
            hflip_probability: 0.5,
            threshold: ThresholdSetting::Fixed(0.5),
            seed: 0,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [p, b] = self.lacune_background_ratio;
        if !(p > 0.0 && b > 0.0 && ((p + b) - 1.0).abs() < 1e-9) {
            return bad(format!("ratio components must be positive and sum to 1, got {:?}", self.lacune_background_ratio));
        }
        if self.patch_size < 4 || !self.patch_size.is_multiple_of(4) {
            return bad(format!("patch size must be a positive multiple of 4, got {}", self.patch_size));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1), got {}", self.overlap));
        }
        if self.batch_size == 0 || self.base_channels == 0 || !(self.learning_rate > 0.0) {
            return bad("batch size, channels and learning rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return bad("hflip_probability must lie in [0, 1]".into());
        }
        if let ThresholdSetting::Fixed(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("threshold must lie in [0, 1], got {t}"));
            }
        }
        Ok(())
    }
}

/// One training patch: normalized (T1, T2, FLAIR) input and the truth crop.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample<T> {
    pub case_id: String,
    pub slice_index: usize,
    pub origin: (usize, usize),
    pub input: Array3<T>,
    pub target: Array2<bool>,
    pub positive: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatchDataset<T> {
    pub samples: Vec<SegSample<T>>,
}

impl<T> PatchDataset<T> {
    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.positive).count()
    }

    pub fn negatives(&self) -> usize {
        self.samples.len() - self.positives()
    }

    /// Patch centres as (case, slice, origin), in sampling order.
    pub fn centres(&self) -> Vec<(String, usize, (usize, usize))> {
        self.samples
            .iter()
            .map(|s| (s.case_id.clone(), s.slice_index, s.origin))
            .collect()
    }
}

fn stack_input<T: Real>(p: &Patch2D<T>) -> Array3<T> {
    let n = p.size;
    let mut x = Array3::zeros((p.channels.len(), n, n));
    for (c, ch) in p.channels.iter().enumerate() {
        x.index_axis_mut(Axis(0), c).assign(ch);
    }
    x
}

/// Top-left origin of a `size` window centred on `centre`, clamped to the plane.
pub fn centred_origin(centre: (f64, f64), size: usize, plane: (usize, usize)) -> (usize, usize) {
    let clamp = |c: f64, dim: usize| {
        let o = c.round() as i64 - (size / 2) as i64;
        o.clamp(0, (dim - size) as i64) as usize
    };
    (clamp(centre.0, plane.0), clamp(centre.1, plane.1))
}

/// Number of background patches that accompany `n_pos` positives at `ratio`.
pub fn background_count(n_pos: usize, ratio: [f64; 2]) -> usize {
    (n_pos as f64 * ratio[1] / ratio[0]).round() as usize
}

/// Samples positive patches centred on truth voxels and background patches centred on
/// prevalence-mask voxels without truth. Cases are normalized first.
pub fn sample_training_patches<T: Real>(
    cases: &[MultiModalCase<T>],
    subject_masks: &[Mask3D],
    config: &SegmenterConfig,
) -> Result<PatchDataset<T>> {
    config.validate()?;
    if cases.len() != subject_masks.len() {
        return Err(Error::Config(format!(
            "{} cases but {} prevalence masks",
            cases.len(),
            subject_masks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pos = Vec::new();
    let mut bg = Vec::new();
    let mut normalized = Vec::with_capacity(cases.len());
    for (ci, (case, mask)) in cases.iter().zip(subject_masks).enumerate() {
        let truth = case
            .truth
            .as_ref()
            .ok_or_else(|| Error::Empty(format!("case {} has no truth mask", case.case_id)))?;
        case.t1.check_same_geometry(mask, "case vs prevalence mask")?;
        let [nx, ny, _] = case.shape();
        if config.patch_size > nx || config.patch_size > ny {
            return Err(Error::Geometry(format!("patch {} exceeds plane {nx}×{ny}", config.patch_size)));
        }
        for ((x, y, z), &t) in truth.data().indexed_iter() {
            if t {
                pos.push((ci, x, y, z));
            } else if mask.data()[[x, y, z]] {
                bg.push((ci, x, y, z));
            }
        }
        normalized.push(case.normalized(Default::default())?);
    }
    if pos.is_empty() {
        return Err(Error::Empty("no truth voxels in any case".into()));
    }
    if bg.is_empty() {
        return Err(Error::Empty("prevalence masks hold no background voxels".into()));
    }
    let n_pos = config.max_positives.map_or(pos.len(), |m| m.min(pos.len()));
    let n_bg = background_count(n_pos, config.lacune_background_ratio);
    let chosen_pos: Vec<_> = sample_indices(&mut rng, pos.len(), n_pos).into_iter().map(|i| pos[i]).collect();
    let chosen_bg: Vec<_> = if n_bg <= bg.len() {
        sample_indices(&mut rng, bg.len(), n_bg).into_iter().map(|i| bg[i]).collect()
    } else {
        (0..n_bg).map(|_| bg[rng.gen_range(0..bg.len())]).collect()
    };

    let p = config.patch_size;
    let mut samples = Vec::with_capacity(n_pos + n_bg);
    for (positive, list) in [(true, chosen_pos), (false, chosen_bg)] {
        for (ci, x, y, z) in list {
            let case = &normalized[ci];
            let [nx, ny, _] = case.shape();
            let j = config.jitter as i64;
            let (dx, dy) = if positive && j > 0 {
                (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                (0, 0)
            };
            let origin = centred_origin(((x as i64 + dx) as f64, (y as i64 + dy) as f64), p, (nx, ny));
            let stack = slice_stack(case, z)?;
            let patch = patch_at(&stack, origin, p)?;
            let truth = case.truth.as_ref().expect("checked above");
            let target = truth
                .data()
                .slice(s![origin.0..origin.0 + p, origin.1..origin.1 + p, z])
                .to_owned();
            samples.push(SegSample {
                case_id: case.case_id.clone(),
                slice_index: z,
                origin,
                input: stack_input(&patch),
                target,
                positive,
            });
        }
    }
    Ok(PatchDataset { samples })
}

/// Two-level U-Net: two 3×3 convolutions per level, max-pool down, nearest-neighbour up,
/// skip concatenation, and a 1×1 logit head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct UNet<T> {
    pub enc1a: Conv2d<T>,
    pub enc1b: Conv2d<T>,
    pub enc2a: Conv2d<T>,
    pub enc2b: Conv2d<T>,
    pub dec1: Conv2d<T>,
    pub head: Conv2d<T>,
}

struct UNetCache<T> {
    x: Array3<T>,
    e1a: Array3<T>,
    e1b: Array3<T>,
    pool_idx: Vec<usize>,
    pooled: Array3<T>,
    e2a: Array3<T>,
    e2b: Array3<T>,
    cat: Array3<T>,
    d1: Array3<T>,
}

struct UNetGrads<T>([ConvGrads<T>; 6]);

impl<T: Real> UNet<T> {
    pub fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            enc1a: Conv2d::new(3, c, 3, rng),
            enc1b: Conv2d::new(c, c, 3, rng),
            enc2a: Conv2d::new(c, 2 * c, 3, rng),
            enc2b: Conv2d::new(2 * c, 2 * c, 3, rng),
            dec1: Conv2d::new(3 * c, c, 3, rng),
            head: Conv2d::new(c, 1, 1, rng),
        }
    }

    fn layers(&self) -> [&Conv2d<T>; 6] {
        [&self.enc1a, &self.enc1b, &self.enc2a, &self.enc2b, &self.dec1, &self.head]
    }

    fn layers_mut(&mut self) -> [&mut Conv2d<T>; 6] {
        [
            &mut self.enc1a,
            &mut self.enc1b,
            &mut self.enc2a,
            &mut self.enc2b,
            &mut self.dec1,
            &mut self.head,
        ]
    }

    fn zero_grads(&self) -> UNetGrads<T> {
        UNetGrads(self.layers().map(ConvGrads::zeros_like))
    }

    fn forward(&self, x: Array3<T>) -> (Array2<T>, UNetCache<T>) {
        let e1a = nn::relu(&self.enc1a.forward(&x));
        let e1b = nn::relu(&self.enc1b.forward(&e1a));
        let (pooled, pool_idx) = nn::maxpool2(&e1b);
        let e2a = nn::relu(&self.enc2a.forward(&pooled));
        let e2b = nn::relu(&self.enc2b.forward(&e2a));
        let cat = nn::concat(&e1b, &nn::upsample2(&e2b));
        let d1 = nn::relu(&self.dec1.forward(&cat));
        let z = self.head.forward(&d1).index_axis_move(Axis(0), 0);
        (
            z,
            UNetCache {
                x,
                e1a,
                e1b,
                pool_idx,
                pooled,
                e2a,
                e2b,
                cat,
                d1,
            },
        )
    }

    fn backward(&self, c: &UNetCache<T>, grad_logits: Array2<T>, g: &mut UNetGrads<T>) {
        let [g1a, g1b, g2a, g2b, gd1, gh] = &mut g.0;
        let gz = grad_logits.insert_axis(Axis(0));
        let gd = self.head.backward(&c.d1, &gz, gh);
        let gd = nn::relu_backward(&c.d1, &gd);
        let gcat = self.dec1.backward(&c.cat, &gd, gd1);
        let ch1 = c.e1b.dim().0;
        let mut ge1b = gcat.slice(s![..ch1, .., ..]).to_owned();
        let gup = gcat.slice(s![ch1.., .., ..]).to_owned();
        let ge2b = nn::upsample2_backward(&gup);
        let ge2b = nn::relu_backward(&c.e2b, &ge2b);
        let ge2a = self.enc2b.backward(&c.e2a, &ge2b, g2b);
        let ge2a = nn::relu_backward(&c.e2a, &ge2a);
        let gpool = self.enc2a.backward(&c.pooled, &ge2a, g2a);
        ge1b += &nn::maxpool2_backward(&gpool, &c.pool_idx, c.e1b.dim());
        let ge1b = nn::relu_backward(&c.e1b, &ge1b);
        let ge1a = self.enc1b.backward(&c.e1a, &ge1b, g1b);
        let ge1a = nn::relu_backward(&c.e1a, &ge1a);
        self.enc1a.backward(&c.x, &ge1a, g1a);
    }

    pub fn probabilities(&self, x: Array3<T>) -> Array2<T> {
        self.forward(x).0.mapv(nn::sigmoid)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// Pooled Dice of the training batches at threshold 0.5, before each update.
    pub train_dice: f64,
    pub val_loss: Option<f64>,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmenterTrainingLog {
    pub epochs_run: usize,
    pub positives: usize,
    pub negatives: usize,
    pub epochs: Vec<SegEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[serde(bound = "T: Real")]
pub enum SegmenterKind<T> {
    /// Intensity rule plus hole filling; probabilities are 0 or 1.
    Threshold { params: RuleParams },
    UNet { net: UNet<T> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SegmenterModel<T> {
    pub kind: SegmenterKind<T>,
    pub config: SegmenterConfig,
    /// Posterior threshold used at inference.
    pub threshold: f64,
    pub log: SegmenterTrainingLog,
}

/// Anything that maps a normalized 3-channel patch to per-pixel probabilities.
pub trait PatchPredictor<T>: Sync {
    fn predict_patch(&self, patch: &Patch2D<T>) -> Result<Array2<T>>;
    fn patch_size(&self) -> usize;
    fn threshold(&self) -> f64;
}

impl<T: Real> SegmenterModel<T> {
    pub fn rule_based(params: RuleParams, config: SegmenterConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            kind: SegmenterKind::Threshold { params },
            config,
            threshold: 0.5,
            log: SegmenterTrainingLog::default(),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            SegmenterKind::Threshold { .. } => "threshold",
            SegmenterKind::UNet { .. } => "unet",
        }
    }

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

impl<T: Real> PatchPredictor<T> for SegmenterModel<T> {
    fn predict_patch(&self, patch: &Patch2D<T>) -> Result<Array2<T>> {
        let n = self.config.patch_size;
        if patch.size != n || patch.channels.len() != 3 {
            return Err(Error::Geometry(format!(
                "segmenter expects 3 channels of {n}×{n}, got {} of {}×{}",
                patch.channels.len(),
                patch.size,
                patch.size
            )));
        }
        Ok(match &self.kind {
            SegmenterKind::UNet { net } => net.probabilities(stack_input(patch)),
            SegmenterKind::Threshold { params } => {
                let [t1, t2, fl] = [&patch.channels[0], &patch.channels[1], &patch.channels[2]];
                let core = Array2::from_shape_fn(t1.dim(), |i| params.core_pixel(t1[i], t2[i], fl[i]));
                fill_holes_2d(core.view()).mapv(|b| if b { T::one() } else { T::zero() })
            }
        })
    }

    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }
}

fn flip_sample<T: Real>(x: &Array3<T>, t: &Array2<bool>) -> (Array3<T>, Array2<bool>) {
    (x.slice(s![.., .., ..;-1]).as_standard_layout().into_owned(), flip_cols(t))
}

fn pooled_dice<T: Real>(logits: &[Vec<T>], targets: &[Vec<bool>]) -> (usize, usize, usize) {
    let (mut i, mut a, mut b) = (0, 0, 0);
    for (z, t) in logits.iter().zip(targets) {
        for (&z, &t) in z.iter().zip(t) {
            let p = z > T::zero();
            i += (p && t) as usize;
            a += p as usize;
            b += t as usize;
        }
    }
    (i, a, b)
}

fn evaluate_set<T: Real>(net: &UNet<T>, data: &PatchDataset<T>, loss: LossKind) -> (f64, f64) {
    let logits: Vec<Vec<T>> = data
        .samples
        .par_iter()
        .map(|s| net.forward(s.input.clone()).0.iter().copied().collect())
        .collect();
    let targets: Vec<Vec<bool>> = data.samples.iter().map(|s| s.target.iter().copied().collect()).collect();
    let (l, _) = nn::loss_and_grad(loss, &logits, &targets, T::one());
    let (i, a, b) = pooled_dice(&logits, &targets);
    (l.as_f64(), dice_from_counts(i, a, b))
}

/// Trains the U-Net; `validation`, when given, is evaluated after every epoch.
pub fn train_segmenter<T: Real>(
    dataset: &PatchDataset<T>,
    validation: Option<&PatchDataset<T>>,
    config: &SegmenterConfig,
) -> Result<SegmenterModel<T>> {
    config.validate()?;
    if dataset.positives() == 0 || dataset.negatives() == 0 {
        return Err(Error::Degenerate(format!(
            "segmenter training needs both classes, got {} positive and {} background patches",
            dataset.positives(),
            dataset.negatives()
        )));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.target.dim() != (config.patch_size, config.patch_size)) {
        return Err(Error::Geometry(format!("training patch of shape {:?}", s.target.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = UNet::<T>::new(config.base_channels, &mut rng);
    let mut opt = Adam::<T>::new(config.learning_rate);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut log = SegmenterTrainingLog {
        positives: dataset.positives(),
        negatives: dataset.negatives(),
        ..Default::default()
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut di, mut da, mut db) = (0, 0, 0);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let flips: Vec<bool> = chunk.iter().map(|_| rng.gen_bool(config.hflip_probability)).collect();
            let fwd: Vec<(Array2<T>, UNetCache<T>, Vec<bool>)> = chunk
                .par_iter()
                .zip(flips.par_iter())
                .map(|(&i, &flip)| {
                    let s = &dataset.samples[i];
                    let (x, t) = if flip {
                        flip_sample(&s.input, &s.target)
                    } else {
                        (s.input.clone(), s.target.clone())
                    };
                    let (z, cache) = net.forward(x);
                    (z, cache, t.iter().copied().collect())
                })
                .collect();
            let logits: Vec<Vec<T>> = fwd.iter().map(|(z, _, _)| z.iter().copied().collect()).collect();
            let targets: Vec<Vec<bool>> = fwd.iter().map(|(_, _, t)| t.clone()).collect();
            let (i, a, c) = pooled_dice(&logits, &targets);
            (di, da, db) = (di + i, da + a, db + c);
            let (loss, grads) = nn::loss_and_grad(config.loss, &logits, &targets, T::one());
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("segmenter batch of {} patches", chunk.len()),
                });
            }
            loss_sum += loss;
            batches += 1;
            let partial: Vec<UNetGrads<T>> = fwd
                .par_iter()
                .zip(grads.into_par_iter())
                .map(|((z, cache, _), g)| {
                    let mut pg = net.zero_grads();
                    net.backward(cache, Array2::from_shape_vec(z.dim(), g).expect("logit shape"), &mut pg);
                    pg
                })
                .collect();
            let mut total = net.zero_grads();
            for pg in &partial {
                for (t, p) in total.0.iter_mut().zip(&pg.0) {
                    t.weight += &p.weight;
                    t.bias += &p.bias;
                }
            }
            let grads: Vec<&[T]> = total.0.iter().flat_map(|g| g.slices()).collect();
            let params: Vec<&mut [T]> = net.layers_mut().into_iter().flat_map(|l| l.params_mut()).collect();
            opt.step(params, grads);
        }
        let (val_loss, val_dice) = match validation {
            Some(v) if !v.samples.is_empty() => {
                let (l, d) = evaluate_set(&net, v, config.loss);
                (Some(l), Some(d))
            }
            _ => (None, None),
        };
        log.epochs.push(SegEpoch {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_dice: dice_from_counts(di, da, db),
            val_loss,
            val_dice,
        });
        log.epochs_run = epoch + 1;
    }
    Ok(SegmenterModel {
        kind: SegmenterKind::UNet { net },
        config: config.clone(),
        threshold: match config.threshold {
            ThresholdSetting::Fixed(t) => t,
            ThresholdSetting::Search(_) => 0.5,
        },
        log,
    })
}

/// Probability maps of a dataset's inputs.
pub fn predict_dataset<T: Real>(model: &SegmenterModel<T>, data: &PatchDataset<T>) -> Result<Vec<Array2<T>>> {
    data.samples
        .par_iter()
        .map(|s| {
            let channels = s.input.axis_iter(Axis(0)).map(|c| c.to_owned()).collect();
            model.predict_patch(&Patch2D::new(s.origin, s.slice_index, channels)?)
        })
        .collect()
}

/// Threshold grid 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub threshold: f64,
    pub mean_dice: f64,
    /// Mean Dice at every grid point.
    pub curve: Vec<(f64, f64)>,
}

/// Grid search for the posterior threshold maximising mean Dice over the pairs
/// (`probability >= threshold` is foreground). Ties go to the lowest threshold.
pub fn optimize_threshold<T: Real, D: Dimension>(pairs: &[(Array<T, D>, Array<bool, D>)]) -> Result<ThresholdSearch> {
    if pairs.is_empty() {
        return Err(Error::Empty("no prediction/truth pairs".into()));
    }
    let mut curve = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    for t in threshold_grid() {
        let tt = T::lit(t);
        let mut sum = 0.0;
        for (p, truth) in pairs {
            let pred = p.mapv(|v| v >= tt);
            sum += dice_arrays(pred.view(), truth.view())?;
        }
        let mean = sum / pairs.len() as f64;
        curve.push((t, mean));
        if best.is_none_or(|(_, m)| mean > m) {
            best = Some((t, mean));
        }
    }
    let (threshold, mean_dice) = best.expect("non-empty grid");
    Ok(ThresholdSearch {
        threshold,
        mean_dice,
        curve,
    })
}

/// Candidate-centred inference: one patch per 26-connected candidate component per slice it
/// occupies, centred on the in-slice centroid and clamped to the plane. Thresholded outputs
/// are ORed; voxels outside every patch stay 0. `case` must already be normalized.
pub fn segment_candidates<T: Real, P: PatchPredictor<T> + ?Sized>(
    case: &MultiModalCase<T>,
    candidate_map: &Mask3D,
    model: &P,
) -> Result<Mask3D> {
    case.t1.check_same_geometry(candidate_map, "case vs candidate map")?;
    let [nx, ny, _] = case.shape();
    let p = model.patch_size();
    if p > nx || p > ny {
        return Err(Error::Geometry(format!("patch {p} exceeds plane {nx}×{ny}")));
    }
    let labels = label_3d(candidate_map.data().view(), Connectivity3::TwentySix);
    let mut sites = BTreeSet::new();
    for comp in &labels.components {
        let mut per_slice: std::collections::BTreeMap<usize, (f64, f64, usize)> = Default::default();
        for &(x, y, z) in comp {
            let e = per_slice.entry(z).or_insert((0.0, 0.0, 0));
            e.0 += x as f64;
            e.1 += y as f64;
            e.2 += 1;
        }
        for (z, (sx, sy, n)) in per_slice {
            let c = (sx / n as f64, sy / n as f64);
            sites.insert((z, centred_origin(c, p, (nx, ny))));
        }
    }
    let sites: Vec<(usize, (usize, usize))> = sites.into_iter().collect();
    let threshold = T::lit(model.threshold());
    let predictions: Vec<Result<Array2<bool>>> = sites
        .par_iter()
        .map(|&(z, origin)| {
            let stack = slice_stack(case, z)?;
            let prob = model.predict_patch(&patch_at(&stack, origin, p)?)?;
            Ok(prob.mapv(|v| v >= threshold))
        })
        .collect();
    let mut out = Mask3D::empty(case.shape(), case.spacing())?;
    let data = out.data_mut();
    for (&(z, (r, c)), pred) in sites.iter().zip(predictions) {
        let pred = pred?;
        data.slice_mut(s![r..r + p, c..c + p, z]).zip_mut_with(&pred, |a, &b| *a |= b);
    }
    Ok(out)
}

/// Dense sliding-window probabilities for one slice, mean-fused over the configured overlap.
pub fn predict_plane<T: Real, P: PatchPredictor<T> + ?Sized>(
    case: &MultiModalCase<T>,
    z: usize,
    model: &P,
    overlap: f64,
) -> Result<Array2<T>> {
    let stack = slice_stack(case, z)?;
    let grid = compute_grid(stack.plane_shape(), model.patch_size(), overlap)?;
    let patches = extract_patches(&stack, &grid)?;
    let probs: Vec<Patch2D<T>> = patches
        .par_iter()
        .map(|p| Patch2D::new(p.origin, z, vec![model.predict_patch(p)?]))
        .collect::<Result<_>>()?;
    reconstruct(&probs, &grid, Fusion::Mean)
}
