//! Overlap metrics, size-stratified AP/AR under greedy IoU matching, and lesion-wise counts.

use std::collections::BTreeMap;

use ndarray::{ArrayView, Axis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{label_2d, label_3d, Connectivity2, Connectivity3};
use crate::volume::Mask3D;

/// Dice from raw counts; both sets empty gives 1.0.
pub fn dice_from_counts(intersection: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (a + b) as f64
    }
}

/// IoU from raw counts; both sets empty gives 1.0.
pub fn iou_from_counts(intersection: usize, a: usize, b: usize) -> f64 {
    let union = a + b - intersection;
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

fn overlap_counts<D: Dimension>(a: ArrayView<bool, D>, b: ArrayView<bool, D>) -> Result<(usize, usize, usize)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (mut i, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += x as usize;
        nb += y as usize;
        i += (x && y) as usize;
    }
    Ok((i, na, nb))
}

/// Dice of two equally shaped boolean arrays of any dimension.
pub fn dice_arrays<D: Dimension>(a: ArrayView<bool, D>, b: ArrayView<bool, D>) -> Result<f64> {
    let (i, na, nb) = overlap_counts(a, b)?;
    Ok(dice_from_counts(i, na, nb))
}

pub fn iou_arrays<D: Dimension>(a: ArrayView<bool, D>, b: ArrayView<bool, D>) -> Result<f64> {
    let (i, na, nb) = overlap_counts(a, b)?;
    Ok(iou_from_counts(i, na, nb))
}

pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    a.check_same_geometry(b, "dice operands")?;
    dice_arrays(a.data().view(), b.data().view())
}

pub fn iou(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    a.check_same_geometry(b, "iou operands")?;
    iou_arrays(a.data().view(), b.data().view())
}

/// Axis-aligned box in half-open pixel coordinates `[row_min, row_max) x [col_min, col_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BoundingBox {
    pub fn new(row_min: usize, col_min: usize, row_max: usize, col_max: usize) -> Result<Self> {
        if row_min >= row_max || col_min >= col_max {
            return Err(Error::Geometry(format!(
                "invalid box [{row_min}, {col_min}, {row_max}, {col_max}]"
            )));
        }
        Ok(Self {
            row_min,
            col_min,
            row_max,
            col_max,
        })
    }

    /// Tight box around a non-empty pixel list.
    pub fn enclosing(pixels: &[(usize, usize)]) -> Option<Self> {
        let first = pixels.first()?;
        let mut b = Self {
            row_min: first.0,
            col_min: first.1,
            row_max: first.0 + 1,
            col_max: first.1 + 1,
        };
        for &(r, c) in pixels {
            b.row_min = b.row_min.min(r);
            b.col_min = b.col_min.min(c);
            b.row_max = b.row_max.max(r + 1);
            b.col_max = b.col_max.max(c + 1);
        }
        Some(b)
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..self.row_max).contains(&r) && (self.col_min..self.col_max).contains(&c)
    }

    pub fn intersection_area(&self, other: &Self) -> usize {
        let h = self.row_max.min(other.row_max).saturating_sub(self.row_min.max(other.row_min));
        let w = self.col_max.min(other.col_max).saturating_sub(self.col_min.max(other.col_min));
        h * w
    }

    pub fn iou(&self, other: &Self) -> f64 {
        iou_from_counts(self.intersection_area(other), self.area(), other.area())
    }

    /// Box scaled by an integer factor (e.g. native to upsampled coordinates).
    pub fn scaled(&self, factor: usize) -> Self {
        Self {
            row_min: self.row_min * factor,
            col_min: self.col_min * factor,
            row_max: self.row_max * factor,
            col_max: self.col_max * factor,
        }
    }
}

/// Object size classes by pixel area: small < 32², medium in [32², 96²], large > 96².
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
    All,
}

impl SizeClass {
    pub const ALL: [SizeClass; 4] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large, SizeClass::All];

    /// The exclusive class of an object with the given area.
    pub fn of_area(area: f64) -> SizeClass {
        if area < 32.0 * 32.0 {
            SizeClass::Small
        } else if area <= 96.0 * 96.0 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    pub fn contains(self, area: f64) -> bool {
        self == SizeClass::All || SizeClass::of_area(area) == self
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
            SizeClass::All => "all",
        }
    }
}

/// One evaluation image reduced to what matching needs: detection scores, truth areas and the
/// detection-by-truth IoU matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchInstance {
    pub scores: Vec<f64>,
    pub truth_areas: Vec<f64>,
    /// `iou[d][t]`
    pub iou: Vec<Vec<f64>>,
}

impl MatchInstance {
    pub fn from_boxes(detections: &[(f64, BoundingBox)], truths: &[BoundingBox]) -> Self {
        Self {
            scores: detections.iter().map(|d| d.0).collect(),
            truth_areas: truths.iter().map(|t| t.area() as f64).collect(),
            iou: detections
                .iter()
                .map(|(_, d)| truths.iter().map(|t| d.iou(t)).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_sweep() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Greedy score-descending matching within one image. Each detection takes the
/// highest-IoU unmatched truth at or above the threshold, preferring truths of the class;
/// a detection whose only match is out-of-class is ignored.
fn match_image(inst: &MatchInstance, threshold: f64, class: SizeClass, max_dets: usize) -> Vec<(f64, Outcome)> {
    let mut order: Vec<usize> = (0..inst.scores.len()).collect();
    order.sort_by(|&a, &b| inst.scores[b].total_cmp(&inst.scores[a]));
    order.truncate(max_dets);
    let mut taken = vec![false; inst.truth_areas.len()];
    let mut out = Vec::with_capacity(order.len());
    for d in order {
        let mut best: Option<(bool, f64, usize)> = None;
        for (t, &iou) in inst.iou[d].iter().enumerate() {
            if taken[t] || iou < threshold {
                continue;
            }
            let in_class = class.contains(inst.truth_areas[t]);
            let better = match best {
                None => true,
                Some((bc, bi, _)) => (in_class && !bc) || (in_class == bc && iou > bi),
            };
            if better {
                best = Some((in_class, iou, t));
            }
        }
        let outcome = match best {
            Some((in_class, _, t)) => {
                taken[t] = true;
                if in_class {
                    Outcome::TruePositive
                } else {
                    Outcome::Ignored
                }
            }
            None => Outcome::FalsePositive,
        };
        out.push((inst.scores[d], outcome));
    }
    out
}

fn class_truths(images: &[MatchInstance], class: SizeClass) -> usize {
    images
        .iter()
        .flat_map(|i| &i.truth_areas)
        .filter(|&&a| class.contains(a))
        .count()
}

/// All-point interpolated average precision pooled over images. `None` when the class has no
/// truths.
pub fn average_precision(images: &[MatchInstance], iou_threshold: f64, class: SizeClass) -> Option<f64> {
    let n_truth = class_truths(images, class);
    if n_truth == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, bool)> = images
        .iter()
        .flat_map(|i| match_image(i, iou_threshold, class, usize::MAX))
        .filter(|(_, o)| *o != Outcome::Ignored)
        .map(|(s, o)| (s, o == Outcome::TruePositive))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(pooled.len());
    let mut recall = Vec::with_capacity(pooled.len());
    let mut tp = 0usize;
    for (k, &(_, hit)) in pooled.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_truth as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// AP averaged over the 0.50:0.05:0.95 IoU sweep.
pub fn average_precision_sweep(images: &[MatchInstance], class: SizeClass) -> Option<f64> {
    let t = iou_sweep();
    let vals: Option<Vec<f64>> = t.iter().map(|&th| average_precision(images, th, class)).collect();
    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Recall of the top `max_dets` detections per image, averaged over `iou_thresholds`.
pub fn average_recall(
    images: &[MatchInstance],
    iou_thresholds: &[f64],
    class: SizeClass,
    max_dets: usize,
) -> Option<f64> {
    let n_truth = class_truths(images, class);
    if n_truth == 0 || iou_thresholds.is_empty() {
        return None;
    }
    let total: f64 = iou_thresholds
        .iter()
        .map(|&th| {
            let tp = images
                .iter()
                .flat_map(|i| match_image(i, th, class, max_dets))
                .filter(|(_, o)| *o == Outcome::TruePositive)
                .count();
            tp as f64 / n_truth as f64
        })
        .sum();
    Some(total / iou_thresholds.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl LesionCounts {
    pub fn sensitivity(&self) -> Option<f64> {
        let n = self.tp + self.fn_;
        (n > 0).then(|| self.tp as f64 / n as f64)
    }
}

impl std::ops::Add for LesionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

/// 26-connected lesion matching: a truth lesion is found if any predicted voxel touches it,
/// a predicted lesion touching no truth is a false positive.
pub fn lesionwise_counts(pred: &Mask3D, truth: &Mask3D) -> Result<LesionCounts> {
    pred.check_same_geometry(truth, "lesion-wise operands")?;
    let (p, t) = (pred.data(), truth.data());
    let truth_labels = label_3d(t.view(), Connectivity3::TwentySix);
    let pred_labels = label_3d(p.view(), Connectivity3::TwentySix);
    let tp = truth_labels
        .components
        .iter()
        .filter(|c| c.iter().any(|&(x, y, z)| p[[x, y, z]]))
        .count();
    let fp = pred_labels
        .components
        .iter()
        .filter(|c| !c.iter().any(|&(x, y, z)| t[[x, y, z]]))
        .count();
    Ok(LesionCounts {
        tp,
        fp,
        fn_: truth_labels.count() - tp,
    })
}

/// Per-slice 2D instances of a prediction/truth pair, for AP/AR on volumes. Objects are
/// 8-connected in-plane components; predicted components get score 1; areas are reported in
/// `upsample_factor`-scaled pixels.
pub fn slice_instances(pred: &Mask3D, truth: &Mask3D, upsample_factor: usize) -> Result<Vec<MatchInstance>> {
    pred.check_same_geometry(truth, "instance operands")?;
    let scale = (upsample_factor * upsample_factor) as f64;
    let mut out = Vec::new();
    for (pp, tp) in pred.data().axis_iter(Axis(2)).zip(truth.data().axis_iter(Axis(2))) {
        let pl = label_2d(pp, Connectivity2::Eight);
        let tl = label_2d(tp, Connectivity2::Eight);
        if pl.components.is_empty() && tl.components.is_empty() {
            continue;
        }
        let iou = pl
            .components
            .iter()
            .map(|pc| {
                tl.components
                    .iter()
                    .enumerate()
                    .map(|(ti, tc)| {
                        let inter = pc.iter().filter(|&&(r, c)| tl.labels[[r, c]] == ti as u32 + 1).count();
                        iou_from_counts(inter, pc.len(), tc.len())
                    })
                    .collect()
            })
            .collect();
        out.push(MatchInstance {
            scores: vec![1.0; pl.components.len()],
            truth_areas: tl.components.iter().map(|c| c.len() as f64 * scale).collect(),
            iou,
        });
    }
    Ok(out)
}

/// Per-case breakdown in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub iou: f64,
    /// Both prediction and truth were empty, so Dice/IoU are 1 by convention.
    pub empty_pair: bool,
    pub lesionwise: LesionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over cases.
    pub dice: f64,
    pub iou: f64,
    /// AP at IoU 0.5 by size class; `null` when the class has no truths.
    pub ap50_by_size: BTreeMap<SizeClass, Option<f64>>,
    /// AP averaged over IoU 0.50:0.05:0.95.
    pub ap_by_size: BTreeMap<SizeClass, Option<f64>>,
    pub ar_by_size: BTreeMap<SizeClass, Option<f64>>,
    pub lesionwise: LesionCounts,
    pub per_case: Vec<CaseMetrics>,
}

/// Evaluates `(case_id, prediction, truth)` triples; cases are reported sorted by id.
pub fn evaluate(cases: &[(String, Mask3D, Mask3D)], upsample_factor: usize) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Empty("no cases to evaluate".into()));
    }
    let mut sorted: Vec<&(String, Mask3D, Mask3D)> = cases.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut per_case = Vec::with_capacity(sorted.len());
    let mut images = Vec::new();
    let mut total = LesionCounts::default();
    for (id, pred, truth) in sorted {
        let lw = lesionwise_counts(pred, truth)?;
        total = total + lw;
        per_case.push(CaseMetrics {
            case_id: id.clone(),
            dice: dice(pred, truth)?,
            iou: iou(pred, truth)?,
            empty_pair: !pred.any() && !truth.any(),
            lesionwise: lw,
        });
        images.extend(slice_instances(pred, truth, upsample_factor)?);
    }
    let n = per_case.len() as f64;
    let sweep = iou_sweep();
    let by = |f: &dyn Fn(SizeClass) -> Option<f64>| SizeClass::ALL.iter().map(|&c| (c, f(c))).collect();
    Ok(MetricsReport {
        dice: per_case.iter().map(|c| c.dice).sum::<f64>() / n,
        iou: per_case.iter().map(|c| c.iou).sum::<f64>() / n,
        ap50_by_size: by(&|c| average_precision(&images, 0.5, c)),
        ap_by_size: by(&|c| average_precision_sweep(&images, c)),
        ar_by_size: by(&|c| average_recall(&images, &sweep, c, 100)),
        lesionwise: total,
        per_case,
    })
}

impl MetricsReport {
    /// Flat `case_id,metric,value` rows; aggregate rows use the id `ALL`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,metric,value\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        for c in &self.per_case {
            for (k, v) in [
                ("dice", c.dice.to_string()),
                ("iou", c.iou.to_string()),
                ("empty_pair", c.empty_pair.to_string()),
                ("tp", c.lesionwise.tp.to_string()),
                ("fp", c.lesionwise.fp.to_string()),
                ("fn", c.lesionwise.fn_.to_string()),
            ] {
                s.push_str(&format!("{},{k},{v}\n", c.case_id));
            }
        }
        s.push_str(&format!("ALL,dice,{}\nALL,iou,{}\n", self.dice, self.iou));
        for (name, map) in [("ap50", &self.ap50_by_size), ("ap", &self.ap_by_size), ("ar", &self.ar_by_size)] {
            for (class, v) in map {
                s.push_str(&format!("ALL,{name}_{},{}\n", class.name(), fmt(*v)));
            }
        }
        s.push_str(&format!(
            "ALL,tp,{}\nALL,fp,{}\nALL,fn,{}\n",
            self.lesionwise.tp, self.lesionwise.fp, self.lesionwise.fn_
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask(shape: [usize; 3], on: &[(usize, usize, usize)]) -> Mask3D {
        Mask3D::from_shape_fn(shape, [1.0; 3], |p| on.contains(&p)).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask([4, 4, 1], &[(0, 0, 0), (0, 1, 0), (1, 0, 0), (1, 1, 0)]);
        let b = mask([4, 4, 1], &[(0, 0, 0), (0, 1, 0), (2, 0, 0), (2, 1, 0)]);
        let c = mask([4, 4, 1], &[(3, 3, 0)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        let e = mask([4, 4, 1], &[]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn box_iou_examples() {
        let a = BoundingBox::new(0, 0, 2, 2).unwrap();
        let b = BoundingBox::new(1, 1, 3, 3).unwrap();
        let c = BoundingBox::new(5, 5, 6, 6).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(a.iou(&c), 0.0);
        assert!(BoundingBox::new(2, 0, 2, 1).is_err());
    }

    #[test]
    fn ap_ar_trivial_cases() {
        let t = BoundingBox::new(0, 0, 4, 4).unwrap();
        let perfect = [MatchInstance::from_boxes(&[(0.9, t)], &[t])];
        assert_eq!(average_precision(&perfect, 0.5, SizeClass::All), Some(1.0));
        assert_eq!(average_recall(&perfect, &iou_sweep(), SizeClass::All, 100), Some(1.0));
        let none = [MatchInstance::from_boxes(&[], &[t])];
        assert_eq!(average_precision(&none, 0.5, SizeClass::All), Some(0.0));
        assert_eq!(average_recall(&none, &iou_sweep(), SizeClass::All, 100), Some(0.0));
        assert_eq!(average_precision(&perfect, 0.5, SizeClass::Large), None);
    }

    #[test]
    fn out_of_class_matches_are_ignored() {
        let small = BoundingBox::new(0, 0, 4, 4).unwrap();
        let medium = BoundingBox::new(100, 100, 140, 140).unwrap();
        let img = [MatchInstance::from_boxes(&[(0.9, small), (0.8, medium), (0.7, BoundingBox::new(200, 0, 201, 1).unwrap())], &[small, medium])];
        // medium: the small-box detection is ignored, the stray one is a false positive
        assert_eq!(average_precision(&img, 0.5, SizeClass::Medium), Some(1.0));
        assert_eq!(average_precision(&img, 0.5, SizeClass::Small), Some(1.0));
        let ap_all = average_precision(&img, 0.5, SizeClass::All).unwrap();
        assert!((ap_all - 1.0).abs() < 1e-12);
    }

    #[test]
    fn size_classes_partition() {
        assert_eq!(SizeClass::of_area(1023.0), SizeClass::Small);
        assert_eq!(SizeClass::of_area(1024.0), SizeClass::Medium);
        assert_eq!(SizeClass::of_area(9216.0), SizeClass::Medium);
        assert_eq!(SizeClass::of_area(9217.0), SizeClass::Large);
    }

    #[test]
    fn lesionwise_examples() {
        let t = mask([8, 3, 3], &[(0, 0, 0), (4, 0, 0), (7, 2, 2)]);
        assert_eq!(lesionwise_counts(&t, &t).unwrap(), LesionCounts { tp: 3, fp: 0, fn_: 0 });
        let e = mask([8, 3, 3], &[]);
        assert_eq!(lesionwise_counts(&e, &t).unwrap(), LesionCounts { tp: 0, fp: 0, fn_: 3 });
        let two = mask([5, 1, 1], &[(0, 0, 0), (2, 0, 0)]);
        let bridge = Mask3D::new(Array3::from_elem((5, 1, 1), true), [1.0; 3]).unwrap();
        assert_eq!(lesionwise_counts(&bridge, &two).unwrap(), LesionCounts { tp: 2, fp: 0, fn_: 0 });
    }

    #[test]
    fn evaluate_identical_is_perfect() {
        let t = mask([8, 8, 2], &[(1, 1, 0), (1, 2, 0), (6, 6, 1)]);
        let r = evaluate(&[("a".into(), t.clone(), t.clone())], 4).unwrap();
        assert_eq!(r.dice, 1.0);
        assert_eq!(r.ap50_by_size[&SizeClass::All], Some(1.0));
        assert_eq!(r.ar_by_size[&SizeClass::Small], Some(1.0));
        assert_eq!(r.ap_by_size[&SizeClass::Large], None);
        assert!(r.to_csv().contains("a,dice,1\n"));
    }
}
