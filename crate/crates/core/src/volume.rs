//! Multi-modal MR volumes, label masks and per-patient intensity normalization.
//!
//! Volumes are indexed `(x, y, z)` with `z` the axial slicing axis. A 2D axial plane
//! is therefore indexed `(x, y)`, which the patch code calls `(row, col)`.

use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative tolerance used when cross-checking voxel spacings read from file headers.
pub const SPACING_TOLERANCE: f64 = 1e-4;

/// Voxel-to-world transform: three rows of a 4x4 affine, the last row being `0 0 0 1`.
pub type Affine = [[f64; 4]; 3];

pub fn diagonal_affine(spacing: [f64; 3]) -> Affine {
    [
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
    ]
}

/// A 3D grid of voxels with physical spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D<T> {
    data: Array3<T>,
    spacing: [f64; 3],
    affine: Affine,
}

/// Binary label volume.
pub type Mask3D = Volume3D<bool>;

impl<T> Volume3D<T> {
    pub fn new(data: Array3<T>, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Geometry(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if data.shape().contains(&0) {
            return Err(Error::Geometry(format!(
                "volume shape must be at least 1 per axis, got {:?}",
                data.shape()
            )));
        }
        Ok(Self {
            data,
            spacing,
            affine: diagonal_affine(spacing),
        })
    }

    pub fn with_affine(mut self, affine: Affine) -> Self {
        self.affine = affine;
        self
    }

    pub fn from_shape_fn<F>(shape: [usize; 3], spacing: [f64; 3], f: F) -> Result<Self>
    where
        F: FnMut((usize, usize, usize)) -> T,
    {
        Self::new(Array3::from_shape_fn((shape[0], shape[1], shape[2]), f), spacing)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same shape, spacing and affine, new voxel data.
    pub fn map<U, F>(&self, f: F) -> Volume3D<U>
    where
        F: FnMut(&T) -> U,
    {
        Volume3D {
            data: self.data.map(f),
            spacing: self.spacing,
            affine: self.affine,
        }
    }

    /// Replace the voxel data, keeping the geometry. The new array must have the same shape.
    pub fn with_data<U>(&self, data: Array3<U>) -> Result<Volume3D<U>> {
        if data.shape() != self.data.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                data.shape(),
                self.data.shape()
            )));
        }
        Ok(Volume3D {
            data,
            spacing: self.spacing,
            affine: self.affine,
        })
    }

    /// Fails unless both volumes share shape and spacing.
    pub fn check_same_geometry<U>(&self, other: &Volume3D<U>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let close = self
            .spacing
            .iter()
            .zip(other.spacing.iter())
            .all(|(a, b)| (a - b).abs() <= SPACING_TOLERANCE * a.abs().max(b.abs()));
        if !close {
            return Err(Error::SpacingMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }
}

impl<T: Clone> Volume3D<T> {
    pub fn plane(&self, z: usize) -> Array2<T> {
        self.data.index_axis(Axis(2), z).to_owned()
    }

    /// Left-right mirror along `axis`.
    pub fn mirrored(&self, axis: usize) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(axis));
        Self {
            data: data.as_standard_layout().into_owned(),
            spacing: self.spacing,
            affine: self.affine,
        }
    }
}

impl<T: Real> Volume3D<T> {
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn zeros(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(Array3::zeros((shape[0], shape[1], shape[2])), spacing)
    }

    /// Strict conversion to a mask; every voxel must be exactly 0 or 1.
    pub fn to_mask(&self, what: &str) -> Result<Mask3D> {
        let mut bad = None;
        let data = self.data.map(|&v| {
            if v == T::one() {
                true
            } else {
                if v != T::zero() && bad.is_none() {
                    bad = Some(v);
                }
                false
            }
        });
        if let Some(v) = bad {
            return Err(Error::NonBinary(format!("{what} contains value {v}")));
        }
        self.with_data(data)
    }
}

impl Mask3D {
    pub fn empty(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::new(Array3::from_elem((shape[0], shape[1], shape[2]), false), spacing)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn to_real<T: Real>(&self) -> Volume3D<T> {
        self.map(|&b| if b { T::one() } else { T::zero() })
    }

    /// True when every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask3D) -> bool {
        self.data
            .iter()
            .zip(other.data.iter())
            .all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &Mask3D) -> Result<Mask3D> {
        self.check_same_geometry(other, "mask union")?;
        let mut out = self.clone();
        Zip::from(&mut out.data).and(&other.data).for_each(|a, &b| *a |= b);
        Ok(out)
    }

    pub fn intersection(&self, other: &Mask3D) -> Result<Mask3D> {
        self.check_same_geometry(other, "mask intersection")?;
        let mut out = self.clone();
        Zip::from(&mut out.data).and(&other.data).for_each(|a, &b| *a &= b);
        Ok(out)
    }
}

/// How two observers' annotations are combined into one truth mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverFusion {
    Union,
    Intersection,
}

pub fn fuse_observers(a: &Mask3D, b: &Mask3D, fusion: ObserverFusion) -> Result<Mask3D> {
    match fusion {
        ObserverFusion::Union => a.union(b),
        ObserverFusion::Intersection => a.intersection(b),
    }
}

/// Co-registered T1/T2/FLAIR volumes of one subject.
#[derive(Clone, Debug)]
pub struct MultiModalCase<T> {
    pub case_id: String,
    pub t1: Volume3D<T>,
    pub t2: Volume3D<T>,
    pub flair: Volume3D<T>,
    pub truth: Option<Mask3D>,
}

impl<T: Real> MultiModalCase<T> {
    pub fn new(
        case_id: impl Into<String>,
        t1: Volume3D<T>,
        t2: Volume3D<T>,
        flair: Volume3D<T>,
        truth: Option<Mask3D>,
    ) -> Result<Self> {
        t1.check_same_geometry(&t2, "T1 vs T2")?;
        t1.check_same_geometry(&flair, "T1 vs FLAIR")?;
        if let Some(truth) = &truth {
            t1.check_same_geometry(truth, "T1 vs truth")?;
        }
        t1.check_finite("T1")?;
        t2.check_finite("T2")?;
        flair.check_finite("FLAIR")?;
        Ok(Self {
            case_id: case_id.into(),
            t1,
            t2,
            flair,
            truth,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.t1.shape()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.t1.spacing()
    }

    /// Modalities in channel order (T1, T2, FLAIR).
    pub fn modalities(&self) -> [&Volume3D<T>; 3] {
        [&self.t1, &self.t2, &self.flair]
    }

    /// Per-modality z-score normalization; truth is carried over untouched.
    pub fn normalized(&self, options: NormalizeOptions) -> Result<Self> {
        Ok(Self {
            case_id: self.case_id.clone(),
            t1: zscore_normalize_with(&self.t1, options)?,
            t2: zscore_normalize_with(&self.t2, options)?,
            flair: zscore_normalize_with(&self.flair, options)?,
            truth: self.truth.clone(),
        })
    }
}

/// The three co-indexed axial planes of a case at one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack<T> {
    pub slice_index: usize,
    /// Ordered (T1, T2, FLAIR).
    pub channels: [Array2<T>; 3],
}

impl<T> SliceStack<T> {
    pub fn plane_shape(&self) -> (usize, usize) {
        self.channels[0].dim()
    }
}

pub fn slice_stack<T: Real>(case: &MultiModalCase<T>, z: usize) -> Result<SliceStack<T>> {
    let depth = case.shape()[2];
    if z >= depth {
        return Err(Error::OutOfRange(format!(
            "slice {z} outside 0..{depth}"
        )));
    }
    Ok(SliceStack {
        slice_index: z,
        channels: [case.t1.plane(z), case.t2.plane(z), case.flair.plane(z)],
    })
}

/// Stack one channel of consecutive slice stacks back into a volume array.
pub fn assemble_channel<T: Clone + Default>(stacks: &[SliceStack<T>], channel: usize) -> Result<Array3<T>> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::Empty("no slices to assemble".into()))?;
    let (nx, ny) = first.plane_shape();
    let mut out = Array3::from_elem((nx, ny, stacks.len()), T::default());
    for (z, stack) in stacks.iter().enumerate() {
        if stack.plane_shape() != (nx, ny) {
            return Err(Error::ShapeMismatch(format!(
                "slice {} has plane {:?}, expected {:?}",
                stack.slice_index,
                stack.plane_shape(),
                (nx, ny)
            )));
        }
        out.index_axis_mut(Axis(2), z)
            .assign(&stack.channels[channel]);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeOptions {
    /// Restrict mean/std estimation to nonzero voxels (skull-stripped data).
    pub foreground_only: bool,
}

/// Zero-mean unit-variance scaling over all voxels, population standard deviation.
pub fn zscore_normalize<T: Real>(v: &Volume3D<T>) -> Result<Volume3D<T>> {
    zscore_normalize_with(v, NormalizeOptions::default())
}

pub fn zscore_normalize_with<T: Real>(
    v: &Volume3D<T>,
    options: NormalizeOptions,
) -> Result<Volume3D<T>> {
    let include = |x: &T| !options.foreground_only || *x != T::zero();
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for x in v.data.iter().filter(|x| include(x)) {
        n += 1;
        sum += x.as_f64();
    }
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "normalization needs at least 2 voxels, got {n}"
        )));
    }
    let mean = sum / n as f64;
    // Two-pass variance with the compensation term of the corrected algorithm.
    let (mut sq, mut comp) = (0.0f64, 0.0f64);
    for x in v.data.iter().filter(|x| include(x)) {
        let d = x.as_f64() - mean;
        sq += d * d;
        comp += d;
    }
    let var = (sq - comp * comp / n as f64) / n as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Degenerate("constant volume has zero variance".into()));
    }
    let std = var.sqrt();
    Ok(v.map(|&x| T::lit((x.as_f64() - mean) / std)))
}

/// Mean and population standard deviation, both in f64.
pub fn mean_std<T: Real>(values: impl IntoIterator<Item = T>) -> (f64, f64) {
    let vals: Vec<f64> = values.into_iter().map(Real::as_f64).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn vol(data: Array3<f64>) -> Volume3D<f64> {
        Volume3D::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    fn case(shape: [usize; 3]) -> MultiModalCase<f64> {
        let v = Volume3D::from_shape_fn(shape, [1.0; 3], |(x, y, z)| (x + 2 * y + 3 * z) as f64)
            .unwrap();
        MultiModalCase::new("c", v.clone(), v.map(|x| x * 2.0), v.map(|x| -x), None).unwrap()
    }

    #[test]
    fn two_point_volume_maps_to_plus_minus_one() {
        let v = vol(Array3::from_shape_fn((2, 2, 2), |(x, _, _)| 2.0 * x as f64));
        let out = zscore_normalize(&v).unwrap();
        for (&a, &b) in v.data().iter().zip(out.data().iter()) {
            assert_eq!(b, if a == 0.0 { -1.0 } else { 1.0 });
        }
    }

    #[test]
    fn all_zero_volume_is_degenerate() {
        let v = vol(Array3::zeros((4, 4, 4)));
        assert!(matches!(zscore_normalize(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn single_voxel_is_degenerate() {
        let v = vol(Array3::from_elem((1, 1, 1), 3.0));
        assert!(matches!(zscore_normalize(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalization_is_idempotent() {
        let v = vol(Array3::from_shape_fn((5, 4, 3), |(x, y, z)| {
            ((x * 7 + y * 3 + z) % 11) as f64
        }));
        let once = zscore_normalize(&v).unwrap();
        let twice = zscore_normalize(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn foreground_statistics_ignore_zeros() {
        let v = vol(Array3::from_shape_fn((4, 1, 1), |(x, _, _)| [0.0, 1.0, 3.0, 0.0][x]));
        let out = zscore_normalize_with(&v, NormalizeOptions { foreground_only: true }).unwrap();
        assert_eq!(out.data()[[1, 0, 0]], -1.0);
        assert_eq!(out.data()[[2, 0, 0]], 1.0);
    }

    #[test]
    fn case_rejects_shape_mismatch() {
        let a = Volume3D::<f64>::zeros([8, 8, 8], [1.0; 3]).unwrap();
        let b = Volume3D::<f64>::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let err = MultiModalCase::new("c", a.clone(), a, b, None).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn case_rejects_spacing_mismatch() {
        let a = Volume3D::<f64>::zeros([4, 4, 4], [1.0; 3]).unwrap();
        let b = Volume3D::<f64>::zeros([4, 4, 4], [1.0, 1.0, 2.0]).unwrap();
        let err = MultiModalCase::new("c", a.clone(), a, b, None).unwrap_err();
        assert!(matches!(err, Error::SpacingMismatch(_)));
    }

    #[test]
    fn case_rejects_nan() {
        let a = Volume3D::<f64>::zeros([2, 2, 2], [1.0; 3]).unwrap();
        let mut b = a.clone();
        b.data_mut()[[0, 0, 0]] = f64::NAN;
        let err = MultiModalCase::new("c", a.clone(), a, b, None).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn non_binary_truth_rejected() {
        let v = vol(Array3::from_shape_fn((2, 2, 2), |(x, _, _)| 2.0 * x as f64));
        assert!(matches!(v.to_mask("truth"), Err(Error::NonBinary(_))));
    }

    #[test]
    fn invalid_spacing_rejected() {
        assert!(Volume3D::new(Array3::<f32>::zeros((2, 2, 2)), [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn slice_stack_bounds() {
        let c = case([4, 5, 6]);
        let s = slice_stack(&c, 0).unwrap();
        assert_eq!(s.slice_index, 0);
        assert_eq!(s.plane_shape(), (4, 5));
        assert!(matches!(slice_stack(&c, 6), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn slices_reassemble_exactly() {
        let c = case([4, 5, 6]);
        let stacks: Vec<_> = (0..6).map(|z| slice_stack(&c, z).unwrap()).collect();
        assert_eq!(&assemble_channel(&stacks, 0).unwrap(), c.t1.data());
        assert_eq!(&assemble_channel(&stacks, 1).unwrap(), c.t2.data());
        assert_eq!(&assemble_channel(&stacks, 2).unwrap(), c.flair.data());
    }

    #[test]
    fn constant_plane_passes_through() {
        let v = Volume3D::<f64>::from_shape_fn([3, 3, 2], [1.0; 3], |_| 4.0).unwrap();
        let c = MultiModalCase::new("c", v.clone(), v.clone(), v, None).unwrap();
        let s = slice_stack(&c, 1).unwrap();
        assert!(s.channels.iter().all(|p| p.iter().all(|&x| x == 4.0)));
    }

    #[test]
    fn observer_fusion() {
        let a = Mask3D::from_shape_fn([2, 1, 1], [1.0; 3], |(x, _, _)| x == 0).unwrap();
        let b = Mask3D::from_shape_fn([2, 1, 1], [1.0; 3], |_| true).unwrap();
        assert_eq!(fuse_observers(&a, &b, ObserverFusion::Union).unwrap().count(), 2);
        assert_eq!(
            fuse_observers(&a, &b, ObserverFusion::Intersection).unwrap().count(),
            1
        );
    }
}
