//! Deterministic 2D patch gridding, extraction, nearest-neighbour resampling and
//! overlap-aware reconstruction of axial planes.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::SliceStack;

/// Square patches laid over a plane, origins in row-major order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub plane_shape: (usize, usize),
    pub origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + patch <= dim)
        .collect();
    let last = dim - patch;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Origins advance by `round(patch_size * (1 - overlap))`; the final origin on each axis is
/// clamped to `dim - patch_size` so every pixel is covered without padding.
pub fn compute_grid(
    plane_shape: (usize, usize),
    patch_size: usize,
    overlap_fraction: f64,
) -> Result<PatchGrid> {
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::Config(format!(
            "overlap fraction must lie in [0, 1), got {overlap_fraction}"
        )));
    }
    if patch_size == 0 || patch_size > plane_shape.0 || patch_size > plane_shape.1 {
        return Err(Error::Geometry(format!(
            "patch size {patch_size} does not fit plane {plane_shape:?}"
        )));
    }
    let stride = ((patch_size as f64 * (1.0 - overlap_fraction)).round() as usize).max(1);
    let rows = axis_origins(plane_shape.0, patch_size, stride);
    let cols = axis_origins(plane_shape.1, patch_size, stride);
    let origins = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(PatchGrid {
        patch_size,
        stride,
        plane_shape,
        origins,
    })
}

/// A square multi-channel crop of one axial plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch2D<T> {
    /// Top-left corner in the source plane (native resolution).
    pub origin: (usize, usize),
    pub size: usize,
    pub slice_index: usize,
    pub channels: Vec<Array2<T>>,
}

impl<T: Clone> Patch2D<T> {
    pub fn new(
        origin: (usize, usize),
        slice_index: usize,
        channels: Vec<Array2<T>>,
    ) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Empty("patch without channels".into()))?;
        let (h, w) = first.dim();
        if h != w || channels.iter().any(|c| c.dim() != (h, w)) {
            return Err(Error::Geometry(format!(
                "patch channels must be equal squares, got {:?}",
                channels.iter().map(|c| c.dim()).collect::<Vec<_>>()
            )));
        }
        Ok(Self {
            origin,
            size: h,
            slice_index,
            channels,
        })
    }

    /// Horizontal (left-right in-plane) flip of every channel.
    pub fn flipped(&self) -> Self {
        Self {
            origin: self.origin,
            size: self.size,
            slice_index: self.slice_index,
            channels: self.channels.iter().map(flip_cols).collect(),
        }
    }
}

pub fn flip_cols<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.slice(s![.., ..;-1]).as_standard_layout().into_owned()
}

fn crop<T: Clone>(plane: &Array2<T>, origin: (usize, usize), size: usize) -> Array2<T> {
    plane
        .slice(s![origin.0..origin.0 + size, origin.1..origin.1 + size])
        .to_owned()
}

fn check_grid(plane: (usize, usize), grid: &PatchGrid) -> Result<()> {
    if plane != grid.plane_shape {
        return Err(Error::Geometry(format!(
            "grid built for plane {:?}, got {:?}",
            grid.plane_shape, plane
        )));
    }
    Ok(())
}

/// One three-channel patch per grid origin, copied verbatim.
pub fn extract_patches<T: Clone>(stack: &SliceStack<T>, grid: &PatchGrid) -> Result<Vec<Patch2D<T>>> {
    check_grid(stack.plane_shape(), grid)?;
    grid.origins
        .iter()
        .map(|&o| {
            Patch2D::new(
                o,
                stack.slice_index,
                stack
                    .channels
                    .iter()
                    .map(|c| crop(c, o, grid.patch_size))
                    .collect(),
            )
        })
        .collect()
}

/// Single-channel variant of [`extract_patches`].
pub fn extract_plane_patches<T: Clone>(
    plane: &Array2<T>,
    grid: &PatchGrid,
    slice_index: usize,
) -> Result<Vec<Patch2D<T>>> {
    check_grid(plane.dim(), grid)?;
    grid.origins
        .iter()
        .map(|&o| Patch2D::new(o, slice_index, vec![crop(plane, o, grid.patch_size)]))
        .collect()
}

/// Crop a square patch at an arbitrary origin from a slice stack.
pub fn patch_at<T: Clone>(stack: &SliceStack<T>, origin: (usize, usize), size: usize) -> Result<Patch2D<T>> {
    let (h, w) = stack.plane_shape();
    if origin.0 + size > h || origin.1 + size > w {
        return Err(Error::Geometry(format!(
            "patch at {origin:?} of size {size} exceeds plane {:?}",
            (h, w)
        )));
    }
    Patch2D::new(
        origin,
        stack.slice_index,
        stack.channels.iter().map(|c| crop(c, origin, size)).collect(),
    )
}

/// Nearest-neighbour enlargement: each pixel becomes a `factor x factor` block.
pub fn upsample_plane<T: Clone>(plane: &Array2<T>, factor: usize) -> Array2<T> {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h * factor, w * factor), |(r, c)| {
        plane[[r / factor, c / factor]].clone()
    })
}

/// Nearest-neighbour reduction: output `(i, j)` takes input `(i * factor, j * factor)`.
pub fn downsample_plane<T: Clone>(plane: &Array2<T>, factor: usize) -> Result<Array2<T>> {
    let (h, w) = plane.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Geometry(format!(
            "plane {:?} not divisible by factor {factor}",
            (h, w)
        )));
    }
    Ok(plane.slice(s![..;factor, ..;factor]).to_owned())
}

/// Binarize at 0.5, then reduce by nearest-neighbour sampling.
pub fn downsample_binarized<T: Real>(plane: &Array2<T>, factor: usize) -> Result<Array2<bool>> {
    let half = T::lit(0.5);
    downsample_plane(&plane.mapv(|v| v >= half), factor)
}

pub fn upsample_nn<T: Clone>(p: &Patch2D<T>, factor: usize) -> Result<Patch2D<T>> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be at least 1".into()));
    }
    Patch2D::new(
        p.origin,
        p.slice_index,
        p.channels.iter().map(|c| upsample_plane(c, factor)).collect(),
    )
}

pub fn downsample_nn<T: Clone>(p: &Patch2D<T>, factor: usize) -> Result<Patch2D<T>> {
    let channels = p
        .channels
        .iter()
        .map(|c| downsample_plane(c, factor))
        .collect::<Result<Vec<_>>>()?;
    Patch2D::new(p.origin, p.slice_index, channels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Mean,
    Max,
}

/// Stitch single-channel patches back into a plane, fusing overlaps by `fusion`.
/// Pixels covered by no patch are zero.
pub fn reconstruct<T: Real>(patches: &[Patch2D<T>], grid: &PatchGrid, fusion: Fusion) -> Result<Array2<T>> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Empty("no patches to reconstruct".into()))?;
    let size = first.size;
    let (h, w) = grid.plane_shape;
    let mut acc = Array2::<T>::zeros((h, w));
    let mut count = Array2::<u32>::zeros((h, w));
    for p in patches {
        if p.size != size || p.size != grid.patch_size || p.channels.len() != 1 {
            return Err(Error::Geometry(format!(
                "inconsistent patch: size {} ({} channels), grid patch size {}",
                p.size,
                p.channels.len(),
                grid.patch_size
            )));
        }
        if p.origin.0 + size > h || p.origin.1 + size > w {
            return Err(Error::Geometry(format!(
                "patch origin {:?} outside plane {:?}",
                p.origin,
                (h, w)
            )));
        }
        let mut a = acc.slice_mut(s![p.origin.0..p.origin.0 + size, p.origin.1..p.origin.1 + size]);
        let mut n = count.slice_mut(s![p.origin.0..p.origin.0 + size, p.origin.1..p.origin.1 + size]);
        ndarray::Zip::from(&mut a)
            .and(&mut n)
            .and(&p.channels[0])
            .for_each(|a, n, &v| {
                *n += 1;
                match fusion {
                    // running mean keeps identical contributions exact
                    Fusion::Mean => *a += (v - *a) / T::from_u32(*n).unwrap_or_else(T::one),
                    Fusion::Max => {
                        if *n == 1 || v > *a {
                            *a = v
                        }
                    }
                }
            });
    }
    Ok(acc)
}

/// Logical-OR placement of binary patch masks (native resolution) onto a plane.
pub fn reconstruct_or(
    masks: &[((usize, usize), Array2<bool>)],
    plane_shape: (usize, usize),
) -> Result<Array2<bool>> {
    let mut out = Array2::from_elem(plane_shape, false);
    for (origin, m) in masks {
        let (mh, mw) = m.dim();
        if origin.0 + mh > plane_shape.0 || origin.1 + mw > plane_shape.1 {
            return Err(Error::Geometry(format!(
                "mask at {origin:?} of size {:?} outside plane {plane_shape:?}",
                (mh, mw)
            )));
        }
        out.slice_mut(s![origin.0..origin.0 + mh, origin.1..origin.1 + mw])
            .zip_mut_with(m, |o, &v| *o |= v);
    }
    Ok(out)
}
