//! Binary morphology and connected-component labeling on planes and volumes.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::volume::Mask3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity2 {
    Four,
    Eight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity3 {
    Six,
    TwentySix,
}

fn offsets2(conn: Connectivity2) -> Vec<(isize, isize)> {
    let mut v = Vec::new();
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            let n = dr.abs() + dc.abs();
            if n == 0 || (conn == Connectivity2::Four && n > 1) {
                continue;
            }
            v.push((dr, dc));
        }
    }
    v
}

fn offsets3(conn: Connectivity3) -> Vec<(isize, isize, isize)> {
    let mut v = Vec::new();
    for dx in -1isize..=1 {
        for dy in -1isize..=1 {
            for dz in -1isize..=1 {
                let n = dx.abs() + dy.abs() + dz.abs();
                if n == 0 || (conn == Connectivity3::Six && n > 1) {
                    continue;
                }
                v.push((dx, dy, dz));
            }
        }
    }
    v
}

/// Component labels (0 = background, 1..=count) and per-component pixel lists.
#[derive(Clone, Debug)]
pub struct Labels2 {
    pub labels: Array2<u32>,
    pub components: Vec<Vec<(usize, usize)>>,
}

#[derive(Clone, Debug)]
pub struct Labels3 {
    pub labels: Array3<u32>,
    pub components: Vec<Vec<(usize, usize, usize)>>,
}

impl Labels3 {
    pub fn count(&self) -> usize {
        self.components.len()
    }
}

/// Flood-fill labeling; components are numbered in row-major order of their first pixel.
pub fn label_2d(mask: ArrayView2<bool>, conn: Connectivity2) -> Labels2 {
    let (h, w) = mask.dim();
    let offs = offsets2(conn);
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || labels[[r, c]] != 0 {
                continue;
            }
            let id = components.len() as u32 + 1;
            let mut pixels = Vec::new();
            labels[[r, c]] = id;
            stack.push((r, c));
            while let Some((pr, pc)) = stack.pop() {
                pixels.push((pr, pc));
                for &(dr, dc) in &offs {
                    let (nr, nc) = (pr as isize + dr, pc as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask[[nr, nc]] && labels[[nr, nc]] == 0 {
                        labels[[nr, nc]] = id;
                        stack.push((nr, nc));
                    }
                }
            }
            pixels.sort_unstable();
            components.push(pixels);
        }
    }
    Labels2 { labels, components }
}

pub fn label_3d(mask: ArrayView3<bool>, conn: Connectivity3) -> Labels3 {
    let (nx, ny, nz) = mask.dim();
    let offs = offsets3(conn);
    let mut labels = Array3::<u32>::zeros((nx, ny, nz));
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for ((x, y, z), &set) in mask.indexed_iter() {
        if !set || labels[[x, y, z]] != 0 {
            continue;
        }
        let id = components.len() as u32 + 1;
        let mut voxels = Vec::new();
        labels[[x, y, z]] = id;
        stack.push((x, y, z));
        while let Some((px, py, pz)) = stack.pop() {
            voxels.push((px, py, pz));
            for &(dx, dy, dz) in &offs {
                let (qx, qy, qz) = (px as isize + dx, py as isize + dy, pz as isize + dz);
                if qx < 0
                    || qy < 0
                    || qz < 0
                    || qx >= nx as isize
                    || qy >= ny as isize
                    || qz >= nz as isize
                {
                    continue;
                }
                let q = (qx as usize, qy as usize, qz as usize);
                if mask[[q.0, q.1, q.2]] && labels[[q.0, q.1, q.2]] == 0 {
                    labels[[q.0, q.1, q.2]] = id;
                    stack.push(q);
                }
            }
        }
        voxels.sort_unstable();
        components.push(voxels);
    }
    Labels3 { labels, components }
}

/// Integer voxel offsets within physical distance `radius_mm` under `spacing`.
pub fn ball_offsets(spacing: [f64; 3], radius_mm: f64) -> Vec<(isize, isize, isize)> {
    let reach = spacing.map(|s| (radius_mm / s).floor() as isize);
    let r2 = radius_mm * radius_mm;
    let mut out = Vec::new();
    for dx in -reach[0]..=reach[0] {
        for dy in -reach[1]..=reach[1] {
            for dz in -reach[2]..=reach[2] {
                let (px, py, pz) = (
                    dx as f64 * spacing[0],
                    dy as f64 * spacing[1],
                    dz as f64 * spacing[2],
                );
                if px * px + py * py + pz * pz <= r2 {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Dilation by the Euclidean ball of physical radius `radius_mm`, honoring anisotropic
/// spacing: a voxel is set iff some input voxel lies within `radius_mm`.
pub fn dilate_mm(mask: &Mask3D, radius_mm: f64) -> Result<Mask3D> {
    if !(radius_mm.is_finite() && radius_mm >= 0.0) {
        return Err(Error::Config(format!("dilation radius must be >= 0, got {radius_mm}")));
    }
    let offsets = ball_offsets(mask.spacing(), radius_mm);
    let src = mask.data();
    let (nx, ny, nz) = src.dim();
    let mut out = src.clone();
    for ((x, y, z), &set) in src.indexed_iter() {
        if !set {
            continue;
        }
        for &(dx, dy, dz) in &offsets {
            let (qx, qy, qz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if qx >= 0
                && qy >= 0
                && qz >= 0
                && (qx as usize) < nx
                && (qy as usize) < ny
                && (qz as usize) < nz
            {
                out[[qx as usize, qy as usize, qz as usize]] = true;
            }
        }
    }
    mask.with_data(out)
}

/// 3x3 square dilation of a plane (pixels outside the plane are ignored).
pub fn dilate_square_2d(mask: ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for ((r, c), &set) in mask.indexed_iter() {
        if !set {
            continue;
        }
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                out[[rr, cc]] = true;
            }
        }
    }
    out
}

/// Fill background regions not 4-connected to the plane border.
pub fn fill_holes_2d(mask: ArrayView2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !mask[[r, c]] {
                outside[[r, c]] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        let nbrs = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in nbrs {
            if nr < h && nc < w && !mask[[nr, nc]] && !outside[[nr, nc]] {
                outside[[nr, nc]] = true;
                stack.push((nr, nc));
            }
        }
    }
    outside.mapv(|o| !o)
}

/// Diameter of the disc with the given area.
pub fn equivalent_diameter_2d(area: f64) -> f64 {
    (4.0 * area / std::f64::consts::PI).sqrt()
}

/// Diameter of the sphere with the given volume.
pub fn equivalent_diameter_3d(volume: f64) -> f64 {
    (6.0 * volume / std::f64::consts::PI).cbrt()
}

/// Per-slice 3x3 in-plane dilation of a volume mask.
pub fn dilate_in_plane(mask: &Mask3D) -> Mask3D {
    let mut out = mask.data().clone();
    for (z, plane) in mask.data().axis_iter(Axis(2)).enumerate() {
        out.index_axis_mut(Axis(2), z).assign(&dilate_square_2d(plane));
    }
    mask.with_data(out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn eight_vs_four_connectivity() {
        let m = arr2(&[[true, false], [false, true]]);
        assert_eq!(label_2d(m.view(), Connectivity2::Eight).components.len(), 1);
        assert_eq!(label_2d(m.view(), Connectivity2::Four).components.len(), 2);
    }

    #[test]
    fn diagonal_voxels_join_under_26() {
        let mut m = Array3::from_elem((3, 3, 3), false);
        m[[0, 0, 0]] = true;
        m[[1, 1, 1]] = true;
        m[[2, 2, 0]] = true;
        assert_eq!(label_3d(m.view(), Connectivity3::TwentySix).count(), 1);
        assert_eq!(label_3d(m.view(), Connectivity3::Six).count(), 3);
    }

    #[test]
    fn ball_of_radius_seven_has_1419_voxels() {
        assert_eq!(ball_offsets([1.0; 3], 7.0).len(), 1419);
    }

    #[test]
    fn radius_below_spacing_is_identity() {
        let m = Mask3D::from_shape_fn([5, 5, 5], [1.0, 1.0, 2.0], |(x, y, z)| (x, y, z) == (2, 2, 2))
            .unwrap();
        assert_eq!(dilate_mm(&m, 0.9).unwrap(), m);
    }

    #[test]
    fn anisotropic_ball_extent() {
        let m = Mask3D::from_shape_fn([7, 7, 7], [1.0, 1.0, 2.0], |(x, y, z)| (x, y, z) == (3, 3, 3))
            .unwrap();
        let d = dilate_mm(&m, 2.0).unwrap();
        let d = d.data();
        assert!(d[[5, 3, 3]] && d[[1, 3, 3]] && d[[3, 5, 3]] && d[[3, 1, 3]]);
        assert!(d[[3, 3, 4]] && d[[3, 3, 2]]);
        assert!(!d[[3, 3, 5]] && !d[[6, 3, 3]]);
    }

    #[test]
    fn square_dilation_at_corner() {
        let mut m = Array2::from_elem((4, 4), false);
        m[[0, 0]] = true;
        let d = dilate_square_2d(m.view());
        assert_eq!(d.iter().filter(|&&b| b).count(), 4);
    }

    #[test]
    fn holes_are_filled() {
        let m = arr2(&[
            [false, false, false, false, false],
            [false, true, true, true, false],
            [false, true, false, true, false],
            [false, true, true, true, false],
            [false, false, false, false, false],
        ]);
        let f = fill_holes_2d(m.view());
        assert!(f[[2, 2]]);
        assert_eq!(f.iter().filter(|&&b| b).count(), 9);
    }
}
