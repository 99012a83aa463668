//! NIfTI-1 reading and writing (`.nii` / `.nii.gz`) on top of the `nifti` crate.
//!
//! Volumes are reoriented on load so that array axes follow the world axes closest to
//! the voxel axes (RAS+), which fixes axis 2 as the axial slicing axis and axis 0 as
//! left-right.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{Affine, Mask3D, MultiModalCase, Volume3D};

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn header_affine(h: &NiftiHeader) -> Affine {
    if h.sform_code > 0 {
        let r = |row: [f32; 4]| row.map(f64::from);
        return [r(h.srow_x), r(h.srow_y), r(h.srow_z)];
    }
    let px = [h.pixdim[1], h.pixdim[2], h.pixdim[3]].map(|p| f64::from(p).abs());
    if h.qform_code > 0 {
        let (b, c, d) = (
            f64::from(h.quatern_b),
            f64::from(h.quatern_c),
            f64::from(h.quatern_d),
        );
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let scale = [px[0], px[1], px[2] * qfac];
        let offset = [h.quatern_x, h.quatern_y, h.quatern_z].map(f64::from);
        let mut out = [[0.0; 4]; 3];
        for r in 0..3 {
            for col in 0..3 {
                out[r][col] = rot[r][col] * scale[col];
            }
            out[r][3] = offset[r];
        }
        return out;
    }
    crate::volume::diagonal_affine(px)
}

/// Axis permutation (voxel axis -> world axis) and flips that bring the data closest to RAS+.
fn canonical_orientation(affine: &Affine) -> ([usize; 3], [bool; 3]) {
    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let norm = |i: usize| {
        (0..3)
            .map(|r| affine[r][i] * affine[r][i])
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE)
    };
    let best = perms
        .iter()
        .max_by(|a, b| {
            let score = |p: &[usize; 3]| (0..3).map(|i| affine[p[i]][i].abs() / norm(i)).sum::<f64>();
            score(a).total_cmp(&score(b))
        })
        .copied()
        .unwrap_or([0, 1, 2]);
    let flips = [0, 1, 2].map(|i| affine[best[i]][i] < 0.0);
    (best, flips)
}

fn reorient(data: Array3<f64>, spacing: [f64; 3], affine: Affine) -> (Array3<f64>, [f64; 3], Affine) {
    let (to_world, flips) = canonical_orientation(&affine);
    let dims = data.shape().to_vec();
    // new axis j takes old axis i where to_world[i] == j
    let mut from = [0usize; 3];
    for (i, &j) in to_world.iter().enumerate() {
        from[j] = i;
    }
    let mut new_affine = [[0.0; 4]; 3];
    for r in 0..3 {
        new_affine[r][3] = affine[r][3];
    }
    for (i, &flip) in flips.iter().enumerate() {
        if flip {
            for r in 0..3 {
                new_affine[r][3] += affine[r][i] * (dims[i] as f64 - 1.0);
            }
        }
    }
    let mut new_spacing = [0.0; 3];
    for j in 0..3 {
        let i = from[j];
        let sign = if flips[i] { -1.0 } else { 1.0 };
        for r in 0..3 {
            new_affine[r][j] = sign * affine[r][i];
        }
        new_spacing[j] = spacing[i];
    }
    let mut data = data;
    for (i, &flip) in flips.iter().enumerate() {
        if flip {
            data.invert_axis(Axis(i));
        }
    }
    let data = data
        .permuted_axes(from)
        .as_standard_layout()
        .into_owned();
    (data, new_spacing, new_affine)
}

fn read_raw(path: &Path) -> Result<(Array3<f64>, [f64; 3], Affine)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let arr = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| nifti_err(path, e))?;
    // Accept trailing singleton dimensions (e.g. 4D with one time point).
    let shape = arr.shape().to_vec();
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(nifti_err(path, format!("expected a 3D volume, got shape {shape:?}")));
    }
    let arr = arr
        .to_shape((shape[0], shape[1], shape[2]))
        .map_err(|e| nifti_err(path, e))?
        .into_owned()
        .into_dimensionality::<Ix3>()
        .map_err(|e| nifti_err(path, e))?;
    let spacing = [header.pixdim[1], header.pixdim[2], header.pixdim[3]]
        .map(|p| f64::from(p).abs());
    let affine = header_affine(&header);
    Ok(reorient(arr, spacing, affine))
}

/// Load a scalar volume, rejecting non-finite voxels.
pub fn read_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume3D<T>> {
    let path = path.as_ref();
    let (data, spacing, affine) = read_raw(path)?;
    let vol = Volume3D::new(data.mapv(T::lit), spacing)?.with_affine(affine);
    vol.check_finite(&path.display().to_string())?;
    Ok(vol)
}

/// Load a label volume; every voxel must be 0 or 1.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    let path = path.as_ref();
    let (data, spacing, affine) = read_raw(path)?;
    let vol = Volume3D::new(data, spacing)?.with_affine(affine);
    vol.check_finite(&path.display().to_string())?;
    vol.to_mask(&path.display().to_string())
}

fn output_header<T>(v: &Volume3D<T>) -> NiftiHeader {
    let s = v.spacing();
    let a = v.affine();
    let to_f32 = |row: [f64; 4]| row.map(|x| x as f32);
    NiftiHeader {
        pixdim: [1.0, s[0] as f32, s[1] as f32, s[2] as f32, 1.0, 1.0, 1.0, 1.0],
        xyzt_units: 2,
        qform_code: 0,
        sform_code: 1,
        srow_x: to_f32(a[0]),
        srow_y: to_f32(a[1]),
        srow_z: to_f32(a[2]),
        ..NiftiHeader::default()
    }
}

fn writer(path: &Path) -> WriterOptions<'_> {
    let gz = path.to_string_lossy().ends_with(".gz");
    WriterOptions::new(path).compress(gz)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Write a scalar volume as float32.
pub fn write_volume<T: Real>(path: impl AsRef<Path>, v: &Volume3D<T>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let header = output_header(v);
    let data = v.data().mapv(|x| x.to_f32().unwrap_or(f32::NAN));
    writer(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| nifti_err(path, e))
}

/// Write a mask as uint8 {0, 1}.
pub fn write_mask(path: impl AsRef<Path>, m: &Mask3D) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let header = output_header(m);
    let data = m.data().mapv(u8::from);
    writer(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| nifti_err(path, e))
}

/// Load and cross-validate the three modalities and the optional truth mask of one subject.
pub fn load_case<T: Real>(
    case_id: impl Into<String>,
    t1_path: &Path,
    t2_path: &Path,
    flair_path: &Path,
    truth_path: Option<&Path>,
) -> Result<MultiModalCase<T>> {
    let t1 = read_volume(t1_path)?;
    let t2 = read_volume(t2_path)?;
    let flair = read_volume(flair_path)?;
    let truth = truth_path.map(read_mask).transpose()?;
    MultiModalCase::new(case_id, t1, t2, flair, truth)
}

/// File layout of a case directory.
pub struct CaseFiles {
    pub case_id: String,
    pub t1: PathBuf,
    pub t2: PathBuf,
    pub flair: PathBuf,
    pub truth: Option<PathBuf>,
}

/// Find `t1`, `t2`, `flair` and optional `truth` volumes (`.nii.gz` or `.nii`) in a directory.
/// The case id is the directory name.
pub fn case_files(dir: &Path) -> Result<CaseFiles> {
    let find = |stem: &str| -> Option<PathBuf> {
        ["nii.gz", "nii"]
            .iter()
            .map(|ext| dir.join(format!("{stem}.{ext}")))
            .find(|p| p.exists())
    };
    let need = |stem: &str| find(stem).ok_or_else(|| Error::MissingFile(dir.join(format!("{stem}.nii.gz"))));
    let case_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    Ok(CaseFiles {
        case_id,
        t1: need("t1")?,
        t2: need("t2")?,
        flair: need("flair")?,
        truth: find("truth"),
    })
}

pub fn load_case_dir<T: Real>(dir: &Path) -> Result<MultiModalCase<T>> {
    let f = case_files(dir)?;
    load_case(f.case_id, &f.t1, &f.t2, &f.flair, f.truth.as_deref())
}

/// Write a case in the directory layout understood by [`load_case_dir`].
pub fn write_case_dir<T: Real>(dir: &Path, case: &MultiModalCase<T>) -> Result<()> {
    write_volume(dir.join("t1.nii.gz"), &case.t1)?;
    write_volume(dir.join("t2.nii.gz"), &case.t2)?;
    write_volume(dir.join("flair.nii.gz"), &case.flair)?;
    if let Some(truth) = &case.truth {
        write_mask(dir.join("truth.nii.gz"), truth)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_roundtrip_preserves_values_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::<f32>::from_shape_fn([5, 4, 3], [0.5, 1.0, 2.0], |(x, y, z)| {
            (x * 100 + y * 10 + z) as f32 * 0.5
        })
        .unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&p, &v).unwrap();
            let back: Volume3D<f32> = read_volume(&p).unwrap();
            assert_eq!(back.data(), v.data());
            assert_eq!(back.spacing(), v.spacing());
        }
    }

    #[test]
    fn mask_roundtrip_and_non_binary_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask3D::from_shape_fn([3, 3, 3], [1.0; 3], |(x, y, z)| x == y && y == z).unwrap();
        let p = dir.path().join("m.nii.gz");
        write_mask(&p, &m).unwrap();
        assert_eq!(read_mask(&p).unwrap().data(), m.data());

        let v = Volume3D::<f32>::from_shape_fn([2, 2, 2], [1.0; 3], |(x, _, _)| 2.0 * x as f32).unwrap();
        let p = dir.path().join("bad.nii.gz");
        write_volume(&p, &v).unwrap();
        assert!(matches!(read_mask(&p), Err(Error::NonBinary(_))));
    }

    #[test]
    fn missing_file_reported() {
        let err = read_volume::<f32>("/nonexistent/t1.nii.gz").unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }

    #[test]
    fn flipped_axis_is_reoriented() {
        let data = Array3::from_shape_fn((3, 2, 2), |(x, _, _)| x as f64);
        let affine = [
            [-2.0, 0.0, 0.0, 10.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 3.0, 0.0],
        ];
        let (out, spacing, aff) = reorient(data, [2.0, 1.0, 3.0], affine);
        assert_eq!(out[[0, 0, 0]], 2.0);
        assert_eq!(out[[2, 0, 0]], 0.0);
        assert_eq!(spacing, [2.0, 1.0, 3.0]);
        assert_eq!(aff[0][0], 2.0);
        assert_eq!(aff[0][3], 6.0);
    }

    #[test]
    fn permuted_axes_are_reoriented() {
        // voxel axis 0 runs along world z, voxel axis 2 along world x
        let data = Array3::from_shape_fn((4, 3, 2), |(i, j, k)| (i * 100 + j * 10 + k) as f64);
        let affine = [
            [0.0, 0.0, 1.5, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0, 0.0],
        ];
        let (out, spacing, _) = reorient(data, [2.0, 1.0, 1.5], affine);
        assert_eq!(out.shape(), &[2, 3, 4]);
        assert_eq!(out[[1, 2, 3]], 321.0);
        assert_eq!(spacing, [1.5, 1.0, 2.0]);
    }

    #[test]
    fn case_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let case_dir = dir.path().join("subject01");
        let v = Volume3D::<f32>::from_shape_fn([4, 4, 2], [1.0; 3], |(x, y, z)| (x + y + z) as f32)
            .unwrap();
        let truth = v.map(|&x| x > 5.0);
        let case = MultiModalCase::new("subject01", v.clone(), v.clone(), v, Some(truth)).unwrap();
        write_case_dir(&case_dir, &case).unwrap();
        let back: MultiModalCase<f32> = load_case_dir(&case_dir).unwrap();
        assert_eq!(back.case_id, "subject01");
        assert_eq!(back.truth.unwrap().data(), case.truth.unwrap().data());
    }
}
