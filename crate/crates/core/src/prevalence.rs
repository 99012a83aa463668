//! Lacune prevalence map: cohort frequency aggregation, mirroring, physical dilation,
//! CSF exclusion, transfer to subject space and component-level false-positive removal.

use std::path::PathBuf;
use std::process::Command;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{self, Connectivity3};
use crate::nifti_io;
use crate::scalar::Real;
use crate::volume::{Mask3D, Volume3D};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceProvenance {
    pub subject_count: usize,
    pub dilation_radius_mm: Option<f64>,
    pub symmetrized: bool,
    pub csf_excluded: bool,
}

/// Voxelwise lesion frequency in atlas space together with its post-processed binary mask.
#[derive(Clone, Debug)]
pub struct PrevalenceMap<T> {
    /// Fraction of subjects with a lacune at each voxel, in [0, 1].
    pub frequency: Volume3D<T>,
    pub mask: Mask3D,
    pub provenance: PrevalenceProvenance,
}

/// Voxelwise frequency over a set of co-registered masks. The initial mask is `frequency > 0`.
pub fn build_frequency<T: Real>(masks: &[Mask3D]) -> Result<PrevalenceMap<T>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Empty("no lesion masks to aggregate".into()))?;
    let mut counts = Array3::<u32>::zeros(first.data().dim());
    for (i, m) in masks.iter().enumerate() {
        first.check_same_geometry(m, &format!("mask {i}"))?;
        Zip::from(&mut counts).and(m.data()).for_each(|c, &b| *c += u32::from(b));
    }
    let n = T::from_usize(masks.len()).expect("mask count");
    let frequency = first.with_data(counts.mapv(|c| T::from_u32(c).expect("count") / n))?;
    let mask = first.with_data(counts.mapv(|c| c > 0))?;
    Ok(PrevalenceMap {
        frequency,
        mask,
        provenance: PrevalenceProvenance {
            subject_count: masks.len(),
            ..Default::default()
        },
    })
}

impl<T: Real> PrevalenceMap<T> {
    /// Voxelwise max with the mirror image along `axis` (0 = left-right).
    pub fn symmetrize(&self, axis: usize) -> Result<Self> {
        if axis > 2 {
            return Err(Error::Config(format!("mirror axis {axis} out of range")));
        }
        let mirror_f = self.frequency.mirrored(axis);
        let mirror_m = self.mask.mirrored(axis);
        let mut frequency = self.frequency.clone();
        Zip::from(frequency.data_mut())
            .and(mirror_f.data())
            .for_each(|a, &b| *a = a.max(b));
        let mask = self.mask.union(&mirror_m)?;
        Ok(Self {
            frequency,
            mask,
            provenance: PrevalenceProvenance {
                symmetrized: true,
                ..self.provenance.clone()
            },
        })
    }

    pub fn dilate(&self, radius_mm: f64) -> Result<Self> {
        Ok(Self {
            frequency: self.frequency.clone(),
            mask: morphology::dilate_mm(&self.mask, radius_mm)?,
            provenance: PrevalenceProvenance {
                dilation_radius_mm: Some(radius_mm),
                ..self.provenance.clone()
            },
        })
    }

    /// Clear the mask wherever `csf` is set; the frequency volume is kept as observed.
    pub fn remove_csf(&self, csf: &Mask3D) -> Result<Self> {
        self.mask.check_same_geometry(csf, "prevalence mask vs CSF mask")?;
        let mut mask = self.mask.clone();
        Zip::from(mask.data_mut()).and(csf.data()).for_each(|m, &c| *m &= !c);
        Ok(Self {
            frequency: self.frequency.clone(),
            mask,
            provenance: PrevalenceProvenance {
                csf_excluded: true,
                ..self.provenance.clone()
            },
        })
    }

    /// Full post-processing chain: aggregate, mirror, dilate, remove CSF.
    pub fn build(
        masks: &[Mask3D],
        mirror_axis: Option<usize>,
        dilation_mm: f64,
        csf: Option<&Mask3D>,
    ) -> Result<Self> {
        let mut map = build_frequency(masks)?;
        if let Some(axis) = mirror_axis {
            map = map.symmetrize(axis)?;
        }
        map = map.dilate(dilation_mm)?;
        if let Some(csf) = csf {
            map = map.remove_csf(csf)?;
        }
        Ok(map)
    }
}

/// Target grid of a subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectGeometry {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

impl SubjectGeometry {
    pub fn of<T>(v: &Volume3D<T>) -> Self {
        Self {
            shape: v.shape(),
            spacing: v.spacing(),
        }
    }
}

/// How the atlas-space mask reaches subject space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TransformSpec {
    /// Atlas and subject share a world frame with voxel 0 at the origin; nearest-neighbour
    /// resampling by physical position.
    Identity,
    /// A mask already resampled into subject space by an external tool.
    Precomputed { path: PathBuf },
    /// Shell command template with `{fixed}`, `{moving}` and `{out}` placeholders; the command
    /// must write a subject-space binary mask to `{out}`.
    External {
        command: String,
        fixed: PathBuf,
        moving: PathBuf,
        out: PathBuf,
    },
}

fn check_geometry(m: &Mask3D, g: &SubjectGeometry, what: &str) -> Result<()> {
    let reference = Mask3D::empty(g.shape, g.spacing)?;
    reference.check_same_geometry(m, what)
}

fn resample_nearest(m: &Mask3D, g: &SubjectGeometry) -> Result<Mask3D> {
    let src = m.data();
    let (sx, sy, sz) = src.dim();
    let sp = m.spacing();
    let idx = |v: usize, to: f64, from: f64, n: usize| -> usize {
        (((v as f64) * to / from).round() as usize).min(n - 1)
    };
    Mask3D::from_shape_fn(g.shape, g.spacing, |(x, y, z)| {
        src[[
            idx(x, g.spacing[0], sp[0], sx),
            idx(y, g.spacing[1], sp[1], sy),
            idx(z, g.spacing[2], sp[2], sz),
        ]]
    })
}

/// Bring an atlas-space binary mask into subject space with nearest-neighbour label resampling.
pub fn resample_to_subject(
    atlas_mask: &Mask3D,
    transform: &TransformSpec,
    subject: &SubjectGeometry,
) -> Result<Mask3D> {
    match transform {
        TransformSpec::Identity => {
            if atlas_mask.shape() == subject.shape
                && check_geometry(atlas_mask, subject, "identity").is_ok()
            {
                Ok(atlas_mask.clone())
            } else {
                resample_nearest(atlas_mask, subject)
            }
        }
        TransformSpec::Precomputed { path } => {
            let m = nifti_io::read_mask(path)?;
            check_geometry(&m, subject, "precomputed subject-space mask")?;
            Ok(m)
        }
        TransformSpec::External {
            command,
            fixed,
            moving,
            out,
        } => {
            for p in [fixed, moving] {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
            let cmd = command
                .replace("{fixed}", &fixed.to_string_lossy())
                .replace("{moving}", &moving.to_string_lossy())
                .replace("{out}", &out.to_string_lossy());
            let output = Command::new("sh")
                .arg("-c")
                .arg(&cmd)
                .output()
                .map_err(|e| Error::Registration(format!("cannot spawn `{cmd}`: {e}")))?;
            if !output.status.success() {
                return Err(Error::Registration(format!(
                    "`{cmd}` exited with {}\nstdout:\n{}\nstderr:\n{}",
                    output.status,
                    String::from_utf8_lossy(&output.stdout),
                    String::from_utf8_lossy(&output.stderr)
                )));
            }
            if !out.exists() {
                return Err(Error::Registration(format!(
                    "`{cmd}` succeeded but produced no {}",
                    out.display()
                )));
            }
            let m = nifti_io::read_mask(out)?;
            check_geometry(&m, subject, "registered prevalence mask")?;
            Ok(m)
        }
    }
}

/// Keep each 26-connected predicted component in full iff it touches `subject_mask`.
pub fn apply_mask(pred: &Mask3D, subject_mask: &Mask3D) -> Result<Mask3D> {
    pred.check_same_geometry(subject_mask, "prediction vs prevalence mask")?;
    let labels = morphology::label_3d(pred.data().view(), Connectivity3::TwentySix);
    let allowed = subject_mask.data();
    let mut out = Array3::from_elem(pred.data().dim(), false);
    for comp in &labels.components {
        if comp.iter().any(|&(x, y, z)| allowed[[x, y, z]]) {
            for &(x, y, z) in comp {
                out[[x, y, z]] = true;
            }
        }
    }
    pred.with_data(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(shape: [usize; 3], at: (usize, usize, usize)) -> Mask3D {
        Mask3D::from_shape_fn(shape, [1.0; 3], |p| p == at).unwrap()
    }

    #[test]
    fn frequency_counts() {
        let a = point([4, 4, 4], (1, 1, 1));
        let b = Mask3D::from_shape_fn([4, 4, 4], [1.0; 3], |p| p == (1, 1, 1) || p == (2, 2, 2)).unwrap();
        let m = build_frequency::<f64>(&[a, b]).unwrap();
        assert_eq!(m.frequency.data()[[1, 1, 1]], 1.0);
        assert_eq!(m.frequency.data()[[2, 2, 2]], 0.5);
        assert_eq!(m.frequency.data()[[0, 0, 0]], 0.0);
        assert_eq!(m.mask.count(), 2);
        assert_eq!(m.provenance.subject_count, 2);
    }

    #[test]
    fn identical_masks_give_mask_frequency() {
        let a = point([3, 3, 3], (0, 1, 2));
        let m = build_frequency::<f32>(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(m.frequency.data(), &a.to_real::<f32>().into_data());
    }

    #[test]
    fn frequency_errors() {
        assert!(matches!(build_frequency::<f32>(&[]), Err(Error::Empty(_))));
        let a = point([3, 3, 3], (0, 0, 0));
        let b = point([4, 3, 3], (0, 0, 0));
        assert!(matches!(build_frequency::<f32>(&[a, b]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mirror_sets_both_sides() {
        let m = build_frequency::<f32>(&[point([6, 3, 3], (1, 2, 0))]).unwrap();
        let s = m.symmetrize(0).unwrap();
        assert!(s.mask.data()[[1, 2, 0]] && s.mask.data()[[4, 2, 0]]);
        assert_eq!(s.mask.count(), 2);
        assert_eq!(s.mask.mirrored(0), s.mask);
        let again = s.symmetrize(0).unwrap();
        assert_eq!(again.mask, s.mask);
        assert_eq!(again.frequency, s.frequency);
    }

    #[test]
    fn csf_removal() {
        let m = build_frequency::<f32>(&[Mask3D::from_shape_fn([3, 3, 3], [1.0; 3], |_| true).unwrap()]).unwrap();
        let none = Mask3D::empty([3, 3, 3], [1.0; 3]).unwrap();
        assert_eq!(m.remove_csf(&none).unwrap().mask, m.mask);
        let all = Mask3D::from_shape_fn([3, 3, 3], [1.0; 3], |_| true).unwrap();
        assert!(!m.remove_csf(&all).unwrap().mask.any());
        let bad = Mask3D::empty([2, 3, 3], [1.0; 3]).unwrap();
        assert!(m.remove_csf(&bad).is_err());
    }

    #[test]
    fn apply_mask_component_rule() {
        // two components: one straddling the mask boundary, one fully outside
        let pred = Mask3D::from_shape_fn([10, 3, 3], [1.0; 3], |(x, y, z)| {
            y == 1 && z == 1 && (x <= 3 || x >= 7)
        })
        .unwrap();
        let allowed = Mask3D::from_shape_fn([10, 3, 3], [1.0; 3], |(x, _, _)| x == 0).unwrap();
        let out = apply_mask(&pred, &allowed).unwrap();
        assert_eq!(out.count(), 4);
        assert!(out.data()[[3, 1, 1]]);
        assert!(!out.data()[[8, 1, 1]]);
        let everything = Mask3D::from_shape_fn([10, 3, 3], [1.0; 3], |_| true).unwrap();
        assert_eq!(apply_mask(&pred, &everything).unwrap(), pred);
    }

    #[test]
    fn identity_transform_on_matching_grid() {
        let m = point([4, 4, 4], (1, 2, 3));
        let g = SubjectGeometry::of(&m);
        assert_eq!(resample_to_subject(&m, &TransformSpec::Identity, &g).unwrap(), m);
    }

    #[test]
    fn identity_transform_resamples_to_coarser_grid() {
        let m = Mask3D::from_shape_fn([8, 8, 8], [1.0; 3], |(x, _, _)| x >= 4).unwrap();
        let g = SubjectGeometry {
            shape: [4, 4, 4],
            spacing: [2.0; 3],
        };
        let r = resample_to_subject(&m, &TransformSpec::Identity, &g).unwrap();
        assert_eq!(r.shape(), [4, 4, 4]);
        assert!(!r.data()[[1, 0, 0]] && r.data()[[2, 0, 0]]);
    }

    #[test]
    fn precomputed_passthrough_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let m = point([4, 4, 4], (1, 1, 1));
        let p = dir.path().join("subj.nii.gz");
        nifti_io::write_mask(&p, &m).unwrap();
        let g = SubjectGeometry::of(&m);
        let spec = TransformSpec::Precomputed { path: p.clone() };
        assert_eq!(resample_to_subject(&m, &spec, &g).unwrap(), m);
        let other = SubjectGeometry {
            shape: [5, 4, 4],
            spacing: [1.0; 3],
        };
        assert!(resample_to_subject(&m, &spec, &other).is_err());
        let missing = TransformSpec::Precomputed {
            path: dir.path().join("none.nii.gz"),
        };
        assert!(matches!(resample_to_subject(&m, &missing, &g), Err(Error::MissingFile(_))));
    }

    #[test]
    fn external_command_failure_and_success() {
        let dir = tempfile::tempdir().unwrap();
        let m = point([4, 4, 4], (1, 1, 1));
        let moving = dir.path().join("atlas.nii.gz");
        nifti_io::write_mask(&moving, &m).unwrap();
        let g = SubjectGeometry::of(&m);
        let out = dir.path().join("out.nii.gz");
        let failing = TransformSpec::External {
            command: "echo oops >&2; exit 3".into(),
            fixed: moving.clone(),
            moving: moving.clone(),
            out: out.clone(),
        };
        match resample_to_subject(&m, &failing, &g) {
            Err(Error::Registration(msg)) => assert!(msg.contains("oops")),
            other => panic!("expected registration failure, got {other:?}"),
        }
        let copying = TransformSpec::External {
            command: "cp {moving} {out}".into(),
            fixed: moving.clone(),
            moving,
            out,
        };
        assert_eq!(resample_to_subject(&m, &copying, &g).unwrap(), m);
    }
}
