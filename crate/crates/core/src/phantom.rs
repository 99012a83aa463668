//! Synthetic multi-modal phantoms with planted lacunes, out-of-region decoys and ground truth.
//!
//! Geometry: an ellipsoidal brain, a central ventricle (CSF), and two mirror-symmetric
//! deep-grey-matter lobes forming the prevalence region. Lacunes are ellipsoids placed wholly
//! inside the region with a dark core and a bright FLAIR rim; decoys look identical but sit
//! outside the region at a configurable distance.

use ndarray::{Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::dilate_mm;
use crate::scalar::Real;
use crate::volume::{Mask3D, MultiModalCase, Volume3D};

/// Mean signal per tissue class, in (T1, T2, FLAIR) order. Background is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intensities {
    pub tissue: [f64; 3],
    pub core: [f64; 3],
    pub csf: [f64; 3],
    pub flair_rim: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Self {
            tissue: [1.0, 0.6, 0.8],
            core: [0.3, 1.4, 0.25],
            csf: [0.25, 1.5, 0.2],
            flair_rim: 1.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub n_lacunes: usize,
    pub n_decoys_outside_region: usize,
    /// Range of the 3D equivalent diameter in mm.
    pub diameter_range: [f64; 2],
    /// Semi-axis ratios are drawn from this range.
    pub axis_ratio_range: [f64; 2],
    pub rim_thickness: usize,
    /// Standard deviation of the smooth additive noise.
    pub noise_level: f64,
    /// Minimum physical distance between a decoy and the prevalence region.
    pub decoy_margin_mm: f64,
    pub intensities: Intensities,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [128, 128, 64],
            spacing: [1.0, 1.0, 1.0],
            n_lacunes: 3,
            n_decoys_outside_region: 2,
            diameter_range: [3.0, 15.0],
            axis_ratio_range: [0.5, 1.0],
            rim_thickness: 1,
            noise_level: 0.05,
            decoy_margin_mm: 10.0,
            intensities: Intensities::default(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [dmin, dmax] = self.diameter_range;
        let [qmin, qmax] = self.axis_ratio_range;
        if self.shape.iter().any(|&n| n < 8) {
            return Err(Error::Config(format!("phantom shape {:?} too small", self.shape)));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config(format!("invalid spacing {:?}", self.spacing)));
        }
        if !(dmin > 0.0 && dmin <= dmax) {
            return Err(Error::Config(format!("invalid diameter range {:?}", self.diameter_range)));
        }
        if !(qmin > 0.0 && qmin <= qmax && qmax <= 1.0) {
            return Err(Error::Config(format!("invalid axis ratio range {:?}", self.axis_ratio_range)));
        }
        if !(self.noise_level >= 0.0 && self.decoy_margin_mm >= 0.0) {
            return Err(Error::Config("noise level and decoy margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// One planted ellipsoid as recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedLesion {
    /// Voxel-space centre (x, y, z).
    pub center: [f64; 3],
    /// Semi-axes in mm: two in-plane axes, then the axial one.
    pub semi_axes_mm: [f64; 3],
    /// In-plane rotation of the first semi-axis, radians.
    pub angle: f64,
    /// Target 3D equivalent diameter in mm.
    pub diameter_mm: f64,
    /// Equivalent diameter of the rasterised core.
    pub realized_diameter_mm: f64,
    pub decoy: bool,
}

#[derive(Clone, Debug)]
pub struct Phantom<T> {
    /// Truth covers in-region lacune cores only.
    pub case: MultiModalCase<T>,
    pub region: Mask3D,
    pub csf: Mask3D,
    pub decoys: Mask3D,
    pub lesions: Vec<PlantedLesion>,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    cos: f64,
    sin: f64,
}

impl Ellipsoid {
    fn axis_aligned(center: [f64; 3], semi: [f64; 3]) -> Self {
        Self {
            center,
            semi,
            cos: 1.0,
            sin: 0.0,
        }
    }

    /// Normalised radius of a physical point; <= 1 inside.
    fn rho(&self, p: [f64; 3]) -> f64 {
        let (dx, dy, dz) = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]);
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        ((u / self.semi[0]).powi(2) + (v / self.semi[1]).powi(2) + (dz / self.semi[2]).powi(2)).sqrt()
    }

    fn grown(&self, by: [f64; 3]) -> Self {
        Self {
            center: self.center,
            semi: [self.semi[0] + by[0], self.semi[1] + by[1], self.semi[2] + by[2]],
            cos: self.cos,
            sin: self.sin,
        }
    }

    fn reach(&self) -> f64 {
        self.semi.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Core,
    Rim,
}

fn position(idx: (usize, usize, usize), spacing: [f64; 3]) -> [f64; 3] {
    [
        idx.0 as f64 * spacing[0],
        idx.1 as f64 * spacing[1],
        idx.2 as f64 * spacing[2],
    ]
}

/// Voxels of a lesion's core and rim.
fn footprint(e: &Ellipsoid, rim: [f64; 3], shape: [usize; 3], spacing: [f64; 3]) -> Vec<((usize, usize, usize), Part)> {
    let outer = e.grown(rim);
    let reach = outer.reach();
    let lo: Vec<usize> = (0..3)
        .map(|a| ((e.center[a] - reach) / spacing[a]).floor().max(0.0) as usize)
        .collect();
    let hi: Vec<usize> = (0..3)
        .map(|a| (((e.center[a] + reach) / spacing[a]).ceil() as usize).min(shape[a] - 1))
        .collect();
    let mut out = Vec::new();
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for z in lo[2]..=hi[2] {
                let p = position((x, y, z), spacing);
                if e.rho(p) <= 1.0 {
                    out.push(((x, y, z), Part::Core));
                } else if outer.rho(p) <= 1.0 {
                    out.push(((x, y, z), Part::Rim));
                }
            }
        }
    }
    out
}

struct Anatomy {
    brain: Ellipsoid,
    ventricle: Ellipsoid,
    lobes: [Ellipsoid; 2],
}

fn anatomy(spec: &PhantomSpec) -> Anatomy {
    let ext: Vec<f64> = (0..3).map(|a| (spec.shape[a] - 1) as f64 * spec.spacing[a]).collect();
    let full: Vec<f64> = (0..3).map(|a| spec.shape[a] as f64 * spec.spacing[a]).collect();
    let c = [ext[0] / 2.0, ext[1] / 2.0, ext[2] / 2.0];
    let lobe = |sign: f64| {
        Ellipsoid::axis_aligned(
            [c[0] + sign * 0.2 * full[0], c[1], c[2]],
            [0.13 * full[0], 0.2 * full[1], 0.3 * full[2]],
        )
    };
    Anatomy {
        brain: Ellipsoid::axis_aligned(c, [0.45 * full[0], 0.45 * full[1], 0.45 * full[2]]),
        ventricle: Ellipsoid::axis_aligned(c, [0.04 * full[0], 0.18 * full[1], 0.22 * full[2]]),
        lobes: [lobe(-1.0), lobe(1.0)],
    }
}

/// Box-blurred Gaussian field rescaled to unit standard deviation.
fn smooth_noise(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut a = Array3::from_shape_simple_fn((shape[0], shape[1], shape[2]), || rng.sample::<f64, _>(StandardNormal));
    for axis in 0..3 {
        let src = a.clone();
        let n = shape[axis];
        for (mut dst, lane) in a.lanes_mut(Axis(axis)).into_iter().zip(src.lanes(Axis(axis))) {
            for i in 0..n {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(n - 1);
                let sum: f64 = (lo..=hi).map(|j| lane[j]).sum();
                dst[i] = sum / (hi - lo + 1) as f64;
            }
        }
    }
    a *= 27f64.sqrt();
    a
}

fn sample_semi_axes(d: f64, ratios: [f64; 2], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let q1 = rng.gen_range(ratios[0]..=ratios[1]);
    let q2 = rng.gen_range(ratios[0]..=ratios[1]);
    // product of semi-axes must equal (d/2)^3 for the target equivalent diameter
    let s = (d / 2.0) / (q1 * q2).cbrt();
    let mut axes = [s, s * q1, s * q2];
    axes.sort_by(|a, b| b.total_cmp(a));
    axes
}

const PLACEMENT_ATTEMPTS: usize = 20_000;

pub fn generate_phantom<T: Real>(spec: &PhantomSpec, case_id: &str) -> Result<Phantom<T>> {
    spec.validate()?;
    let shape = spec.shape;
    let sp = spec.spacing;
    let dims = (shape[0], shape[1], shape[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let anat = anatomy(spec);

    let brain = Array3::from_shape_fn(dims, |i| anat.brain.rho(position(i, sp)) <= 1.0);
    let csf = Array3::from_shape_fn(dims, |i| anat.ventricle.rho(position(i, sp)) <= 1.0);
    let region = Array3::from_shape_fn(dims, |i| {
        let p = position(i, sp);
        !csf[i] && anat.lobes.iter().any(|l| l.rho(p) <= 1.0)
    });
    let region_mask = Mask3D::new(region, sp)?;
    let csf_mask = Mask3D::new(csf, sp)?;
    let inner_brain = anat.brain.grown([-2.0; 3]);
    let near_csf = anat.ventricle.grown([3.0; 3]);
    let forbidden = if spec.n_decoys_outside_region > 0 {
        Some(dilate_mm(&region_mask, spec.decoy_margin_mm)?)
    } else {
        None
    };

    let rim = sp.map(|s| s * spec.rim_thickness as f64);
    let mut occupied = Array3::from_elem(dims, false);
    let mut lesions = Vec::new();
    let mut t1 = Array3::<f64>::zeros(dims);
    let mut t2 = Array3::<f64>::zeros(dims);
    let mut flair = Array3::<f64>::zeros(dims);
    let iv = &spec.intensities;
    Zip::indexed(&mut t1)
        .and(&mut t2)
        .and(&mut flair)
        .for_each(|i, a, b, c| {
            let v = if csf_mask.data()[i] {
                iv.csf
            } else if brain[i] {
                iv.tissue
            } else {
                return;
            };
            (*a, *b, *c) = (v[0], v[1], v[2]);
        });
    let mut truth = Array3::from_elem(dims, false);
    let mut decoys = Array3::from_elem(dims, false);

    let kinds = std::iter::repeat_n(false, spec.n_lacunes)
        .chain(std::iter::repeat_n(true, spec.n_decoys_outside_region));
    for decoy in kinds {
        let d = rng.gen_range(spec.diameter_range[0]..=spec.diameter_range[1]);
        let semi = sample_semi_axes(d, spec.axis_ratio_range, &mut rng);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let center = if decoy {
                let b = &anat.brain;
                [0, 1, 2].map(|a| rng.gen_range(b.center[a] - b.semi[a]..=b.center[a] + b.semi[a]))
            } else {
                let l = &anat.lobes[rng.gen_range(0..2)];
                [0, 1, 2].map(|a| rng.gen_range(l.center[a] - l.semi[a]..=l.center[a] + l.semi[a]))
            };
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let e = Ellipsoid {
                center,
                semi,
                cos: angle.cos(),
                sin: angle.sin(),
            };
            let fp = footprint(&e, rim, shape, sp);
            let cores = fp.iter().filter(|(_, p)| *p == Part::Core).count();
            if cores == 0 {
                continue;
            }
            let ok = fp.iter().all(|&(i, _)| {
                let p = position(i, sp);
                let inside_volume = i.0 > 0 && i.1 > 0 && i.2 > 0 && i.0 + 1 < shape[0] && i.1 + 1 < shape[1] && i.2 + 1 < shape[2];
                let placement = if decoy {
                    inner_brain.rho(p) <= 1.0
                        && near_csf.rho(p) > 1.0
                        && !forbidden.as_ref().expect("decoys need the margin map").data()[i]
                } else {
                    region_mask.data()[i]
                };
                inside_volume && placement && !occupied[i]
            });
            if ok {
                placed = Some((e, angle, fp, cores));
                break;
            }
        }
        let (e, angle, fp, cores) = placed.ok_or_else(|| {
            Error::Config(format!(
                "could not place a {} of diameter {d:.1} mm after {PLACEMENT_ATTEMPTS} attempts",
                if decoy { "decoy" } else { "lacune" }
            ))
        })?;
        for &(i, part) in &fp {
            let v = match part {
                Part::Core => iv.core,
                Part::Rim => [iv.tissue[0], iv.tissue[1], iv.flair_rim],
            };
            (t1[i], t2[i], flair[i]) = (v[0], v[1], v[2]);
            if part == Part::Core {
                if decoy {
                    decoys[i] = true;
                } else {
                    truth[i] = true;
                }
            }
            // reserve a one-voxel shell so lesions never touch
            for dx in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dz in -1isize..=1 {
                        let q = (i.0 as isize + dx, i.1 as isize + dy, i.2 as isize + dz);
                        if q.0 >= 0 && q.1 >= 0 && q.2 >= 0 && (q.0 as usize) < shape[0] && (q.1 as usize) < shape[1] && (q.2 as usize) < shape[2] {
                            occupied[(q.0 as usize, q.1 as usize, q.2 as usize)] = true;
                        }
                    }
                }
            }
        }
        let voxel_volume = sp[0] * sp[1] * sp[2];
        lesions.push(PlantedLesion {
            center: [0, 1, 2].map(|a| e.center[a] / sp[a]),
            semi_axes_mm: e.semi,
            angle,
            diameter_mm: d,
            realized_diameter_mm: crate::morphology::equivalent_diameter_3d(cores as f64 * voxel_volume),
            decoy,
        });
    }

    if spec.noise_level > 0.0 {
        for vol in [&mut t1, &mut t2, &mut flair] {
            let n = smooth_noise(shape, &mut rng);
            vol.scaled_add(spec.noise_level, &n);
        }
    }

    let to_t = |a: Array3<f64>| Volume3D::new(a.mapv(T::lit), sp);
    let case = MultiModalCase::new(
        case_id,
        to_t(t1)?,
        to_t(t2)?,
        to_t(flair)?,
        Some(Mask3D::new(truth, sp)?),
    )?;
    Ok(Phantom {
        case,
        region: region_mask,
        csf: csf_mask,
        decoys: Mask3D::new(decoys, sp)?,
        lesions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{equivalent_diameter_3d, label_3d, Connectivity3};

    fn small_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn empty_phantom_is_valid() {
        let spec = PhantomSpec {
            n_lacunes: 0,
            n_decoys_outside_region: 0,
            ..small_spec(1)
        };
        let p = generate_phantom::<f32>(&spec, "empty").unwrap();
        assert!(!p.case.truth.as_ref().unwrap().any());
        assert!(p.lesions.is_empty());
    }

    #[test]
    fn three_lacunes_give_three_components_in_range() {
        let p = generate_phantom::<f32>(&small_spec(7), "p").unwrap();
        let truth = p.case.truth.as_ref().unwrap();
        let labels = label_3d(truth.data().view(), Connectivity3::TwentySix);
        assert_eq!(labels.count(), 3);
        for c in &labels.components {
            let d = equivalent_diameter_3d(c.len() as f64);
            assert!((2.0..=16.0).contains(&d), "equivalent diameter {d}");
        }
        assert!(truth.is_subset_of(&p.region));
    }

    #[test]
    fn decoys_stay_clear_of_region() {
        let p = generate_phantom::<f32>(&small_spec(3), "p").unwrap();
        assert!(p.decoys.any());
        assert!(p.decoys.intersection(&p.region).unwrap().count() == 0);
        let near = dilate_mm(&p.region, 9.0).unwrap();
        assert_eq!(p.decoys.intersection(&near).unwrap().count(), 0);
    }

    #[test]
    fn same_seed_same_volumes() {
        let a = generate_phantom::<f32>(&small_spec(11), "a").unwrap();
        let b = generate_phantom::<f32>(&small_spec(11), "a").unwrap();
        assert_eq!(a.case.flair, b.case.flair);
        assert_eq!(a.case.truth, b.case.truth);
        assert_eq!(a.lesions, b.lesions);
        let c = generate_phantom::<f32>(&small_spec(12), "a").unwrap();
        assert_ne!(a.case.flair, c.case.flair);
    }

    #[test]
    fn region_is_mirror_symmetric_and_excludes_csf() {
        let p = generate_phantom::<f32>(&small_spec(0), "p").unwrap();
        assert_eq!(p.region.mirrored(0), p.region);
        assert_eq!(p.region.intersection(&p.csf).unwrap().count(), 0);
    }

    #[test]
    fn unplaceable_lacunes_are_a_spec_error() {
        let spec = PhantomSpec {
            shape: [32, 32, 16],
            diameter_range: [14.0, 15.0],
            n_lacunes: 40,
            n_decoys_outside_region: 0,
            ..PhantomSpec::default()
        };
        assert!(matches!(generate_phantom::<f32>(&spec, "x"), Err(Error::Config(_))));
    }
}
