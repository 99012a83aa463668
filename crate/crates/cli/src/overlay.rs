//! Per-slice PNG overlays: FLAIR in grey, prediction in red, truth in green (overlap
//! yellow), prevalence-mask outline in blue.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use lacune::{Case, Mask3D};

fn outline(mask: &Mask3D, x: usize, y: usize, z: usize) -> bool {
    let d = mask.data();
    let [nx, ny, _] = mask.shape();
    d[[x, y, z]]
        && (x == 0
            || y == 0
            || x + 1 == nx
            || y + 1 == ny
            || !d[[x - 1, y, z]]
            || !d[[x + 1, y, z]]
            || !d[[x, y - 1, z]]
            || !d[[x, y + 1, z]])
}

/// Writes `<id>_z<slice>.png` for every slice where prediction or truth is present.
pub fn write_overlays(dir: &Path, case: &Case, pred: &Mask3D, subject_mask: &Mask3D) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let flair = case.flair.data();
    let (lo, hi) = flair
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let [nx, ny, nz] = case.shape();
    let truth = case.truth.as_ref();
    let mut written = Vec::new();
    for z in 0..nz {
        let has_truth = truth.is_some_and(|t| t.plane(z).iter().any(|&b| b));
        if !has_truth && !pred.plane(z).iter().any(|&b| b) {
            continue;
        }
        let img = RgbImage::from_fn(ny as u32, nx as u32, |col, row| {
            let (x, y) = (row as usize, col as usize);
            let g = (((flair[[x, y, z]] - lo) / span) * 200.0) as u8;
            let mut px = [g, g, g];
            if outline(subject_mask, x, y, z) {
                px[2] = 255;
            }
            if truth.is_some_and(|t| t.data()[[x, y, z]]) {
                px[1] = 255;
            }
            if pred.data()[[x, y, z]] {
                px[0] = 255;
            }
            Rgb(px)
        });
        let path = dir.join(format!("{}_z{z:03}.png", case.case_id));
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
