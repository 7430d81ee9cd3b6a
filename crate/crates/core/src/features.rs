//! Fixed-length crop descriptor: a gradient-orientation histogram over a
//! canonical 64x64 resampling of the crop, followed by a coarse RGB color
//! histogram.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Raster;

pub const CROP_SIDE: usize = 64;
pub const CELL_SIDE: usize = 8;
pub const ORIENTATION_BINS: usize = 9;
pub const CELLS: usize = CROP_SIDE / CELL_SIDE;
pub const BLOCKS: usize = CELLS - 1;
/// 2x2 cells per block, stride one cell.
pub const GRADIENT_LEN: usize = BLOCKS * BLOCKS * 4 * ORIENTATION_BINS;
pub const COLOR_LEVELS: usize = 3;
pub const COLOR_LEN: usize = COLOR_LEVELS * COLOR_LEVELS * COLOR_LEVELS;
/// 1764 gradient entries followed by 27 color entries.
pub const FEATURE_LEN: usize = GRADIENT_LEN + COLOR_LEN;

const BLOCK_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn gradient_part(&self) -> &[f64] {
        &self.0[..GRADIENT_LEN]
    }

    pub fn color_part(&self) -> &[f64] {
        &self.0[GRADIENT_LEN..]
    }
}

/// Descriptor of the crop `b` of `r`. The box is clipped to the image first.
pub fn extract_features(r: &Raster, b: &BBox) -> Result<FeatureVector> {
    let b = b
        .clip(r.size())
        .filter(|c| c.area() > 0.0)
        .ok_or_else(|| Error::invalid(format!("box {b:?} has no area inside the image")))?;
    let crop = resample(r, &b);
    let mut out = gradient_histogram(&crop);
    out.extend(color_histogram(&crop));
    Ok(FeatureVector(out))
}

/// Bilinear resampling of the box onto a CROP_SIDE x CROP_SIDE grid.
fn resample(r: &Raster, b: &BBox) -> Vec<[f64; 3]> {
    let sx = b.width() / CROP_SIDE as f64;
    let sy = b.height() / CROP_SIDE as f64;
    let mut out = Vec::with_capacity(CROP_SIDE * CROP_SIDE);
    for v in 0..CROP_SIDE {
        let y = b.y_min + (v as f64 + 0.5) * sy;
        for u in 0..CROP_SIDE {
            let x = b.x_min + (u as f64 + 0.5) * sx;
            out.push(r.sample_bilinear(x, y));
        }
    }
    out
}

fn gradient_histogram(crop: &[[f64; 3]]) -> Vec<f64> {
    let n = CROP_SIDE;
    let mut cells = vec![0.0; CELLS * CELLS * ORIENTATION_BINS];
    let bin_width = 180.0 / ORIENTATION_BINS as f64;
    for y in 0..n {
        for x in 0..n {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(n - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(n - 1));
            // strongest channel wins
            let mut best = (0.0, 0.0, 0.0);
            for c in 0..3 {
                let gx = crop[y * n + xr][c] - crop[y * n + xl][c];
                let gy = crop[yd * n + x][c] - crop[yu * n + x][c];
                let m2 = gx * gx + gy * gy;
                if m2 > best.0 {
                    best = (m2, gx, gy);
                }
            }
            if best.0 == 0.0 {
                continue;
            }
            let mag = best.0.sqrt();
            let theta = best.2.atan2(best.1).to_degrees().rem_euclid(180.0);
            // linear vote between the two nearest bin centers
            let pos = theta / bin_width - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let lo_bin = (lo as isize).rem_euclid(ORIENTATION_BINS as isize) as usize;
            let hi_bin = (lo_bin + 1) % ORIENTATION_BINS;
            let cell = (y / CELL_SIDE) * CELLS + x / CELL_SIDE;
            cells[cell * ORIENTATION_BINS + lo_bin] += mag * (1.0 - frac);
            cells[cell * ORIENTATION_BINS + hi_bin] += mag * frac;
        }
    }
    let mut out = Vec::with_capacity(GRADIENT_LEN);
    for by in 0..BLOCKS {
        for bx in 0..BLOCKS {
            let start = out.len();
            for (cy, cx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let cell = (by + cy) * CELLS + bx + cx;
                out.extend_from_slice(&cells[cell * ORIENTATION_BINS..(cell + 1) * ORIENTATION_BINS]);
            }
            let norm = (out[start..].iter().map(|v| v * v).sum::<f64>() + BLOCK_EPS * BLOCK_EPS).sqrt();
            out[start..].iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

fn color_histogram(crop: &[[f64; 3]]) -> Vec<f64> {
    let mut hist = vec![0.0; COLOR_LEN];
    let level = |v: f64| ((v * COLOR_LEVELS as f64 / 256.0) as usize).min(COLOR_LEVELS - 1);
    for p in crop {
        let idx = (level(p[0]) * COLOR_LEVELS + level(p[1])) * COLOR_LEVELS + level(p[2]);
        hist[idx] += 1.0;
    }
    let total = crop.len() as f64;
    hist.iter_mut().for_each(|h| *h /= total);
    hist
}

/// Position of a gradient feature entry.
pub fn gradient_index(block_x: usize, block_y: usize, cell_x: usize, cell_y: usize, bin: usize) -> usize {
    (((block_y * BLOCKS + block_x) * 4) + cell_y * 2 + cell_x) * ORIENTATION_BINS + bin
}
