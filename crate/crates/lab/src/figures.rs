//! PNG figures: slice montages and histogram line plots.

use std::path::Path;

use image::{Rgb, RgbImage};
use lesion_synth_core::texture::HistogramCondition;
use lesion_synth_core::{BinaryMask, Volume3D};

use crate::error::{LabError, Result};

const SCALE: u32 = 4;
const OUTLINE: Rgb<u8> = Rgb([230, 40, 40]);

fn gray(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Slice through the mask centroid, or the middle slice without a lesion.
fn slice_index(volume: &Volume3D, mask: Option<&BinaryMask>) -> usize {
    match mask.filter(|m| !m.is_empty()) {
        Some(m) => {
            let n = m.count();
            let sum: usize = m.coords().map(|c| c[0]).sum();
            (sum as f64 / n as f64).round() as usize
        }
        None => volume.spatial()[0] / 2,
    }
}

/// Tiles one axial slice per volume left to right, outlining the mask.
pub fn slice_montage(tiles: &[(&Volume3D, Option<&BinaryMask>)], path: &Path) -> Result<()> {
    let (first, _) = tiles
        .first()
        .ok_or_else(|| LabError::Invalid("montage needs at least one volume".into()))?;
    let [_, h, w] = first.spatial();
    let (tw, th) = (w as u32 * SCALE, h as u32 * SCALE);
    let gap = 2;
    let mut img = RgbImage::from_pixel(
        tiles.len() as u32 * (tw + gap) - gap,
        th,
        Rgb([0, 0, 0]),
    );
    for (i, (v, mask)) in tiles.iter().enumerate() {
        if v.spatial()[1..] != [h, w] {
            return Err(LabError::Invalid("montage volumes differ in size".into()));
        }
        let z = slice_index(v, *mask);
        let edge = mask.map(BinaryMask::surface);
        let x0 = i as u32 * (tw + gap);
        for y in 0..h {
            for x in 0..w {
                let on_edge = edge.as_ref().is_some_and(|e| e.get(z, y, x));
                let px = if on_edge {
                    OUTLINE
                } else {
                    let g = gray(v.get(z, y, x, 0));
                    Rgb([g, g, g])
                };
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        img.put_pixel(x0 + x as u32 * SCALE + dx, y as u32 * SCALE + dy, px);
                    }
                }
            }
        }
    }
    save(&img, path)
}

const PALETTE: [[u8; 3]; 6] = [
    [66, 133, 244],
    [234, 67, 53],
    [251, 188, 5],
    [52, 168, 83],
    [155, 89, 182],
    [90, 90, 90],
];

/// Overlaid histogram curves on a shared vertical scale.
pub fn histogram_plot(series: &[&HistogramCondition], path: &Path) -> Result<()> {
    let (w, h, pad) = (320u32, 180u32, 10u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let top = series
        .iter()
        .flat_map(|s| s.bins.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    for x in pad..w - pad {
        img.put_pixel(x, h - pad, Rgb([0, 0, 0]));
    }
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let n = s.bins.len().max(2);
        let point = |i: usize| -> (f64, f64) {
            let x = pad as f64 + i as f64 / (n - 1) as f64 * (w - 2 * pad) as f64;
            let y = (h - pad) as f64 - s.bins[i] / top * (h - 2 * pad) as f64;
            (x, y)
        };
        for i in 1..s.bins.len() {
            let (ax, ay) = point(i - 1);
            let (bx, by) = point(i);
            let steps = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
            for t in 0..=steps {
                let f = t as f64 / steps as f64;
                let x = (ax + f * (bx - ax)).round() as u32;
                let y = (ay + f * (by - ay)).round() as u32;
                if x < w && y < h {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    save(&img, path)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| LabError::io(p, e))?;
    }
    img.save(path)?;
    Ok(())
}
