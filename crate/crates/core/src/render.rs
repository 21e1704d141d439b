//! Heatmap images of unit grids.
//!
//! The color scale is fixed: 0 maps to the bottom of the normalization window
//! and 1 to the top, so panels rendered separately stay comparable.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::grid::Grid;

// Viridis anchor colors at evenly spaced positions.
const ANCHORS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

/// Color of a unit value; values outside `[0, 1]` saturate and NaN renders
/// black.
pub fn colormap(v: f32) -> [u8; 3] {
    if v.is_nan() {
        return [0, 0, 0];
    }
    let x = v.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f32;
    let i = (x.floor() as usize).min(ANCHORS.len() - 2);
    let f = x - i as f32;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    std::array::from_fn(|k| (a[k] as f32 + f * (b[k] as f32 - a[k] as f32)).round() as u8)
}

/// Row 0 is drawn at the bottom so the image reads like a map with y up.
/// Each cell becomes a `scale x scale` block.
pub fn heatmap(grid: &Grid<f32>, scale: u32) -> Result<RgbImage> {
    if scale == 0 {
        return Err(Error::Domain("render scale must be at least 1".into()));
    }
    let (rows, cols) = grid.dims();
    let img = ImageBuffer::from_fn(cols as u32 * scale, rows as u32 * scale, |x, y| {
        let col = (x / scale) as usize;
        let row = rows - 1 - (y / scale) as usize;
        Rgb(colormap(*grid.get(row, col)))
    });
    Ok(img)
}

pub fn write_png(path: &Path, grid: &Grid<f32>, scale: u32) -> Result<()> {
    heatmap(grid, scale)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
}
