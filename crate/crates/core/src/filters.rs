//! Rendering of first-layer convolution filters as a tiled RGB image.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scnn::NetworkParams;
use crate::tensor::Tensor;

/// Separator color between tiles.
const SEPARATOR: u8 = 0;

/// An interleaved RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterGrid {
    pub width: usize,
    pub height: usize,
    pub columns: usize,
    pub rows: usize,
    /// Filter index shown in each tile, row-major.
    pub order: Vec<usize>,
    pub rgb: Vec<u8>,
}

/// HSV hue in degrees `[0, 360)`; gray (`max == min`) has hue 0.
pub fn hue(rgb: [f64; 3]) -> f64 {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    60.0 * h
}

/// One filter `[3, kh, kw]` min-max scaled to `0..=255`; a constant filter is mid-gray.
fn normalize_filter(data: &[f64]) -> Vec<f64> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![127.5; data.len()];
    }
    data.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect()
}

/// Tiles filters `[K, 3, kh, kw]` into a grid of `ceil(sqrt(K))` columns with
/// 1-px separators, ordered by ascending hue of each tile's mean color.
pub fn render_filter_grid(filters: &Tensor) -> Result<FilterGrid> {
    filters.expect_rank("render_filter_grid", 4)?;
    if filters.dim(1) != 3 {
        return Err(Error::dim("render_filter_grid", "channels", 3, filters.dim(1)));
    }
    let (k, kh, kw) = (filters.dim(0), filters.dim(2), filters.dim(3));
    if k == 0 {
        return Err(Error::Usage("no filters to render".into()));
    }
    let tiles: Vec<Vec<f64>> = (0..k).map(|i| normalize_filter(filters.outer(i))).collect();
    let area = kh * kw;
    let hues: Vec<f64> = tiles
        .iter()
        .map(|t| hue([0, 1, 2].map(|c| t[c * area..(c + 1) * area].iter().sum::<f64>() / area as f64)))
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| hues[a].total_cmp(&hues[b]));

    let columns = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(columns);
    let width = columns * kw + columns - 1;
    let height = rows * kh + rows - 1;
    let mut rgb = vec![SEPARATOR; width * height * 3];
    for (slot, &f) in order.iter().enumerate() {
        let (ty, tx) = (slot / columns * (kh + 1), slot % columns * (kw + 1));
        for y in 0..kh {
            for x in 0..kw {
                for c in 0..3 {
                    rgb[((ty + y) * width + tx + x) * 3 + c] = tiles[f][c * area + y * kw + x].round() as u8;
                }
            }
        }
    }
    Ok(FilterGrid {
        width,
        height,
        columns,
        rows,
        order,
        rgb,
    })
}

impl FilterGrid {
    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.rgb, self.width as u32, self.height as u32, image::ColorType::Rgb8).map_err(|e| {
            Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            }
        })
    }
}

/// Renders the first branch's C1 filters of `params` to a PNG file.
pub fn write_filter_grid(params: &NetworkParams, path: &Path) -> Result<FilterGrid> {
    let grid = render_filter_grid(&params.branches()[0].c1_filters)?;
    grid.save_png(path)?;
    Ok(grid)
}
