//! Contrast-limited adaptive histogram equalization.
//!
//! Tile `i` of `n` along an axis of length `L` covers `[i·L/n, (i+1)·L/n)`.
//! Each tile gets a 256-entry lookup table built from its clipped histogram,
//! and every pixel blends the tables of the four nearest tile centres.

use super::image::Image;
use crate::error::{config_err, Result};

const BINS: usize = 256;

/// BT.601 full-range luma/chroma conversion.
fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b,
    ]
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    [
        y + 1.402 * (cr - 128.0),
        y - 0.344_136 * (cb - 128.0) - 0.714_136 * (cr - 128.0),
        y + 1.772 * (cb - 128.0),
    ]
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub(crate) fn tile_bounds(len: usize, tiles: usize, i: usize) -> (usize, usize) {
    (i * len / tiles, (i + 1) * len / tiles)
}

/// Clips `hist` at `limit` and spreads the excess evenly over all bins,
/// repeating while the re-clipped excess is at least one count.
pub fn clip_histogram(hist: &mut [f64; BINS], limit: f64) {
    loop {
        let mut excess = 0.0;
        for h in hist.iter_mut() {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let share = excess / BINS as f64;
        for h in hist.iter_mut() {
            *h += share;
        }
        if excess < 1.0 {
            return;
        }
    }
}

/// Equalization table of one tile. A tile holding a single grey level maps
/// every value to itself, so flat regions are left untouched.
fn tile_lut(values: impl Iterator<Item = u8>, clip_limit: f64) -> [u8; BINS] {
    let mut hist = [0f64; BINS];
    let mut n = 0usize;
    for v in values {
        hist[v as usize] += 1.0;
        n += 1;
    }
    let mut lut = [0u8; BINS];
    if hist.iter().filter(|&&h| h > 0.0).count() <= 1 {
        for (v, slot) in lut.iter_mut().enumerate() {
            *slot = v as u8;
        }
        return lut;
    }
    clip_histogram(&mut hist, clip_limit * n as f64 / BINS as f64);
    let total: f64 = hist.iter().sum();
    let mut cdf = 0.0;
    for (slot, h) in lut.iter_mut().zip(hist) {
        cdf += h;
        *slot = to_u8(255.0 * cdf / total);
    }
    lut
}

/// Interpolation anchors along one axis: for each coordinate the lower and
/// upper tile index and the weight of the upper one.
fn axis_weights(len: usize, tiles: usize) -> Vec<(usize, usize, f64)> {
    let centres: Vec<f64> = (0..tiles)
        .map(|i| {
            let (s, e) = tile_bounds(len, tiles, i);
            (s + e - 1) as f64 / 2.0
        })
        .collect();
    (0..len)
        .map(|p| {
            let p = p as f64;
            if p <= centres[0] {
                return (0, 0, 0.0);
            }
            if p >= centres[tiles - 1] {
                return (tiles - 1, tiles - 1, 0.0);
            }
            let lo = centres
                .iter()
                .rposition(|&c| c <= p)
                .expect("p is past the first centre");
            let hi = lo + 1;
            (lo, hi, (p - centres[lo]) / (centres[hi] - centres[lo]))
        })
        .collect()
}

/// CLAHE on a single 8-bit plane.
pub fn clahe_plane(
    plane: &[u8],
    height: usize,
    width: usize,
    tiles: (usize, usize),
    clip_limit: f64,
) -> Result<Vec<u8>> {
    let (rows, cols) = tiles;
    if rows == 0 || cols == 0 || rows > height || cols > width {
        return config_err(format!(
            "CLAHE tiles {rows}x{cols} do not fit a {height}x{width} image"
        ));
    }
    if !(clip_limit.is_finite() && clip_limit > 0.0) {
        return config_err(format!(
            "CLAHE clip limit must be positive, got {clip_limit}"
        ));
    }
    let mut luts = Vec::with_capacity(rows * cols);
    for ty in 0..rows {
        let (y0, y1) = tile_bounds(height, rows, ty);
        for tx in 0..cols {
            let (x0, x1) = tile_bounds(width, cols, tx);
            let values =
                (y0..y1).flat_map(|y| plane[y * width + x0..y * width + x1].iter().copied());
            luts.push(tile_lut(values, clip_limit));
        }
    }
    let wy = axis_weights(height, rows);
    let wx = axis_weights(width, cols);
    let mut out = vec![0u8; plane.len()];
    for (y, &(r0, r1, fy)) in wy.iter().enumerate() {
        for (x, &(c0, c1, fx)) in wx.iter().enumerate() {
            let v = plane[y * width + x] as usize;
            let at = |r: usize, c: usize| luts[r * cols + c][v] as f64;
            let top = (1.0 - fx) * at(r0, c0) + fx * at(r0, c1);
            let bottom = (1.0 - fx) * at(r1, c0) + fx * at(r1, c1);
            out[y * width + x] = to_u8((1.0 - fy) * top + fy * bottom);
        }
    }
    Ok(out)
}

/// CLAHE on grey images directly; colour images are equalized on BT.601
/// luma only.
///
/// For colour input the luma is quantized, equalized, and the change in
/// the quantized luma is added back to the exact luma before converting to
/// RGB, so pixels whose luma is left alone come back unchanged.
pub fn clahe(img: &Image, tiles: (usize, usize), clip_limit: f64) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if img.channels() == 1 {
        let out = clahe_plane(img.pixels(), h, w, tiles, clip_limit)?;
        return Image::new(h, w, 1, out);
    }
    let ycc: Vec<[f64; 3]> = img
        .pixels()
        .chunks_exact(3)
        .map(|p| rgb_to_ycbcr(p[0] as f64, p[1] as f64, p[2] as f64))
        .collect();
    let luma: Vec<u8> = ycc.iter().map(|p| to_u8(p[0])).collect();
    let eq = clahe_plane(&luma, h, w, tiles, clip_limit)?;
    let mut out = Vec::with_capacity(img.pixels().len());
    for ((p, &yq), &ye) in ycc.iter().zip(&luma).zip(&eq) {
        let y = p[0] + (ye as f64 - yq as f64);
        out.extend(ycbcr_to_rgb(y, p[1], p[2]).map(to_u8));
    }
    Image::new(h, w, 3, out)
}
