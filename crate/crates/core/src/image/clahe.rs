//! Contrast-limited adaptive histogram equalization (Zuiderveld) followed by
//! quantization to a small number of grey levels.
//!
//! Tiles are `tile` x `tile` pixels; when the image size is not a multiple of
//! the tile size the last tile along an axis is shifted back so that it ends
//! on the image edge. Each tile's histogram is clipped at
//! `max(clip * tile_pixels, tile_pixels / bins)` and the clipped mass is
//! spread uniformly over all bins. Per-pixel outputs blend the four nearest
//! tile mappings bilinearly (tile centres as nodes, clamped beyond the outer
//! centres) and the blended value in `[0, 1]` is quantized with
//! `min(Q - 1, floor(y * Q))`.

use crate::error::{Error, Result};
use crate::image::GreyImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClaheParams {
    /// Tile side in pixels.
    pub tile: usize,
    /// Clip limit as a fraction of the tile pixel count per bin.
    pub clip: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self { tile: 16, clip: 0.03 }
    }
}

/// Tile start positions along one axis of length `len`.
pub(crate) fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    let tile = tile.min(len);
    let count = len.div_ceil(tile);
    (0..count).map(|i| (i * tile).min(len - tile)).collect()
}

/// Blend nodes along one axis: returns `(lo, hi, t)` so the value at `pos` is
/// `(1 - t) * node[lo] + t * node[hi]`.
pub(crate) fn blend_weights(centres: &[f64], pos: f64) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if pos <= centres[0] {
        return (0, 0, 0.0);
    }
    if pos >= centres[last] {
        return (last, last, 0.0);
    }
    let hi = centres.partition_point(|&c| c <= pos);
    let lo = hi - 1;
    let t = (pos - centres[lo]) / (centres[hi] - centres[lo]);
    (lo, hi, t)
}

/// Equalizing map of one tile: for every input level, the clipped cumulative
/// frequency in `[0, 1]`.
fn tile_mapping(img: &GreyImage, x0: usize, y0: usize, tw: usize, th: usize, clip: f64) -> Vec<f64> {
    let bins = img.levels();
    let mut hist = vec![0.0f64; bins];
    for y in y0..y0 + th {
        for x in x0..x0 + tw {
            hist[img.get(x, y) as usize] += 1.0;
        }
    }
    let npix = (tw * th) as f64;
    let limit = (clip * npix).max(npix / bins as f64);
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let spread = excess / bins as f64;
    let mut acc = 0.0;
    hist.iter()
        .map(|h| {
            acc += h + spread;
            (acc / npix).min(1.0)
        })
        .collect()
}

/// CLAHE-equalizes `img` and quantizes the result to `levels` grey levels.
pub fn clahe_quantize(img: &GreyImage, levels: usize, params: ClaheParams) -> Result<GreyImage> {
    if levels < 2 || levels > 256 {
        return Err(Error::InvalidArgument(format!("levels must be in 2..=256, got {levels}")));
    }
    if params.tile == 0 || !(params.clip >= 0.0) {
        return Err(Error::InvalidArgument("CLAHE tile must be positive and clip non-negative".into()));
    }
    let (w, h) = (img.width(), img.height());
    let tw = params.tile.min(w);
    let th = params.tile.min(h);
    let xs = tile_starts(w, params.tile);
    let ys = tile_starts(h, params.tile);
    let cx: Vec<f64> = xs.iter().map(|&x| x as f64 + (tw as f64 - 1.0) / 2.0).collect();
    let cy: Vec<f64> = ys.iter().map(|&y| y as f64 + (th as f64 - 1.0) / 2.0).collect();

    let maps: Vec<Vec<Vec<f64>>> = ys
        .iter()
        .map(|&y0| {
            xs.iter()
                .map(|&x0| tile_mapping(img, x0, y0, tw, th, params.clip))
                .collect()
        })
        .collect();

    let col_weights: Vec<_> = (0..w).map(|x| blend_weights(&cx, x as f64)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (ylo, yhi, ty) = blend_weights(&cy, y as f64);
        for (x, &(xlo, xhi, tx)) in col_weights.iter().enumerate() {
            let v = img.get(x, y) as usize;
            let top = maps[ylo][xlo][v] * (1.0 - tx) + maps[ylo][xhi][v] * tx;
            let bottom = maps[yhi][xlo][v] * (1.0 - tx) + maps[yhi][xhi][v] * tx;
            let blended = top * (1.0 - ty) + bottom * ty;
            out.push(quantize_unit(blended, levels));
        }
    }
    GreyImage::from_pixels(w, h, levels, out)
}

#[inline]
pub(crate) fn quantize_unit(y: f64, levels: usize) -> u8 {
    ((y * levels as f64).floor().max(0.0) as usize).min(levels - 1) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook CLAHE written pixel by pixel: every output pixel recounts the
    /// histograms of its (up to) four surrounding tiles from scratch.
    fn reference_clahe(img: &GreyImage, levels: usize, tile: usize, clip: f64) -> Vec<u8> {
        let (w, h) = (img.width(), img.height());
        let bins = img.levels();
        let nx = w.div_ceil(tile);
        let ny = h.div_ceil(tile);
        let start = |i: usize, len: usize| (i * tile).min(len - tile);
        let centre = |i: usize, len: usize| start(i, len) as f64 + (tile as f64 - 1.0) / 2.0;
        let map = |tx: usize, ty: usize, v: usize| -> f64 {
            let (x0, y0) = (start(tx, w), start(ty, h));
            let mut counts = vec![0.0; bins];
            for yy in y0..y0 + tile {
                for xx in x0..x0 + tile {
                    counts[img.get(xx, yy) as usize] += 1.0;
                }
            }
            let n = (tile * tile) as f64;
            let limit = f64::max(clip * n, n / bins as f64);
            let excess: f64 = counts.iter().map(|&c| f64::max(c - limit, 0.0)).sum();
            let cdf: f64 = counts[..=v]
                .iter()
                .map(|&c| f64::min(c, limit) + excess / bins as f64)
                .sum();
            f64::min(cdf / n, 1.0)
        };
        let locate = |pos: f64, count: usize, len: usize| -> (usize, usize, f64) {
            if pos <= centre(0, len) {
                return (0, 0, 0.0);
            }
            if pos >= centre(count - 1, len) {
                return (count - 1, count - 1, 0.0);
            }
            let mut i = 0;
            while centre(i + 1, len) <= pos {
                i += 1;
            }
            let t = (pos - centre(i, len)) / (centre(i + 1, len) - centre(i, len));
            (i, i + 1, t)
        };
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = img.get(x, y) as usize;
                let (x0, x1, tx) = locate(x as f64, nx, w);
                let (y0, y1, ty) = locate(y as f64, ny, h);
                let val = (1.0 - ty) * ((1.0 - tx) * map(x0, y0, v) + tx * map(x1, y0, v))
                    + ty * ((1.0 - tx) * map(x0, y1, v) + tx * map(x1, y1, v));
                out.push(((val * levels as f64).floor() as usize).min(levels - 1) as u8);
            }
        }
        out
    }

    #[test]
    fn ramp_matches_reference() {
        let pixels: Vec<u8> = (0..64 * 64).map(|i| ((i % 64) * 4 + (i / 64) / 16) as u8).collect();
        let img = GreyImage::from_pixels(64, 64, 256, pixels).unwrap();
        let out = clahe_quantize(&img, 8, ClaheParams::default()).unwrap();
        assert_eq!(out.pixels(), reference_clahe(&img, 8, 16, 0.03).as_slice());
        // A ramp spreads over every output level.
        let hist = out.level_histogram();
        assert!(hist.iter().all(|&f| f > 0.0));
    }

    #[test]
    fn non_multiple_size_matches_reference() {
        let pixels: Vec<u8> = (0..37 * 29).map(|i| ((i * 7919) % 251) as u8).collect();
        let img = GreyImage::from_pixels(37, 29, 256, pixels).unwrap();
        let out = clahe_quantize(&img, 16, ClaheParams { tile: 10, clip: 0.05 }).unwrap();
        assert_eq!(out.pixels(), reference_clahe(&img, 16, 10, 0.05).as_slice());
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = GreyImage::filled(48, 40, 256, 93).unwrap();
        let out = clahe_quantize(&img, 8, ClaheParams::default()).unwrap();
        let first = out.pixels()[0];
        assert!(out.pixels().iter().all(|&v| v == first));
    }

    #[test]
    fn rejects_single_level() {
        let img = GreyImage::filled(8, 8, 256, 0).unwrap();
        assert!(clahe_quantize(&img, 1, ClaheParams::default()).is_err());
    }

    proptest! {
        #[test]
        fn output_in_range_and_reapplication_stays_in_range(
            w in 5usize..40, h in 5usize..40, q in 2usize..17, seed in any::<u64>()
        ) {
            let pixels: Vec<u8> = (0..w * h)
                .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 56) as u8)
                .collect();
            let img = GreyImage::from_pixels(w, h, 256, pixels).unwrap();
            let out = clahe_quantize(&img, q, ClaheParams::default()).unwrap();
            prop_assert!(out.pixels().iter().all(|&v| (v as usize) < q));
            let again = clahe_quantize(&out.rescaled_to_8bit(), q, ClaheParams::default()).unwrap();
            prop_assert!(again.pixels().iter().all(|&v| (v as usize) < q));
        }
    }
}
