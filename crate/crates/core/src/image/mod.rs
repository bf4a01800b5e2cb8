//! Grey-level lattices and everything that produces them: file I/O, CLAHE
//! quantization, resampling and training-piece extraction.

mod clahe;
mod pieces;

use std::path::Path;

use ::image::{ExtendedColorType, ImageReader};
use rand::Rng;

use crate::error::{Error, Result};

pub use self::clahe::{clahe_quantize, ClaheParams};
pub use self::pieces::{piece_origins, split_pieces, PieceSet};

/// A rectangular lattice of quantized grey levels, row-major.
///
/// Every pixel is strictly below `levels`. At most 256 levels are supported.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GreyImage {
    width: usize,
    height: usize,
    levels: usize,
    pixels: Vec<u8>,
}

impl GreyImage {
    /// All-zero image.
    pub fn new(width: usize, height: usize, levels: usize) -> Result<Self> {
        Self::from_pixels(width, height, levels, vec![0; width * height])
    }

    pub fn from_pixels(width: usize, height: usize, levels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if !(2..=256).contains(&levels) {
            return Err(Error::InvalidArgument(format!(
                "grey levels must be in 2..=256, got {levels}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                got: pixels.len(),
            });
        }
        if let Some(&v) = pixels.iter().find(|&&v| v as usize >= levels) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} out of range for {levels} levels"
            )));
        }
        Ok(Self {
            width,
            height,
            levels,
            pixels,
        })
    }

    /// Constant image filled with `value`.
    pub fn filled(width: usize, height: usize, levels: usize, value: u8) -> Result<Self> {
        Self::from_pixels(width, height, levels, vec![value; width * height])
    }

    /// Independent uniform grey levels.
    pub fn noise<R: Rng + ?Sized>(width: usize, height: usize, levels: usize, rng: &mut R) -> Result<Self> {
        let pixels = (0..width * height)
            .map(|_| rng.random_range(0..levels) as u8)
            .collect();
        Self::from_pixels(width, height, levels, pixels)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn levels(&self) -> usize {
        self.levels
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Panics if `value` is not below the level count.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        assert!((value as usize) < self.levels, "grey level {value} out of range");
        self.pixels[y * self.width + x] = value;
    }

    /// Raw write used by the samplers, which only ever draw levels in range.
    #[inline]
    pub(crate) fn set_index_unchecked(&mut self, index: usize, value: u8) {
        debug_assert!((value as usize) < self.levels);
        self.pixels[index] = value;
    }

    /// Copy of the `w`x`h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<GreyImage> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[start..start + w]);
        }
        GreyImage::from_pixels(w, h, self.levels, pixels)
    }

    /// Writes `patch` into this image with its top-left corner at `(x, y)`.
    pub fn paste(&mut self, patch: &GreyImage, x: usize, y: usize) -> Result<()> {
        if patch.levels != self.levels {
            return Err(Error::InvalidArgument("pasted patch has different levels".into()));
        }
        if x + patch.width > self.width || y + patch.height > self.height {
            return Err(Error::InvalidArgument("pasted patch does not fit".into()));
        }
        for row in 0..patch.height {
            let dst = (y + row) * self.width + x;
            let src = row * patch.width;
            self.pixels[dst..dst + patch.width].copy_from_slice(&patch.pixels[src..src + patch.width]);
        }
        Ok(())
    }

    /// Uniform requantization: level `v` of `self.levels` maps to
    /// `floor(v * levels / self.levels)`.
    pub fn requantize(&self, levels: usize) -> Result<GreyImage> {
        let from = self.levels;
        let pixels = self
            .pixels
            .iter()
            .map(|&v| (v as usize * levels / from) as u8)
            .collect();
        GreyImage::from_pixels(self.width, self.height, levels, pixels)
    }

    /// Expands levels to the 8-bit range with `round(q * 255 / (Q - 1))`.
    pub fn rescaled_to_8bit(&self) -> GreyImage {
        let pixels = self.pixels.iter().map(|&q| rescale_level(q, self.levels)).collect();
        GreyImage {
            width: self.width,
            height: self.height,
            levels: 256,
            pixels,
        }
    }

    /// Bilinear resampling by `scale` (e.g. 0.5 or 0.75), keeping the level
    /// count. Sample positions use pixel-centre alignment.
    pub fn resize_bilinear(&self, scale: f64) -> Result<GreyImage> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad scale {scale}")));
        }
        let w = ((self.width as f64 * scale).round() as usize).max(1);
        let h = ((self.height as f64 * scale).round() as usize).max(1);
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        let max_level = (self.levels - 1) as f64;
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let top = self.get(x0, y0) as f64 * (1.0 - tx) + self.get(x1, y0) as f64 * tx;
                let bottom = self.get(x0, y1) as f64 * (1.0 - tx) + self.get(x1, y1) as f64 * tx;
                let v = top * (1.0 - ty) + bottom * ty;
                pixels.push(v.round().clamp(0.0, max_level) as u8);
            }
        }
        GreyImage::from_pixels(w, h, self.levels, pixels)
    }

    /// Normalized grey-level histogram.
    pub fn level_histogram(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.levels];
        for &v in &self.pixels {
            counts[v as usize] += 1;
        }
        let n = self.pixels.len() as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

/// `round(q * 255 / (levels - 1))`.
pub fn rescale_level(q: u8, levels: usize) -> u8 {
    let num = q as usize * 255;
    let den = levels - 1;
    ((2 * num + den) / (2 * den)) as u8
}

/// Loads an 8-bit greyscale PGM or PNG (or any other greyscale format the
/// decoder understands). The result has 256 levels.
pub fn load_image(path: impl AsRef<Path>) -> Result<GreyImage> {
    let path = path.as_ref();
    let unreadable = |reason: String| Error::Unreadable {
        path: path.to_path_buf(),
        reason,
    };
    let reader = ImageReader::open(path)
        .map_err(|e| unreadable(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| unreadable(e.to_string()))?;
    let decoded = reader.decode().map_err(|e| unreadable(e.to_string()))?;
    match decoded {
        ::image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            GreyImage::from_pixels(w as usize, h as usize, 256, buf.into_raw())
        }
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit greyscale, found {:?}", other.color()),
        }),
    }
}

/// Writes an image as 8-bit greyscale; the format follows the file extension
/// (`.pgm` is written as binary P5).
///
/// With `rescale` set, level `q` is written as `round(q * 255 / (Q - 1))`,
/// otherwise the raw level is written.
pub fn save_image(img: &GreyImage, path: impl AsRef<Path>, rescale: bool) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = if rescale {
        img.rescaled_to_8bit().into_pixels()
    } else {
        img.pixels.clone()
    };
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
        out.extend_from_slice(&bytes);
        return std::fs::write(path, out).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        });
    }
    ::image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        ExtendedColorType::L8,
    )
    .map_err(|e| Error::Write {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}
