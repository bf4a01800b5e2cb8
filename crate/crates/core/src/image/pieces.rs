use crate::error::{Error, Result};
use crate::image::GreyImage;

/// Overlapping square training pieces cut from one parent image.
#[derive(Clone, Debug)]
pub struct PieceSet {
    pub pieces: Vec<GreyImage>,
    /// Top-left `(x, y)` of each piece in the parent.
    pub origins: Vec<(usize, usize)>,
}

impl PieceSet {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// Piece start positions along one axis: multiples of the stride, plus one
/// final piece flush with the edge when the stride grid falls short of it.
pub fn piece_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&p| p + size <= len)
        .collect();
    if let Some(&last) = out.last() {
        if last + size < len {
            out.push(len - size);
        }
    }
    out
}

/// Splits `img` into `size` x `size` pieces overlapping by `overlap` pixels.
pub fn split_pieces(img: &GreyImage, size: usize, overlap: usize) -> Result<PieceSet> {
    if size == 0 || overlap >= size {
        return Err(Error::InvalidArgument(format!(
            "piece size {size} must exceed overlap {overlap}"
        )));
    }
    if img.width() < size || img.height() < size {
        return Err(Error::TooSmall {
            width: img.width(),
            height: img.height(),
            need_w: size,
            need_h: size,
        });
    }
    let stride = size - overlap;
    let xs = piece_origins(img.width(), size, stride);
    let ys = piece_origins(img.height(), size, stride);
    let mut pieces = Vec::with_capacity(xs.len() * ys.len());
    let mut origins = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            pieces.push(img.crop(x, y, size, size)?);
            origins.push((x, y));
        }
    }
    Ok(PieceSet { pieces, origins })
}
