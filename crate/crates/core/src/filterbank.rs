//! Linear filters as MGRF features: a fixed bank of Laplacian-of-Gaussian
//! and Gabor filters whose valid-region responses are binned into
//! [`FILTER_BINS`] bins.
//!
//! Bank composition (64 filters, every side odd and at most 17):
//!
//! - 4 Laplacians of Gaussian with sigma in {sqrt(2)/2, 1, 2, 3}, side
//!   `min(17, 2*ceil(3*sigma) + 1)`;
//! - 60 Gabor filters: wavelengths {2, 4, 6} x 10 orientations `pi*o/10`
//!   x {cosine, sine} phase, envelope `exp(-(4x'^2 + y'^2) / (2T^2))` with
//!   `T` the wavelength, side `2*round(4T/3) + 1` (7, 11 and 17).
//!
//! Coefficients are made zero-sum and scaled to unit L1 norm, then stored
//! as fixed-point integers with [`TAP_SCALE`] units per 1.0. Responses are
//! exact integers, so sampler updates over a filter footprint never drift.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{collect_histogram, FeatureKind, HistogramStats, Offset, OffsetList, FILTER_BINS};
use crate::image::GreyImage;

/// Fixed-point units per 1.0 of filter coefficient.
pub const TAP_SCALE: f64 = 65536.0;

pub const LOG_SCALES: [f64; 4] = [FRAC_1_SQRT_2, 1.0, 2.0, 3.0];
pub const GABOR_WAVELENGTHS: [u8; 3] = [2, 4, 6];
pub const GABOR_ORIENTATIONS: u8 = 10;
pub const MAX_FILTER_SIDE: usize = 17;

/// Interior response bins between the underflow and overflow bins.
const INTERIOR_BINS: i64 = FILTER_BINS as i64 - 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterId {
    /// Identity tap; not part of the bank.
    Delta,
    /// Laplacian of Gaussian at `LOG_SCALES[scale]`.
    LoG { scale: u8 },
    /// Gabor filter of the given wavelength at angle `pi * orientation / orientations`.
    Gabor {
        wavelength: u8,
        orientation: u8,
        orientations: u8,
        odd: bool,
    },
}

impl fmt::Display for FilterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            FilterId::Delta => f.write_str("delta"),
            FilterId::LoG { scale } => write!(f, "log-{scale}"),
            FilterId::Gabor {
                wavelength,
                orientation,
                orientations,
                odd,
            } => write!(
                f,
                "gabor-{wavelength}-{orientation}of{orientations}-{}",
                if odd { "sin" } else { "cos" }
            ),
        }
    }
}

impl FromStr for FilterId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("unknown filter id `{s}`");
        if s == "delta" {
            return Ok(FilterId::Delta);
        }
        if let Some(rest) = s.strip_prefix("log-") {
            let scale: u8 = rest.parse().map_err(|_| bad())?;
            if (scale as usize) < LOG_SCALES.len() {
                return Ok(FilterId::LoG { scale });
            }
            return Err(bad());
        }
        let rest = s.strip_prefix("gabor-").ok_or_else(bad)?;
        let mut parts = rest.split('-');
        let wavelength: u8 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let (o, n) = parts.next().and_then(|p| p.split_once("of")).ok_or_else(bad)?;
        let orientation: u8 = o.parse().map_err(|_| bad())?;
        let orientations: u8 = n.parse().map_err(|_| bad())?;
        let odd = match parts.next() {
            Some("sin") => true,
            Some("cos") => false,
            _ => return Err(bad()),
        };
        if parts.next().is_some() || wavelength == 0 || orientations == 0 || orientation >= orientations {
            return Err(bad());
        }
        Ok(FilterId::Gabor {
            wavelength,
            orientation,
            orientations,
            odd,
        })
    }
}

/// Square filter with real coefficients, row-major, centred on the middle tap.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFilter {
    pub id: FilterId,
    pub side: usize,
    pub coefficients: Vec<f64>,
}

fn gabor_side(wavelength: f64) -> usize {
    2 * (4.0 * wavelength / 3.0).round() as usize + 1
}

/// Raw Gabor coefficients at an arbitrary angle (before normalization).
pub fn gabor_coefficients(wavelength: f64, angle: f64, odd: bool) -> (usize, Vec<f64>) {
    let side = gabor_side(wavelength).min(MAX_FILTER_SIDE);
    let half = (side / 2) as i32;
    let (s, c) = angle.sin_cos();
    let mut coeffs = Vec::with_capacity(side * side);
    for y in -half..=half {
        for x in -half..=half {
            let (x, y) = (x as f64, y as f64);
            let xr = x * c + y * s;
            let yr = -x * s + y * c;
            let envelope = (-(4.0 * xr * xr + yr * yr) / (2.0 * wavelength * wavelength)).exp();
            let phase = 2.0 * PI * xr / wavelength;
            coeffs.push(envelope * if odd { phase.sin() } else { phase.cos() });
        }
    }
    (side, coeffs)
}

fn log_coefficients(sigma: f64) -> (usize, Vec<f64>) {
    let side = (2 * (3.0 * sigma).ceil() as usize + 1).min(MAX_FILTER_SIDE);
    let half = (side / 2) as i32;
    let s2 = sigma * sigma;
    let mut coeffs = Vec::with_capacity(side * side);
    for y in -half..=half {
        for x in -half..=half {
            let r2 = (x * x + y * y) as f64;
            coeffs.push((r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp());
        }
    }
    (side, coeffs)
}

/// Subtracts the mean and scales to unit L1 norm.
fn zero_sum_unit_l1(coeffs: &mut [f64]) {
    let mean = coeffs.iter().sum::<f64>() / coeffs.len() as f64;
    coeffs.iter_mut().for_each(|c| *c -= mean);
    let l1: f64 = coeffs.iter().map(|c| c.abs()).sum();
    if l1 > 0.0 {
        coeffs.iter_mut().for_each(|c| *c /= l1);
    }
}

impl LinearFilter {
    pub fn new(id: FilterId) -> Self {
        match id {
            FilterId::Delta => LinearFilter {
                id,
                side: 1,
                coefficients: vec![1.0],
            },
            FilterId::LoG { scale } => {
                let (side, mut coefficients) = log_coefficients(LOG_SCALES[scale as usize]);
                zero_sum_unit_l1(&mut coefficients);
                LinearFilter { id, side, coefficients }
            }
            FilterId::Gabor {
                wavelength,
                orientation,
                orientations,
                odd,
            } => {
                let angle = PI * orientation as f64 / orientations as f64;
                let (side, mut coefficients) = gabor_coefficients(wavelength as f64, angle, odd);
                zero_sum_unit_l1(&mut coefficients);
                LinearFilter { id, side, coefficients }
            }
        }
    }

    fn half(&self) -> i32 {
        (self.side / 2) as i32
    }

    fn is_zero_sum(&self) -> bool {
        !matches!(self.id, FilterId::Delta)
    }

    /// Footprint as a clique shape: the centre first, then the remaining
    /// taps in raster order; integer taps in the same order.
    pub fn taps(&self) -> (OffsetList, Vec<i64>) {
        let h = self.half();
        let centre = self.side * self.side / 2;
        let fixed = |c: f64| (c * TAP_SCALE).round() as i64;
        let mut offsets = Vec::with_capacity(self.coefficients.len());
        let mut taps = vec![fixed(self.coefficients[centre])];
        for (i, &c) in self.coefficients.iter().enumerate() {
            if i == centre {
                continue;
            }
            let (x, y) = ((i % self.side) as i32 - h, (i / self.side) as i32 - h);
            offsets.push(Offset::new(x, y));
            taps.push(fixed(c));
        }
        if self.is_zero_sum() {
            // Rounding may leave a residue; absorb it in the centre tap.
            let residue: i64 = taps.iter().sum();
            taps[0] -= residue;
        }
        (OffsetList::anchored(offsets), taps)
    }

    /// Valid-region (no padding) integer responses, row-major over the
    /// `(w - side + 1) x (h - side + 1)` anchors.
    pub fn responses(&self, img: &GreyImage) -> Result<(usize, usize, Vec<i64>)> {
        if img.width() < self.side || img.height() < self.side {
            return Err(Error::TooSmall {
                width: img.width(),
                height: img.height(),
                need_w: self.side,
                need_h: self.side,
            });
        }
        let (offsets, taps) = self.taps();
        let range = offsets.anchors(img.width(), img.height()).expect("size checked");
        let deltas = offsets.index_deltas(img.width());
        let px = img.pixels();
        let mut out = Vec::with_capacity(range.count());
        for y in range.y0..=range.y1 {
            for x in range.x0..=range.x1 {
                let base = (y * img.width() + x) as isize;
                let r: i64 = deltas
                    .iter()
                    .zip(&taps)
                    .map(|(&d, &t)| t * px[(base + d) as usize] as i64)
                    .sum();
                out.push(r);
            }
        }
        Ok((range.x1 - range.x0 + 1, range.y1 - range.y0 + 1, out))
    }
}

/// The 64-filter bank in fixed order: LoGs, then Gabors by wavelength,
/// orientation and phase (cosine before sine).
pub fn build_filter_bank() -> Vec<LinearFilter> {
    let mut bank: Vec<LinearFilter> = (0..LOG_SCALES.len() as u8)
        .map(|scale| LinearFilter::new(FilterId::LoG { scale }))
        .collect();
    for &wavelength in &GABOR_WAVELENGTHS {
        for orientation in 0..GABOR_ORIENTATIONS {
            for odd in [false, true] {
                bank.push(LinearFilter::new(FilterId::Gabor {
                    wavelength,
                    orientation,
                    orientations: GABOR_ORIENTATIONS,
                    odd,
                }));
            }
        }
    }
    bank
}

/// Human-readable bank listing, one filter per line.
pub fn describe_bank(bank: &[LinearFilter]) -> String {
    let mut out = String::new();
    for (i, f) in bank.iter().enumerate() {
        let detail = match f.id {
            FilterId::LoG { scale } => format!("sigma={:.4}", LOG_SCALES[scale as usize]),
            FilterId::Gabor {
                wavelength,
                orientation,
                orientations,
                odd,
            } => format!(
                "wavelength={wavelength} angle={:.1}deg phase={}",
                180.0 * orientation as f64 / orientations as f64,
                if odd { "sine" } else { "cosine" }
            ),
            FilterId::Delta => "identity".to_string(),
        };
        out.push_str(&format!("{i:2} {:<18} {}x{} {detail}\n", f.id.to_string(), f.side, f.side));
    }
    out
}

/// A filter paired with its response quantizer: responses in `[lo, hi]`
/// (fixed-point units) fall into 16 equal-width interior bins, anything
/// below into bin 0 and above into the last bin.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FilterFeature {
    id: FilterId,
    taps: Vec<i64>,
    lo: i64,
    hi: i64,
}

impl FilterFeature {
    pub fn new(id: FilterId, lo: i64, hi: i64) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("filter range [{lo}, {hi}] is empty")));
        }
        let (_, taps) = LinearFilter::new(id).taps();
        Ok(Self { id, taps, lo, hi })
    }

    /// Quantizer spanning the filter's response range on `training`.
    pub fn fit(filter: &LinearFilter, training: &GreyImage) -> Result<Self> {
        let (_, _, responses) = filter.responses(training)?;
        let lo = *responses.iter().min().expect("at least one anchor");
        let hi = *responses.iter().max().expect("at least one anchor");
        Self::new(filter.id, lo, hi)
    }

    pub fn id(&self) -> FilterId {
        self.id
    }

    pub fn taps(&self) -> &[i64] {
        &self.taps
    }

    pub fn range(&self) -> (i64, i64) {
        (self.lo, self.hi)
    }

    /// Clique shape matching [`Self::taps`].
    pub fn offsets(&self) -> OffsetList {
        LinearFilter::new(self.id).taps().0
    }

    #[inline]
    pub fn response(&self, values: &[u8]) -> i64 {
        self.taps.iter().zip(values).map(|(&t, &v)| t * v as i64).sum()
    }

    #[inline]
    pub fn bin(&self, response: i64) -> usize {
        if response < self.lo {
            0
        } else if response > self.hi {
            FILTER_BINS - 1
        } else {
            1 + ((response - self.lo) * INTERIOR_BINS / (self.hi - self.lo + 1)) as usize
        }
    }

    pub fn kind(&self) -> FeatureKind {
        FeatureKind::Filter(self.clone())
    }
}

impl fmt::Display for FilterFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.id, self.lo, self.hi)
    }
}

impl FromStr for FilterFeature {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut parts = s.split(':');
        let (Some(id), Some(lo), Some(hi), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(format!("filter feature `{s}` is not id:lo:hi"));
        };
        let id: FilterId = id.parse()?;
        let lo = lo.parse().map_err(|_| format!("bad filter range in `{s}`"))?;
        let hi = hi.parse().map_err(|_| format!("bad filter range in `{s}`"))?;
        FilterFeature::new(id, lo, hi).map_err(|e| e.to_string())
    }
}

/// Binned valid-region response histogram of `feature` on `img`.
pub fn filter_response_histogram(feature: &FilterFeature, img: &GreyImage) -> Result<HistogramStats> {
    let offsets = feature.offsets();
    if offsets.anchors(img.width(), img.height()).is_none() {
        let side = (2 * offsets.extent() + 1) as usize;
        return Err(Error::TooSmall {
            width: img.width(),
            height: img.height(),
            need_w: side,
            need_h: side,
        });
    }
    collect_histogram(&feature.kind(), &offsets, img)
}
