//! Feature functions over clique families and their histograms.
//!
//! A clique family is every translate of an [`OffsetList`] that lies fully
//! inside the lattice. A [`FeatureKind`] maps the grey levels of one clique
//! (in offset order) to a bin; the normalized count of each bin over the
//! family is the feature's histogram, the sufficient statistic of the
//! matching potential.

mod candidates;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::filterbank::FilterFeature;
use crate::image::GreyImage;

pub use self::candidates::{
    bp3_symmetric_candidates, combined_bp5_candidates, conjoin_bp9, conjoin_from_scores,
    enumerate_jagstar_candidates, gld_candidates, jag_star_offsets, JAGSTAR_MAX_RADIUS,
    JAGSTAR_PHASE_STEPS,
};

/// Default largest Euclidean distance between two pixels of a clique.
pub const DEFAULT_MAX_RADIUS: f64 = 40.0;

/// A 2-D displacement on the lattice; `dx` grows rightwards, `dy` downwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Offset {
    pub dx: i32,
    pub dy: i32,
}

impl Offset {
    pub const ORIGIN: Offset = Offset { dx: 0, dy: 0 };

    pub const fn new(dx: i32, dy: i32) -> Self {
        Self { dx, dy }
    }

    pub fn neg(self) -> Self {
        Self::new(-self.dx, -self.dy)
    }

    /// Componentwise halving, rounding toward zero.
    pub fn halved(self) -> Self {
        Self::new(self.dx / 2, self.dy / 2)
    }

    pub fn norm_sq(self) -> i64 {
        let (x, y) = (self.dx as i64, self.dy as i64);
        x * x + y * y
    }

    pub fn chebyshev(self) -> i32 {
        self.dx.abs().max(self.dy.abs())
    }

    /// True for the representative of `{r, -r}` in the upper half plane
    /// (`dy > 0`, or `dy == 0` and `dx > 0`).
    pub fn is_canonical(self) -> bool {
        self.dy > 0 || (self.dy == 0 && self.dx > 0)
    }

    pub fn canonical(self) -> Self {
        if self.is_canonical() {
            self
        } else {
            self.neg()
        }
    }
}

impl fmt::Display for Offset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.dx, self.dy)
    }
}

impl FromStr for Offset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once(',')
            .ok_or_else(|| format!("offset `{s}` is not of the form dx,dy"))?;
        let dx = a.trim().parse().map_err(|_| format!("bad dx in `{s}`"))?;
        let dy = b.trim().parse().map_err(|_| format!("bad dy in `{s}`"))?;
        Ok(Offset::new(dx, dy))
    }
}

/// Clique shape: offsets of the `d` member pixels relative to the first,
/// which is always `(0, 0)`. Repeated offsets are allowed.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OffsetList(Vec<Offset>);

/// Inclusive range of anchor positions whose clique lies inside a lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorRange {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl AnchorRange {
    pub fn count(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    #[inline]
    pub fn contains(&self, x: isize, y: isize) -> bool {
        x >= self.x0 as isize && x <= self.x1 as isize && y >= self.y0 as isize && y <= self.y1 as isize
    }
}

impl OffsetList {
    pub fn new(offsets: Vec<Offset>) -> Result<Self> {
        match offsets.first() {
            Some(&Offset::ORIGIN) => Ok(Self(offsets)),
            Some(other) => Err(Error::InvalidArgument(format!(
                "first clique offset must be (0,0), got ({other})"
            ))),
            None => Err(Error::InvalidArgument("empty offset list".into())),
        }
    }

    /// `(0,0)` followed by `rest`.
    pub fn anchored(rest: impl IntoIterator<Item = Offset>) -> Self {
        let mut v = vec![Offset::ORIGIN];
        v.extend(rest);
        Self(v)
    }

    pub fn single() -> Self {
        Self(vec![Offset::ORIGIN])
    }

    pub fn pair(dx: i32, dy: i32) -> Self {
        Self::anchored([Offset::new(dx, dy)])
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[Offset] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Offset> {
        self.0.iter()
    }

    /// `(min_dx, max_dx, min_dy, max_dy)`.
    pub fn bounds(&self) -> (i32, i32, i32, i32) {
        self.0.iter().fold((0, 0, 0, 0), |(a, b, c, d), o| {
            (a.min(o.dx), b.max(o.dx), c.min(o.dy), d.max(o.dy))
        })
    }

    /// Largest Chebyshev distance of any member from the anchor.
    pub fn extent(&self) -> i32 {
        self.0.iter().map(|o| o.chebyshev()).max().unwrap_or(0)
    }

    /// Largest Euclidean distance between any two members.
    pub fn diameter(&self) -> f64 {
        let mut best = 0i64;
        for a in &self.0 {
            for b in &self.0 {
                best = best.max(Offset::new(a.dx - b.dx, a.dy - b.dy).norm_sq());
            }
        }
        (best as f64).sqrt()
    }

    /// Anchors of cliques fully inside a `width` x `height` lattice.
    pub fn anchors(&self, width: usize, height: usize) -> Option<AnchorRange> {
        let (min_dx, max_dx, min_dy, max_dy) = self.bounds();
        let x0 = -(min_dx as i64);
        let x1 = width as i64 - 1 - max_dx as i64;
        let y0 = -(min_dy as i64);
        let y1 = height as i64 - 1 - max_dy as i64;
        (x0 <= x1 && y0 <= y1).then(|| AnchorRange {
            x0: x0 as usize,
            x1: x1 as usize,
            y0: y0 as usize,
            y1: y1 as usize,
        })
    }

    /// Number of cliques fully inside the lattice.
    pub fn clique_count(&self, width: usize, height: usize) -> usize {
        self.anchors(width, height).map_or(0, |a| a.count())
    }

    /// Order-independent identity of the shape (sorted members), used to
    /// recognise clique families that differ only by member order.
    pub fn shape_key(&self) -> Vec<Offset> {
        let mut v = self.0.clone();
        v.sort();
        v
    }

    /// Linear index displacement of each member in a row-major lattice.
    pub(crate) fn index_deltas(&self, width: usize) -> Vec<isize> {
        self.0
            .iter()
            .map(|o| o.dy as isize * width as isize + o.dx as isize)
            .collect()
    }
}

impl fmt::Display for OffsetList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, o) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{o}")?;
        }
        Ok(())
    }
}

impl FromStr for OffsetList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let offsets = s
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<Vec<Offset>, _>>()?;
        OffsetList::new(offsets).map_err(|e| e.to_string())
    }
}

/// Number of bins of every filter-response feature: 16 equal-width bins over
/// the training response range plus one underflow and one overflow bin.
pub const FILTER_BINS: usize = 18;

/// Feature function applied to the grey levels of one clique.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    /// Grey level of the single member.
    Marginal,
    /// Grey-level co-occurrence: `sum x_i Q^i`.
    Glc,
    /// Grey-level difference of a pair: `x_1 - x_0 + Q - 1`.
    Gld,
    /// Binary pattern: bit `i-1` set when `x_0 < x_i`.
    Bp,
    /// Binary equality: bit `i-1` set when `|x_0 - x_i| <= threshold`.
    Be { threshold: u8 },
    /// Quantized response of a linear filter whose taps follow the offsets.
    Filter(FilterFeature),
}

impl FeatureKind {
    /// Bin count `s` for a clique of `arity` pixels over `levels` grey levels.
    pub fn bins(&self, levels: usize, arity: usize) -> usize {
        match self {
            FeatureKind::Marginal => levels,
            FeatureKind::Glc => levels.pow(arity as u32),
            FeatureKind::Gld => 2 * levels - 1,
            FeatureKind::Bp | FeatureKind::Be { .. } => 1 << (arity - 1),
            FeatureKind::Filter(_) => FILTER_BINS,
        }
    }

    /// Checks that this kind can be paired with an offset list of `arity`.
    pub fn validate(&self, levels: usize, arity: usize) -> Result<()> {
        let ok = match self {
            FeatureKind::Marginal => arity == 1,
            FeatureKind::Gld => arity == 2,
            FeatureKind::Glc => arity >= 1 && (levels as f64).powi(arity as i32) <= (1u64 << 24) as f64,
            FeatureKind::Bp | FeatureKind::Be { .. } => (2..=17).contains(&arity),
            FeatureKind::Filter(f) => f.taps().len() == arity,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "feature {} cannot use a clique of {arity} pixels at {levels} levels",
                self.tag()
            )))
        }
    }

    /// Short family name.
    pub fn tag(&self) -> &'static str {
        match self {
            FeatureKind::Marginal => "marginal",
            FeatureKind::Glc => "glc",
            FeatureKind::Gld => "gld",
            FeatureKind::Bp => "bp",
            FeatureKind::Be { .. } => "be",
            FeatureKind::Filter(_) => "filter",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKind::Be { threshold } => write!(f, "be:{threshold}"),
            FeatureKind::Filter(filter) => write!(f, "filter:{filter}"),
            other => f.write_str(other.tag()),
        }
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (head, rest) = match s.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (s, None),
        };
        match (head, rest) {
            ("marginal", None) => Ok(FeatureKind::Marginal),
            ("glc", None) => Ok(FeatureKind::Glc),
            ("gld", None) => Ok(FeatureKind::Gld),
            ("bp", None) => Ok(FeatureKind::Bp),
            ("be", Some(c)) => c
                .parse()
                .map(|threshold| FeatureKind::Be { threshold })
                .map_err(|_| format!("bad equality threshold `{c}`")),
            ("filter", Some(spec)) => spec.parse().map(FeatureKind::Filter),
            _ => Err(format!("unknown feature tag `{s}`")),
        }
    }
}

/// Maps the grey levels of one clique (in offset order) to its bin.
#[inline]
pub fn eval_feature(kind: &FeatureKind, levels: usize, values: &[u8]) -> usize {
    match kind {
        FeatureKind::Marginal => values[0] as usize,
        FeatureKind::Glc => values
            .iter()
            .rev()
            .fold(0usize, |acc, &v| acc * levels + v as usize),
        FeatureKind::Gld => values[1] as usize + levels - 1 - values[0] as usize,
        FeatureKind::Bp => {
            let x0 = values[0];
            values[1..]
                .iter()
                .enumerate()
                .fold(0, |acc, (i, &v)| acc | (((x0 < v) as usize) << i))
        }
        FeatureKind::Be { threshold } => {
            let x0 = values[0];
            values[1..]
                .iter()
                .enumerate()
                .fold(0, |acc, (i, &v)| acc | (((x0.abs_diff(v) <= *threshold) as usize) << i))
        }
        FeatureKind::Filter(filter) => filter.bin(filter.response(values)),
    }
}

/// Normalized histogram of one feature over one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramStats {
    /// Bin frequencies, summing to one.
    pub freq: Vec<f64>,
    /// Number of cliques fully inside the lattice.
    pub clique_count: usize,
}

impl HistogramStats {
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArgument("histogram has no cliques".into()));
        }
        let n = total as f64;
        Ok(Self {
            freq: counts.iter().map(|&c| c as f64 / n).collect(),
            clique_count: total as usize,
        })
    }

    pub fn bins(&self) -> usize {
        self.freq.len()
    }

    /// Frequencies after adding a pseudo-count `epsilon` to every bin.
    pub fn smoothed(&self, epsilon: f64) -> Vec<f64> {
        let n = self.clique_count as f64;
        let denom = n + epsilon * self.freq.len() as f64;
        self.freq.iter().map(|&f| (f * n + epsilon) / denom).collect()
    }
}

/// Elementwise mean of equally sized frequency vectors.
pub fn mean_frequencies<'a>(hists: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for h in hists {
        if acc.is_empty() {
            acc = vec![0.0; h.len()];
        }
        for (a, &v) in acc.iter_mut().zip(h) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Adds the bin of every clique fully inside `img` to `counts`.
pub(crate) fn accumulate_counts(
    kind: &FeatureKind,
    offsets: &OffsetList,
    img: &GreyImage,
    counts: &mut [u64],
) -> usize {
    let Some(range) = offsets.anchors(img.width(), img.height()) else {
        return 0;
    };
    let levels = img.levels();
    let width = img.width();
    let px = img.pixels();
    let deltas = offsets.index_deltas(width);
    let mut values = vec![0u8; deltas.len()];
    for y in range.y0..=range.y1 {
        let row = y * width;
        match kind {
            FeatureKind::Marginal => {
                for x in range.x0..=range.x1 {
                    counts[px[row + x] as usize] += 1;
                }
            }
            FeatureKind::Gld => {
                let d1 = deltas[1];
                for x in range.x0..=range.x1 {
                    let base = row + x;
                    let b = px[(base as isize + d1) as usize] as usize + levels - 1 - px[base] as usize;
                    counts[b] += 1;
                }
            }
            FeatureKind::Bp => {
                for x in range.x0..=range.x1 {
                    let base = (row + x) as isize;
                    let x0 = px[base as usize];
                    let mut code = 0usize;
                    for (i, &d) in deltas[1..].iter().enumerate() {
                        code |= ((x0 < px[(base + d) as usize]) as usize) << i;
                    }
                    counts[code] += 1;
                }
            }
            _ => {
                for x in range.x0..=range.x1 {
                    let base = (row + x) as isize;
                    for (v, &d) in values.iter_mut().zip(&deltas) {
                        *v = px[(base + d) as usize];
                    }
                    counts[eval_feature(kind, levels, &values)] += 1;
                }
            }
        }
    }
    range.count()
}

/// Histogram of `kind` over every clique of `offsets` fully inside `img`.
pub fn collect_histogram(kind: &FeatureKind, offsets: &OffsetList, img: &GreyImage) -> Result<HistogramStats> {
    kind.validate(img.levels(), offsets.arity())?;
    let mut counts = vec![0u64; kind.bins(img.levels(), offsets.arity())];
    if accumulate_counts(kind, offsets, img, &mut counts) == 0 {
        return Err(Error::NoCliques {
            width: img.width(),
            height: img.height(),
        });
    }
    HistogramStats::from_counts(&counts)
}
