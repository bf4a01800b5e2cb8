//! Greedy model nesting: candidate scoring by Jensen-Shannon divergence,
//! windowed selection objectives, second-order initialization of new
//! parameters and the driver that grows a model selector by selector.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{
    bp3_symmetric_candidates, combined_bp5_candidates, conjoin_bp9, enumerate_jagstar_candidates, gld_candidates,
};
use crate::features::{collect_histogram, eval_feature, mean_frequencies, FeatureKind, HistogramStats, Offset, OffsetList};
use crate::filterbank::{build_filter_bank, FilterFeature};
use crate::image::{split_pieces, GreyImage};
use crate::model::{dot, NestedModel, Potential};
use crate::sampling::{csa_run, Sampler, SamplerConfig, StepRule, StepState};

/// Jensen-Shannon divergence in bits; `0 * log 0` counts as 0.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut d = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        let ka = if a > 0.0 { a * (a / m).log2() } else { 0.0 };
        let kb = if b > 0.0 { b * (b / m).log2() } else { 0.0 };
        // ka + kb is exactly commutative, which keeps jsd(p, q) == jsd(q, p).
        d += 0.5 * (ka + kb);
    }
    Ok(d.clamp(0.0, 1.0))
}

/// How per-piece disagreements are combined into one candidate score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SelectionMode {
    /// Whole training image.
    Plain,
    /// Smallest disagreement over training pieces.
    MaxMin,
    /// Pieces weighted by `exp(alpha * E_i)`, `E_i` the current model's
    /// per-clique energy of piece `i`, so badly modelled pieces dominate.
    SoftMin { alpha: f64 },
}

pub const DEFAULT_SOFTMIN_ALPHA: f64 = 10.0;

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionMode::Plain => f.write_str("plain"),
            SelectionMode::MaxMin => f.write_str("max-min"),
            SelectionMode::SoftMin { alpha } => write!(f, "soft-min:{alpha}"),
        }
    }
}

impl FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(SelectionMode::Plain),
            "max-min" | "maxmin" => Ok(SelectionMode::MaxMin),
            "soft-min" | "softmin" => Ok(SelectionMode::SoftMin {
                alpha: DEFAULT_SOFTMIN_ALPHA,
            }),
            _ => {
                let alpha = s
                    .strip_prefix("soft-min:")
                    .and_then(|a| a.parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown selection mode `{s}`"))?;
                if alpha > 0.0 && alpha.is_finite() {
                    Ok(SelectionMode::SoftMin { alpha })
                } else {
                    Err(format!("soft-min alpha must be positive, got {alpha}"))
                }
            }
        }
    }
}

/// Training-side histograms of one candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingStats {
    pub full: Vec<f64>,
    pub pieces: Vec<Vec<f64>>,
}

/// Disagreement between the averaged sample histogram and the training
/// data under `mode`. `piece_energies` is only read in soft-min mode.
pub fn score_feature(
    training: &TrainingStats,
    sample: &[f64],
    mode: SelectionMode,
    piece_energies: &[f64],
) -> Result<f64> {
    if training.pieces.is_empty() || mode == SelectionMode::Plain {
        return jsd(sample, &training.full);
    }
    let scores = training
        .pieces
        .iter()
        .map(|h| jsd(sample, h))
        .collect::<Result<Vec<_>>>()?;
    match mode {
        SelectionMode::Plain => unreachable!(),
        SelectionMode::MaxMin => Ok(scores.iter().copied().fold(f64::INFINITY, f64::min)),
        SelectionMode::SoftMin { alpha } => {
            if piece_energies.len() != scores.len() {
                return Err(Error::LengthMismatch {
                    expected: scores.len(),
                    got: piece_energies.len(),
                });
            }
            let top = piece_energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = piece_energies.iter().map(|&e| (alpha * (e - top)).exp()).collect();
            let z: f64 = w.iter().sum();
            Ok(w.iter().zip(&scores).map(|(w, s)| w * s).sum::<f64>() / z)
        }
    }
}

/// Log-likelihood gradient per normalized histogram: `-h_obs + h_samples`,
/// potentials concatenated in order.
pub fn gradient(obs: &[Vec<f64>], samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    if obs.len() != samples.len() {
        return Err(Error::LengthMismatch {
            expected: obs.len(),
            got: samples.len(),
        });
    }
    let mut g = Vec::new();
    for (o, s) in obs.iter().zip(samples) {
        if o.len() != s.len() {
            return Err(Error::LengthMismatch {
                expected: o.len(),
                got: s.len(),
            });
        }
        g.extend(o.iter().zip(s).map(|(o, s)| s - o));
    }
    Ok(g)
}

/// Lower bound applied to variance estimates in [`second_order_step`].
pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Largest change of any single parameter in one second-order step.
pub const MAX_STEP: f64 = 5.0;

/// Step length maximizing the quadratic model of the log-likelihood along
/// `grad`: `(g.g) / (g^T diag(var) g)`. `None` for a zero gradient.
pub fn step_length(grad: &[f64], var: &[f64]) -> Option<f64> {
    let gg = dot(grad, grad);
    if gg == 0.0 {
        return None;
    }
    let curv: f64 = grad
        .iter()
        .zip(var)
        .map(|(g, v)| g * g * v.max(VARIANCE_FLOOR))
        .sum();
    Some(gg / curv)
}

/// One Newton-like ascent step `theta + s * grad` along the gradient, with
/// the whole increment scaled down if any component exceeds [`MAX_STEP`].
pub fn second_order_step(theta: &[f64], grad: &[f64], var: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != grad.len() || grad.len() != var.len() {
        return Err(Error::LengthMismatch {
            expected: theta.len(),
            got: grad.len().min(var.len()),
        });
    }
    let Some(s) = step_length(grad, var) else {
        return Ok(theta.to_vec());
    };
    let largest = grad.iter().map(|g| (s * g).abs()).fold(0.0, f64::max);
    let scale = if largest > MAX_STEP { MAX_STEP / largest } else { 1.0 };
    Ok(theta.iter().zip(grad).map(|(t, g)| t + scale * s * g).collect())
}

/// Candidate family explored by a selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectorFamily {
    /// Pairwise grey-level differences.
    Gld2,
    /// Fifth-order binary patterns from pairs of already selected GLD offsets.
    CombinedBp5,
    /// Ninth-order binary pattern conjoined from the four best symmetric
    /// third-order patterns.
    ConjoinedBp9,
    /// Jag-star binary patterns of order `k`.
    JagStar(usize),
    /// Quantized responses of the LoG/Gabor bank.
    FilterBank,
}

impl SelectorFamily {
    pub fn default_add_count(self) -> usize {
        match self {
            SelectorFamily::Gld2 => 3,
            SelectorFamily::CombinedBp5 => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for SelectorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectorFamily::Gld2 => f.write_str("gld2"),
            SelectorFamily::CombinedBp5 => f.write_str("bp5"),
            SelectorFamily::ConjoinedBp9 => f.write_str("bp9"),
            SelectorFamily::JagStar(k) => write!(f, "jagstar{k}"),
            SelectorFamily::FilterBank => f.write_str("filters"),
        }
    }
}

impl FromStr for SelectorFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gld2" => Ok(SelectorFamily::Gld2),
            "bp5" => Ok(SelectorFamily::CombinedBp5),
            "bp9" => Ok(SelectorFamily::ConjoinedBp9),
            "filters" => Ok(SelectorFamily::FilterBank),
            _ => {
                let k: usize = s
                    .strip_prefix("jagstar")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| format!("unknown selector `{s}`"))?;
                if k >= 3 && k % 2 == 1 && k <= 17 {
                    Ok(SelectorFamily::JagStar(k))
                } else {
                    Err(format!("jag-star order must be odd and in 3..=17, got {k}"))
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectorSpec {
    pub family: SelectorFamily,
    pub add_count: usize,
    pub iterations: usize,
}

pub const DEFAULT_ITERATIONS: usize = 8;

impl SelectorSpec {
    pub fn new(family: SelectorFamily) -> Self {
        Self {
            family,
            add_count: family.default_add_count(),
            iterations: DEFAULT_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.add_count == 0 || self.iterations == 0 {
            return Err(Error::InvalidArgument(format!(
                "selector {} needs a positive add count and iteration count",
                self.family
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NestConfig {
    /// Include the grey-level marginal in the base model.
    pub marginal: bool,
    pub mode: SelectionMode,
    /// Independent CSA runs per iteration.
    pub csa_runs: usize,
    pub csa_sweeps: usize,
    /// Side of the square CSA sample images.
    pub sample_size: usize,
    pub piece_size: usize,
    pub piece_overlap: usize,
    /// Pseudo-count added to every training histogram bin.
    pub smoothing: f64,
    /// Radius bound of GLD and symmetric-pair candidates.
    pub max_radius: f64,
    pub seed: u64,
}

impl Default for NestConfig {
    fn default() -> Self {
        Self {
            marginal: true,
            mode: SelectionMode::MaxMin,
            csa_runs: 4,
            csa_sweeps: 50,
            sample_size: 100,
            piece_size: 80,
            piece_overlap: 22,
            smoothing: 0.1,
            max_radius: crate::features::DEFAULT_MAX_RADIUS,
            seed: 0,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub selector: String,
    /// Global iteration number starting at 1; 0 marks the closing pass that
    /// only scores residual candidates.
    pub iteration: usize,
    pub candidates: usize,
    pub max_score: f64,
    /// Added features as `(description, score)`.
    pub selected: Vec<(String, f64)>,
    /// JSD between averaged sample and target histograms, per potential,
    /// measured before this iteration's additions.
    pub potential_jsd: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct NestOutcome {
    pub model: NestedModel,
    pub log: Vec<IterationRecord>,
}

pub fn write_log_csv<W: Write>(records: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["selector", "iteration", "candidates", "max_score", "selected", "potential_jsd"])
        .map_err(to_io)?;
    for r in records {
        let selected = r
            .selected
            .iter()
            .map(|(d, s)| format!("{d}={s:?}"))
            .collect::<Vec<_>>()
            .join(";");
        let jsds = r.potential_jsd.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(";");
        w.write_record([
            r.selector.clone(),
            r.iteration.to_string(),
            r.candidates.to_string(),
            format!("{:?}", r.max_score),
            selected,
            jsds,
        ])
        .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
struct Candidate {
    kind: FeatureKind,
    offsets: OffsetList,
    key: String,
}

impl Candidate {
    fn new(kind: FeatureKind, offsets: OffsetList) -> Self {
        let shape: Vec<String> = offsets.shape_key().iter().map(|o| o.to_string()).collect();
        let key = format!("{kind} {}", shape.join(" "));
        Self { kind, offsets, key }
    }

    fn describe(&self) -> String {
        format!("{}@{}", self.kind, self.offsets)
    }
}

/// Bins of every clique anchored inside the valid range of `img`.
struct CodeMap {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    codes: Vec<u32>,
}

impl CodeMap {
    fn new(kind: &FeatureKind, offsets: &OffsetList, img: &GreyImage) -> Option<Self> {
        let range = offsets.anchors(img.width(), img.height())?;
        let deltas = offsets.index_deltas(img.width());
        let px = img.pixels();
        let levels = img.levels();
        let mut values = vec![0u8; deltas.len()];
        let mut codes = Vec::with_capacity(range.count());
        for y in range.y0..=range.y1 {
            for x in range.x0..=range.x1 {
                let base = (y * img.width() + x) as isize;
                for (v, &d) in values.iter_mut().zip(&deltas) {
                    *v = px[(base + d) as usize];
                }
                codes.push(eval_feature(kind, levels, &values) as u32);
            }
        }
        Some(Self {
            x0: range.x0,
            y0: range.y0,
            w: range.x1 - range.x0 + 1,
            h: range.y1 - range.y0 + 1,
            codes,
        })
    }

    /// Counts over anchors in the inclusive rectangle, clipped to the map.
    fn counts(&self, bins: usize, ax0: isize, ax1: isize, ay0: isize, ay1: isize) -> Option<Vec<u64>> {
        let x0 = ax0.max(self.x0 as isize);
        let x1 = ax1.min((self.x0 + self.w) as isize - 1);
        let y0 = ay0.max(self.y0 as isize);
        let y1 = ay1.min((self.y0 + self.h) as isize - 1);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        let mut counts = vec![0u64; bins];
        for y in y0..=y1 {
            let row = (y as usize - self.y0) * self.w;
            for x in x0..=x1 {
                counts[self.codes[row + x as usize - self.x0] as usize] += 1;
            }
        }
        Some(counts)
    }
}

fn smoothed_counts(counts: &[u64], eps: f64) -> Result<Vec<f64>> {
    Ok(HistogramStats::from_counts(counts)?.smoothed(eps))
}

/// Training histograms of a candidate: whole image and every piece that
/// holds at least one clique, all smoothed.
fn training_stats(
    c: &Candidate,
    training: &GreyImage,
    piece_rects: &[(usize, usize, usize)],
    eps: f64,
) -> Result<TrainingStats> {
    let bins = c.kind.bins(training.levels(), c.offsets.arity());
    let map = CodeMap::new(&c.kind, &c.offsets, training).ok_or(Error::NoCliques {
        width: training.width(),
        height: training.height(),
    })?;
    let full = map
        .counts(bins, 0, training.width() as isize, 0, training.height() as isize)
        .expect("map is non-empty");
    let (min_x, max_x, min_y, max_y) = c.offsets.bounds();
    let mut pieces = Vec::with_capacity(piece_rects.len());
    for &(ox, oy, size) in piece_rects {
        let (ox, oy, s) = (ox as isize, oy as isize, size as isize);
        let ax0 = ox - min_x as isize;
        let ax1 = ox + s - 1 - max_x as isize;
        let ay0 = oy - min_y as isize;
        let ay1 = oy + s - 1 - max_y as isize;
        if let Some(counts) = map.counts(bins, ax0, ax1, ay0, ay1) {
            pieces.push(smoothed_counts(&counts, eps)?);
        }
    }
    Ok(TrainingStats {
        full: smoothed_counts(&full, eps)?,
        pieces,
    })
}

fn sample_average(c: &Candidate, samples: &[GreyImage]) -> Result<(Vec<f64>, Vec<HistogramStats>)> {
    let hists = samples
        .iter()
        .map(|s| collect_histogram(&c.kind, &c.offsets, s))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_frequencies(hists.iter().map(|h| h.freq.as_slice()));
    Ok((mean, hists))
}

/// Shared inputs for scoring every candidate of one iteration.
struct ScoringContext<'a> {
    training: &'a GreyImage,
    piece_rects: Vec<(usize, usize, usize)>,
    piece_energies: Vec<f64>,
    samples: &'a [GreyImage],
    mode: SelectionMode,
    eps: f64,
}

impl ScoringContext<'_> {
    fn score(&self, c: &Candidate) -> Result<f64> {
        let stats = training_stats(c, self.training, &self.piece_rects, self.eps)?;
        let (sample, _) = sample_average(c, self.samples)?;
        let energies = if stats.pieces.len() == self.piece_energies.len() {
            self.piece_energies.clone()
        } else {
            // Some pieces hold no clique of this shape; weigh the rest evenly.
            vec![0.0; stats.pieces.len()]
        };
        score_feature(&stats, &sample, self.mode, &energies)
    }
}

fn rank(cands: &[Candidate], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| cands[a].key.cmp(&cands[b].key))
    });
    order
}

fn gld_offsets(model: &NestedModel) -> Vec<Offset> {
    model
        .potentials()
        .iter()
        .filter(|p| p.kind == FeatureKind::Gld)
        .map(|p| p.offsets.as_slice()[1])
        .collect()
}

fn candidates_for(
    family: SelectorFamily,
    model: &NestedModel,
    training: &GreyImage,
    samples: &[GreyImage],
    cfg: &NestConfig,
) -> Result<Vec<Candidate>> {
    let fits = |o: &OffsetList| o.anchors(cfg.sample_size, cfg.sample_size).is_some()
        && o.anchors(training.width(), training.height()).is_some();
    let cands: Vec<Candidate> = match family {
        SelectorFamily::Gld2 => gld_candidates(cfg.max_radius)
            .into_iter()
            .map(|o| Candidate::new(FeatureKind::Gld, o))
            .collect(),
        SelectorFamily::CombinedBp5 => combined_bp5_candidates(&gld_offsets(model))?
            .into_iter()
            .map(|o| Candidate::new(FeatureKind::Bp, o))
            .collect(),
        SelectorFamily::JagStar(k) => enumerate_jagstar_candidates(k)
            .into_iter()
            .map(|o| Candidate::new(FeatureKind::Bp, o))
            .collect(),
        SelectorFamily::FilterBank => build_filter_bank()
            .iter()
            .filter(|f| f.side <= training.width().min(training.height()))
            .map(|f| {
                let feat = FilterFeature::fit(f, training)?;
                Ok(Candidate::new(feat.kind(), feat.offsets()))
            })
            .collect::<Result<_>>()?,
        SelectorFamily::ConjoinedBp9 => {
            let pairs: Vec<OffsetList> = bp3_symmetric_candidates(cfg.max_radius).into_iter().filter(|o| fits(o)).collect();
            let scored: Vec<(HistogramStats, HistogramStats)> = pairs
                .par_iter()
                .map(|o| {
                    let t = collect_histogram(&FeatureKind::Bp, o, training)?;
                    let c = Candidate::new(FeatureKind::Bp, o.clone());
                    let (mean, hists) = sample_average(&c, samples)?;
                    let n = hists.iter().map(|h| h.clique_count).sum();
                    Ok((t, HistogramStats { freq: mean, clique_count: n }))
                })
                .collect::<Result<_>>()?;
            let (t, s): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
            vec![Candidate::new(FeatureKind::Bp, conjoin_bp9(&pairs, &t, &s)?)]
        }
    };
    let cands: Vec<Candidate> = cands.into_iter().filter(|c| fits(&c.offsets)).collect();
    if cands.is_empty() {
        return Err(Error::NoCandidates(family.to_string()));
    }
    Ok(cands)
}

fn targets_of(model: &NestedModel) -> Vec<Vec<f64>> {
    model
        .potentials()
        .iter()
        .map(|p| p.target.clone().expect("nested potentials carry targets"))
        .collect()
}

/// Runs the CSA batch, averages the resulting parameters into `model` and
/// returns the final sample images.
fn csa_batch(model: &mut NestedModel, cfg: &NestConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GreyImage>> {
    let targets = targets_of(model);
    let seeds: Vec<u64> = (0..cfg.csa_runs.max(1)).map(|_| rng.random()).collect();
    let snapshot = model.clone();
    let outcomes = seeds
        .par_iter()
        .map(|&seed| {
            let sc = SamplerConfig::noise(cfg.sample_size, cfg.sample_size, cfg.csa_sweeps.max(1), seed);
            csa_run(&snapshot, &targets, &sc)
        })
        .collect::<Result<Vec<_>>>()?;
    let thetas: Vec<Vec<f64>> = outcomes.iter().map(|o| o.model.theta_vector()).collect();
    let mean = mean_frequencies(thetas.iter().map(Vec::as_slice));
    model.set_theta_vector(&mean)?;
    Ok(outcomes.into_iter().map(|o| o.image).collect())
}

/// Grows a model from the base potentials by running each selector for its
/// configured number of iterations.
pub fn nest(training: &GreyImage, selectors: &[SelectorSpec], cfg: &NestConfig) -> Result<NestOutcome> {
    for s in selectors {
        s.validate()?;
    }
    if cfg.smoothing < 0.0 || !cfg.smoothing.is_finite() {
        return Err(Error::InvalidArgument("smoothing must be non-negative".into()));
    }
    let eps = cfg.smoothing;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = NestedModel::base(training.levels(), cfg.marginal)?;
    for p in model.potentials_mut() {
        p.target = Some(collect_histogram(&p.kind, &p.offsets, training)?.smoothed(eps));
    }

    let piece_size = cfg.piece_size.min(training.width()).min(training.height());
    let pieces = split_pieces(training, piece_size, cfg.piece_overlap.min(piece_size - 1))?;
    let piece_rects: Vec<(usize, usize, usize)> = pieces.origins.iter().map(|&(x, y)| (x, y, piece_size)).collect();

    let mut log = Vec::new();
    let mut iteration = 0;
    let mut last_family = None;
    for spec in selectors {
        last_family = Some(spec.family);
        for _ in 0..spec.iterations {
            iteration += 1;
            let samples = csa_batch(&mut model, cfg, &mut rng)?;
            let piece_energies = pieces
                .pieces
                .iter()
                .map(|p| model.energy(p))
                .collect::<Result<Vec<_>>>()?;
            let ctx = ScoringContext {
                training,
                piece_rects: piece_rects.clone(),
                piece_energies,
                samples: &samples,
                mode: cfg.mode,
                eps,
            };
            let cands = candidates_for(spec.family, &model, training, &samples, cfg)?;
            let scores = cands.par_iter().map(|c| ctx.score(c)).collect::<Result<Vec<_>>>()?;
            let potential_jsd = potential_jsds(&model, &samples)?;

            let mut selected = Vec::new();
            for &i in &rank(&cands, &scores) {
                if selected.len() == spec.add_count {
                    break;
                }
                let c = &cands[i];
                if model.contains_family(&c.kind, &c.offsets) {
                    continue;
                }
                let p = initialized_potential(c, training, &samples, eps, iteration)?;
                model = model.add_potential(p)?;
                selected.push((c.describe(), scores[i]));
            }
            log.push(IterationRecord {
                selector: spec.family.to_string(),
                iteration,
                candidates: cands.len(),
                max_score: scores.iter().copied().fold(0.0, f64::max),
                selected,
                potential_jsd,
            });
        }
    }

    // Closing pass: refit all parameters and record the residual disagreement.
    let samples = csa_batch(&mut model, cfg, &mut rng)?;
    if let Some(family) = last_family {
        let piece_energies = pieces
            .pieces
            .iter()
            .map(|p| model.energy(p))
            .collect::<Result<Vec<_>>>()?;
        let ctx = ScoringContext {
            training,
            piece_rects,
            piece_energies,
            samples: &samples,
            mode: cfg.mode,
            eps,
        };
        let cands: Vec<Candidate> = candidates_for(family, &model, training, &samples, cfg)?
            .into_iter()
            .filter(|c| !model.contains_family(&c.kind, &c.offsets))
            .collect();
        let scores = cands.par_iter().map(|c| ctx.score(c)).collect::<Result<Vec<_>>>()?;
        log.push(IterationRecord {
            selector: family.to_string(),
            iteration: 0,
            candidates: cands.len(),
            max_score: scores.iter().copied().fold(0.0, f64::max),
            selected: Vec::new(),
            potential_jsd: potential_jsds(&model, &samples)?,
        });
    }
    Ok(NestOutcome { model, log })
}

fn potential_jsds(model: &NestedModel, samples: &[GreyImage]) -> Result<Vec<f64>> {
    model
        .potentials()
        .iter()
        .map(|p| {
            let hists = samples
                .iter()
                .map(|s| collect_histogram(&p.kind, &p.offsets, s))
                .collect::<Result<Vec<_>>>()?;
            let mean = mean_frequencies(hists.iter().map(|h| h.freq.as_slice()));
            jsd(&mean, p.target.as_ref().expect("nested potentials carry targets"))
        })
        .collect()
}

/// New potential with its target set and `theta` from one second-order step
/// away from zero, using the spread of the sample histograms as curvature.
fn initialized_potential(
    c: &Candidate,
    training: &GreyImage,
    samples: &[GreyImage],
    eps: f64,
    iteration: usize,
) -> Result<Potential> {
    let target = collect_histogram(&c.kind, &c.offsets, training)?.smoothed(eps);
    let (mean, hists) = sample_average(c, samples)?;
    let grad = gradient(std::slice::from_ref(&target), std::slice::from_ref(&mean))?;
    let var = per_clique_variance(&hists, &mean);
    let theta0 = vec![0.0; target.len()];
    let theta = second_order_step(&theta0, &grad, &var)?;
    Ok(Potential::new(c.kind.clone(), c.offsets.clone(), training.levels())?
        .with_theta(theta)
        .with_target(target)
        .with_iteration(iteration))
}

/// Sample variance of each bin frequency across images, scaled by the
/// clique count to a per-clique variance.
fn per_clique_variance(hists: &[HistogramStats], mean: &[f64]) -> Vec<f64> {
    let n = hists.len();
    let cliques = hists.iter().map(|h| h.clique_count).sum::<usize>() as f64 / n.max(1) as f64;
    if n < 2 {
        return mean.iter().map(|m| m * (1.0 - m)).collect();
    }
    (0..mean.len())
        .map(|b| {
            let ss: f64 = hists.iter().map(|h| (h.freq[b] - mean[b]).powi(2)).sum();
            cliques * ss / (n - 1) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneConfig {
    pub sweeps: usize,
    /// Side of the persistent sample, initialized from a training crop.
    pub size: usize,
    /// Robbins-Monro scale for the parameter steps.
    pub step: f64,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            sweeps: 200,
            size: 100,
            step: 1.0,
            seed: 0,
        }
    }
}

/// Refines parameters for use with fixed-parameter Gibbs sampling: a
/// persistent chain started from a training crop, decaying steps towards
/// the targets, and the average of the parameters over the second half.
pub fn tune_parameters(model: &NestedModel, training: &GreyImage, cfg: &TuneConfig) -> Result<NestedModel> {
    if cfg.sweeps == 0 {
        return Ok(model.clone());
    }
    let targets = targets_of_checked(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.size.min(training.width()).min(training.height());
    let x = rng.random_range(0..=training.width() - size);
    let y = rng.random_range(0..=training.height() - size);
    let img = training.crop(x, y, size, size)?;
    let mut sampler = Sampler::new(model.clone(), img)?;
    let len = model.theta_vector().len();
    let mut steps = StepState::new(len, StepRule::RobbinsMonro);
    let mut avg = vec![0.0; len];
    let mut averaged = 0usize;
    for s in 0..cfg.sweeps {
        sampler.sweep(None, &mut rng);
        let freqs = sampler.all_frequencies();
        let err = gradient(&targets, &freqs)?;
        let delta = steps.step(&err);
        let mut theta = sampler.model().theta_vector();
        theta.iter_mut().zip(&delta).for_each(|(t, d)| *t += cfg.step * d);
        sampler.model_mut().set_theta_vector(&theta)?;
        if 2 * s >= cfg.sweeps {
            avg.iter_mut().zip(&theta).for_each(|(a, t)| *a += t);
            averaged += 1;
        }
    }
    avg.iter_mut().for_each(|a| *a /= averaged as f64);
    let mut out = model.clone();
    out.set_theta_vector(&avg)?;
    Ok(out)
}

fn targets_of_checked(model: &NestedModel) -> Result<Vec<Vec<f64>>> {
    model
        .potentials()
        .iter()
        .map(|p| {
            p.target
                .clone()
                .ok_or_else(|| Error::InvalidArgument(format!("{} potential has no target histogram", p.kind)))
        })
        .collect()
}
