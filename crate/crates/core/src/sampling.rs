//! Single-site Gibbs sampling, controllable simulated annealing (CSA and its
//! adaptive-gain variant ACSA), seed-grown synthesis and inpainting.
//!
//! [`Sampler`] owns an image together with the clique counts of every
//! potential, updated incrementally as pixels change, so the statistics
//! needed by CSA are available after every sweep at no extra cost. Filter
//! potentials additionally keep a map of their integer responses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{accumulate_counts, eval_feature, AnchorRange, FeatureKind, Offset};
use crate::image::GreyImage;
use crate::model::NestedModel;

/// Robbins-Monro schedule `lambda_t = RM_SCALE / (RM_SCALE + t)`.
pub const RM_SCALE: f64 = 15.0;
/// Adaptive gain growth on sign agreement.
pub const GAIN_UP: f64 = 1.02;
/// Adaptive gain shrinkage on sign disagreement.
pub const GAIN_DOWN: f64 = 1.0 / 1.02;
pub const GAIN_MIN: f64 = 1e-4;
pub const GAIN_MAX: f64 = 1e2;

#[derive(Clone, Debug)]
enum Code {
    Marginal,
    Gld,
    Glc(Vec<usize>),
    Bp,
    Be(u8),
    Filter(Vec<i64>),
    /// Repeated offsets: evaluate the feature on gathered values.
    Generic,
}

/// Clique members sharing one offset.
#[derive(Clone, Debug)]
struct Group {
    offset: Offset,
    members: Vec<usize>,
    tap_sum: i64,
}

#[derive(Clone, Debug)]
struct Plan {
    code: Code,
    deltas: Vec<isize>,
    groups: Vec<Group>,
    anchors: Option<AnchorRange>,
    clique_count: usize,
    /// Filter responses indexed by anchor pixel index.
    responses: Vec<i64>,
}

impl Plan {
    fn new(kind: &FeatureKind, offsets: &crate::features::OffsetList, levels: usize, width: usize, height: usize) -> Self {
        let mut groups: Vec<Group> = Vec::new();
        for (j, &o) in offsets.iter().enumerate() {
            match groups.iter_mut().find(|g| g.offset == o) {
                Some(g) => g.members.push(j),
                None => groups.push(Group {
                    offset: o,
                    members: vec![j],
                    tap_sum: 0,
                }),
            }
        }
        let repeated = groups.len() != offsets.arity();
        let code = match kind {
            FeatureKind::Filter(f) => {
                for g in &mut groups {
                    g.tap_sum = g.members.iter().map(|&j| f.taps()[j]).sum();
                }
                Code::Filter(f.taps().to_vec())
            }
            _ if repeated => Code::Generic,
            FeatureKind::Marginal => Code::Marginal,
            FeatureKind::Gld => Code::Gld,
            FeatureKind::Glc => Code::Glc((0..offsets.arity()).map(|i| levels.pow(i as u32)).collect()),
            FeatureKind::Bp => Code::Bp,
            FeatureKind::Be { threshold } => Code::Be(*threshold),
        };
        let anchors = offsets.anchors(width, height);
        Plan {
            code,
            deltas: offsets.index_deltas(width),
            groups,
            anchors,
            clique_count: anchors.map_or(0, |a| a.count()),
            responses: Vec::new(),
        }
    }
}

/// Gibbs sampler state: image, model parameters and incremental statistics.
#[derive(Clone, Debug)]
pub struct Sampler {
    model: NestedModel,
    img: GreyImage,
    plans: Vec<Plan>,
    counts: Vec<Vec<u64>>,
    // Scratch for one site update.
    energies: Vec<f64>,
    bins: Vec<u32>,
    touched: Vec<(usize, usize)>,
    values: Vec<u8>,
}

impl Sampler {
    /// Every potential needs at least one clique inside the lattice.
    pub fn new(model: NestedModel, img: GreyImage) -> Result<Self> {
        if img.levels() != model.levels() {
            return Err(Error::InvalidArgument(format!(
                "image has {} levels, model has {}",
                img.levels(),
                model.levels()
            )));
        }
        let (w, h) = (img.width(), img.height());
        let mut plans = Vec::with_capacity(model.len());
        let mut counts = Vec::with_capacity(model.len());
        for p in model.potentials() {
            let mut plan = Plan::new(&p.kind, &p.offsets, model.levels(), w, h);
            if plan.clique_count == 0 {
                return Err(Error::NoCliques { width: w, height: h });
            }
            let mut c = vec![0u64; p.bins()];
            accumulate_counts(&p.kind, &p.offsets, &img, &mut c);
            if let Code::Filter(taps) = &plan.code {
                let range = plan.anchors.expect("checked above");
                let mut resp = vec![0i64; w * h];
                let px = img.pixels();
                for y in range.y0..=range.y1 {
                    for x in range.x0..=range.x1 {
                        let a = y * w + x;
                        resp[a] = plan
                            .deltas
                            .iter()
                            .zip(taps)
                            .map(|(&d, &t)| t * px[(a as isize + d) as usize] as i64)
                            .sum();
                    }
                }
                plan.responses = resp;
            }
            plans.push(plan);
            counts.push(c);
        }
        let levels = model.levels();
        Ok(Self {
            model,
            img,
            plans,
            counts,
            energies: vec![0.0; levels],
            bins: Vec::new(),
            touched: Vec::new(),
            values: Vec::new(),
        })
    }

    pub fn image(&self) -> &GreyImage {
        &self.img
    }

    pub fn model(&self) -> &NestedModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut NestedModel {
        &mut self.model
    }

    pub fn into_parts(self) -> (GreyImage, NestedModel) {
        (self.img, self.model)
    }

    /// Raw clique counts of potential `p`.
    pub fn counts(&self, p: usize) -> &[u64] {
        &self.counts[p]
    }

    /// Current normalized histogram of potential `p`.
    pub fn frequencies(&self, p: usize) -> Vec<f64> {
        let n = self.plans[p].clique_count as f64;
        self.counts[p].iter().map(|&c| c as f64 / n).collect()
    }

    pub fn all_frequencies(&self) -> Vec<Vec<f64>> {
        (0..self.plans.len()).map(|p| self.frequencies(p)).collect()
    }

    /// `sum_p theta_p . h_p` from the maintained counts.
    pub fn energy(&self) -> f64 {
        self.model
            .potentials()
            .iter()
            .enumerate()
            .map(|(p, pot)| {
                let n = self.plans[p].clique_count as f64;
                self.counts[p].iter().zip(&pot.theta).map(|(&c, &t)| c as f64 * t).sum::<f64>() / n
            })
            .sum()
    }

    /// Fills `self.energies` and `self.bins` for the site at `idx`.
    fn evaluate_site(&mut self, idx: usize) {
        let levels = self.model.levels();
        let w = self.img.width();
        let (x, y) = ((idx % w) as isize, (idx / w) as isize);
        let px = self.img.pixels();
        let old = px[idx];
        self.energies.iter_mut().for_each(|e| *e = 0.0);
        self.bins.clear();
        self.touched.clear();
        for (p, (plan, pot)) in self.plans.iter().zip(self.model.potentials()).enumerate() {
            let Some(range) = plan.anchors else { continue };
            let theta = &pot.theta;
            for g in &plan.groups {
                let (ax, ay) = (x - g.offset.dx as isize, y - g.offset.dy as isize);
                if !range.contains(ax, ay) {
                    continue;
                }
                let a = ay as usize * w + ax as usize;
                let start = self.bins.len();
                let j = g.members[0];
                match &plan.code {
                    Code::Marginal => self.bins.extend(0..levels as u32),
                    Code::Gld => {
                        let off = levels as i32 - 1;
                        if j == 0 {
                            let v1 = px[(a as isize + plan.deltas[1]) as usize] as i32;
                            self.bins.extend((0..levels as i32).map(|q| (v1 + off - q) as u32));
                        } else {
                            let v0 = px[a] as i32;
                            self.bins.extend((0..levels as i32).map(|q| (q + off - v0) as u32));
                        }
                    }
                    Code::Glc(mults) => {
                        let mut base = 0usize;
                        for (i, (&d, &m)) in plan.deltas.iter().zip(mults).enumerate() {
                            if i != j {
                                base += px[(a as isize + d) as usize] as usize * m;
                            }
                        }
                        self.bins.extend((0..levels).map(|q| (base + q * mults[j]) as u32));
                    }
                    Code::Bp | Code::Be(_) => {
                        let test = |c: u8, v: u8| match plan.code {
                            Code::Be(t) => c.abs_diff(v) <= t,
                            _ => c < v,
                        };
                        if j == 0 {
                            self.values.clear();
                            self.values
                                .extend(plan.deltas[1..].iter().map(|&d| px[(a as isize + d) as usize]));
                            for q in 0..levels as u8 {
                                let code = self
                                    .values
                                    .iter()
                                    .enumerate()
                                    .fold(0u32, |acc, (i, &v)| acc | ((test(q, v) as u32) << i));
                                self.bins.push(code);
                            }
                        } else {
                            let x0 = px[a];
                            let mut base = 0u32;
                            for (i, &d) in plan.deltas[1..].iter().enumerate() {
                                if i + 1 != j {
                                    base |= (test(x0, px[(a as isize + d) as usize]) as u32) << i;
                                }
                            }
                            self.bins
                                .extend((0..levels as u8).map(|q| base | ((test(x0, q) as u32) << (j - 1))));
                        }
                    }
                    Code::Filter(_) => {
                        let FeatureKind::Filter(f) = &pot.kind else {
                            unreachable!("filter plan for a non-filter potential")
                        };
                        let r0 = plan.responses[a] - g.tap_sum * old as i64;
                        self.bins
                            .extend((0..levels as i64).map(|q| f.bin(r0 + g.tap_sum * q) as u32));
                    }
                    Code::Generic => {
                        for q in 0..levels as u8 {
                            self.values.clear();
                            self.values
                                .extend(plan.deltas.iter().map(|&d| px[(a as isize + d) as usize]));
                            for &m in &g.members {
                                self.values[m] = q;
                            }
                            self.bins.push(eval_feature(&pot.kind, levels, &self.values) as u32);
                        }
                    }
                }
                for (e, &b) in self.energies.iter_mut().zip(&self.bins[start..]) {
                    *e += theta[b as usize];
                }
                self.touched.push((p, a));
            }
        }
    }

    /// Writes `value` at `idx` using the bins from the last `evaluate_site`.
    fn commit(&mut self, idx: usize, value: u8) {
        let old = self.img.pixels()[idx];
        if old == value {
            return;
        }
        let levels = self.model.levels();
        let w = self.img.width();
        let (x, y) = ((idx % w) as isize, (idx / w) as isize);
        for (k, &(p, a)) in self.touched.iter().enumerate() {
            let row = &self.bins[k * levels..(k + 1) * levels];
            let counts = &mut self.counts[p];
            counts[row[old as usize] as usize] -= 1;
            counts[row[value as usize] as usize] += 1;
            let plan = &mut self.plans[p];
            if matches!(plan.code, Code::Filter(_)) {
                let (ax, ay) = ((a % w) as isize, (a / w) as isize);
                let g = plan
                    .groups
                    .iter()
                    .find(|g| (x - g.offset.dx as isize, y - g.offset.dy as isize) == (ax, ay))
                    .expect("touched clique has a covering group");
                plan.responses[a] += g.tap_sum * (value as i64 - old as i64);
            }
        }
        self.img.set_index_unchecked(idx, value);
    }

    /// Sets pixel `(x, y)` and updates all statistics incrementally.
    pub fn set_pixel(&mut self, x: usize, y: usize, value: u8) {
        assert!(x < self.img.width() && y < self.img.height(), "site outside lattice");
        assert!((value as usize) < self.model.levels(), "level out of range");
        let idx = y * self.img.width() + x;
        self.evaluate_site(idx);
        self.commit(idx, value);
    }

    /// Conditional distribution at `(x, y)`, computed with the incremental kernel.
    pub fn conditional(&mut self, x: usize, y: usize) -> Vec<f64> {
        self.evaluate_site(y * self.img.width() + x);
        crate::model::boltzmann(&self.energies)
    }

    fn resample<R: Rng + ?Sized>(&mut self, idx: usize, rng: &mut R) {
        self.evaluate_site(idx);
        let min = self.energies.iter().copied().fold(f64::INFINITY, f64::min);
        let mut total = 0.0;
        for e in self.energies.iter_mut() {
            *e = (min - *e).exp();
            total += *e;
        }
        let mut u = rng.random::<f64>() * total;
        let mut value = self.energies.len() - 1;
        for (q, &w) in self.energies.iter().enumerate() {
            if u < w {
                value = q;
                break;
            }
            u -= w;
        }
        self.commit(idx, value as u8);
    }

    /// One raster-order pass redrawing every site not frozen by `mask`.
    pub fn sweep<R: Rng + ?Sized>(&mut self, mask: Option<&[bool]>, rng: &mut R) {
        let n = self.img.len();
        match mask {
            Some(frozen) => {
                for idx in 0..n {
                    if !frozen[idx] {
                        self.resample(idx, rng);
                    }
                }
            }
            None => {
                for idx in 0..n {
                    self.resample(idx, rng);
                }
            }
        }
    }
}

/// One Gibbs sweep over `img` (masked sites stay fixed).
pub fn gibbs_sweep<R: Rng + ?Sized>(
    model: &NestedModel,
    img: &mut GreyImage,
    mask: Option<&[bool]>,
    rng: &mut R,
) -> Result<()> {
    check_mask(mask, img.len())?;
    let placeholder = GreyImage::new(1, 1, img.levels())?;
    let owned = std::mem::replace(img, placeholder);
    let mut sampler = Sampler::new(model.clone(), owned)?;
    sampler.sweep(mask, rng);
    *img = sampler.into_parts().0;
    Ok(())
}

fn check_mask(mask: Option<&[bool]>, len: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != len => Err(Error::LengthMismatch {
            expected: len,
            got: m.len(),
        }),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRule {
    /// `lambda_t = 15 / (15 + t)` for every parameter.
    RobbinsMonro,
    /// Per-parameter gains adapted from successive error signs.
    Adaptive,
}

/// Step sizes of a CSA run.
#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    pub t: usize,
    pub lambda: Vec<f64>,
    pub prev_sign: Vec<i8>,
    pub rule: StepRule,
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

impl StepState {
    pub fn new(len: usize, rule: StepRule) -> Self {
        Self {
            t: 0,
            lambda: vec![1.0; len],
            prev_sign: vec![0; len],
            rule,
        }
    }

    /// Parameter increment `lambda ∘ error`; advances the schedule.
    pub fn step(&mut self, error: &[f64]) -> Vec<f64> {
        assert_eq!(error.len(), self.lambda.len(), "error vector length");
        match self.rule {
            StepRule::RobbinsMonro => {
                let l = RM_SCALE / (RM_SCALE + self.t as f64);
                self.lambda.iter_mut().for_each(|v| *v = l);
            }
            StepRule::Adaptive => {
                for ((l, prev), &e) in self.lambda.iter_mut().zip(&mut self.prev_sign).zip(error) {
                    let s = sign(e);
                    if s != 0 && *prev != 0 {
                        *l *= if s == *prev { GAIN_UP } else { GAIN_DOWN };
                        *l = l.clamp(GAIN_MIN, GAIN_MAX);
                    }
                    *prev = s;
                }
            }
        }
        self.t += 1;
        self.lambda.iter().zip(error).map(|(l, e)| l * e).collect()
    }
}

/// How the sampled image is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Noise,
    Image(GreyImage),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub width: usize,
    pub height: usize,
    pub sweeps: usize,
    pub init: Init,
    /// Frozen sites, row-major.
    pub mask: Option<Vec<bool>>,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn noise(width: usize, height: usize, sweeps: usize, seed: u64) -> Self {
        Self {
            width,
            height,
            sweeps,
            init: Init::Noise,
            mask: None,
            seed,
        }
    }

    fn initial_image<R: Rng + ?Sized>(&self, levels: usize, rng: &mut R) -> Result<GreyImage> {
        if self.sweeps == 0 {
            return Err(Error::InvalidArgument("sweeps must be at least 1".into()));
        }
        let img = match &self.init {
            Init::Noise => GreyImage::noise(self.width, self.height, levels, rng)?,
            Init::Image(img) => {
                if img.width() != self.width || img.height() != self.height || img.levels() != levels {
                    return Err(Error::InvalidArgument("initial image does not match the sampler size".into()));
                }
                img.clone()
            }
        };
        check_mask(self.mask.as_deref(), img.len())?;
        Ok(img)
    }
}

/// Result of a CSA run: the last sample and the adapted model.
#[derive(Clone, Debug)]
pub struct CsaOutcome {
    pub image: GreyImage,
    pub model: NestedModel,
}

/// Alternates sweeps with `theta += lambda ∘ (h(sample) - target)`.
/// A `None` target freezes that potential's parameters.
pub fn run_csa(
    model: &NestedModel,
    targets: &[Option<Vec<f64>>],
    cfg: &SamplerConfig,
    rule: StepRule,
) -> Result<CsaOutcome> {
    if targets.len() != model.len() {
        return Err(Error::LengthMismatch {
            expected: model.len(),
            got: targets.len(),
        });
    }
    for (p, t) in model.potentials().iter().zip(targets) {
        if let Some(t) = t {
            if t.len() != p.bins() {
                return Err(Error::LengthMismatch {
                    expected: p.bins(),
                    got: t.len(),
                });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let img = cfg.initial_image(model.levels(), &mut rng)?;
    let mut sampler = Sampler::new(model.clone(), img)?;
    let free: Vec<usize> = (0..targets.len()).filter(|&p| targets[p].is_some()).collect();
    let len: usize = free.iter().map(|&p| model.potentials()[p].bins()).sum();
    let mut steps = StepState::new(len, rule);
    let mut error = Vec::with_capacity(len);
    for _ in 0..cfg.sweeps {
        sampler.sweep(cfg.mask.as_deref(), &mut rng);
        error.clear();
        for &p in &free {
            let h = sampler.frequencies(p);
            let target = targets[p].as_ref().expect("free potentials have targets");
            error.extend(h.iter().zip(target).map(|(s, o)| s - o));
        }
        let delta = steps.step(&error);
        let mut k = 0;
        for &p in &free {
            for t in sampler.model_mut().potentials_mut()[p].theta.iter_mut() {
                *t += delta[k];
                k += 1;
            }
        }
    }
    let (image, model) = sampler.into_parts();
    Ok(CsaOutcome { image, model })
}

fn all_targets(targets: &[Vec<f64>]) -> Vec<Option<Vec<f64>>> {
    targets.iter().cloned().map(Some).collect()
}

/// CSA with the Robbins-Monro schedule.
pub fn csa_run(model: &NestedModel, targets: &[Vec<f64>], cfg: &SamplerConfig) -> Result<CsaOutcome> {
    run_csa(model, &all_targets(targets), cfg, StepRule::RobbinsMonro)
}

/// CSA with adaptive per-parameter gains.
pub fn acsa_run(model: &NestedModel, targets: &[Vec<f64>], cfg: &SamplerConfig) -> Result<CsaOutcome> {
    run_csa(model, &all_targets(targets), cfg, StepRule::Adaptive)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub sweeps: usize,
    /// Side of the training piece planted at the centre; 0 disables seeding.
    pub seed_size: usize,
    /// Plain Gibbs with fixed parameters instead of ACSA.
    pub freeze_theta: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 180,
            height: 180,
            sweeps: 300,
            seed_size: 32,
            freeze_theta: false,
            seed: 0,
        }
    }
}

/// Synthesizes a texture on an enlarged lattice (margin = largest clique
/// extent), seeded with a random piece of `training`, and trims the margin.
pub fn synthesize(model: &NestedModel, training: Option<&GreyImage>, cfg: &SynthConfig) -> Result<GreyImage> {
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::InvalidArgument("output size must be positive".into()));
    }
    let margin = model.max_extent();
    let (w, h) = (cfg.width + 2 * margin, cfg.height + 2 * margin);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut img = GreyImage::noise(w, h, model.levels(), &mut rng)?;
    if let Some(train) = training {
        let side = cfg.seed_size.min(train.width()).min(train.height()).min(w).min(h);
        if side > 0 {
            let sx = rng.random_range(0..=train.width() - side);
            let sy = rng.random_range(0..=train.height() - side);
            let piece = train.crop(sx, sy, side, side)?;
            img.paste(&piece, (w - side) / 2, (h - side) / 2)?;
        }
    }
    let targets: Vec<Option<Vec<f64>>> = if cfg.freeze_theta {
        vec![None; model.len()]
    } else {
        model.potentials().iter().map(|p| p.target.clone()).collect()
    };
    let run_cfg = SamplerConfig {
        width: w,
        height: h,
        sweeps: cfg.sweeps,
        init: Init::Image(img),
        mask: None,
        seed: rng.random(),
    };
    let out = run_csa(model, &targets, &run_cfg, StepRule::Adaptive)?;
    out.image.crop(margin, margin, cfg.width, cfg.height)
}

/// Axis-aligned rectangle of sites to fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hole {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Hole {
    /// `width x height` hole centred in a `frame_w x frame_h` frame.
    pub fn centred(frame_w: usize, frame_h: usize, width: usize, height: usize) -> Result<Self> {
        if width > frame_w || height > frame_h || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "hole {width}x{height} does not fit in a {frame_w}x{frame_h} frame"
            )));
        }
        Ok(Self {
            x: (frame_w - width) / 2,
            y: (frame_h - height) / 2,
            width,
            height,
        })
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintConfig {
    pub sweeps: usize,
    /// Number of final sweeps averaged into the smoothed output.
    pub smooth_window: usize,
    pub seed: u64,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            sweeps: 200,
            smooth_window: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inpainting {
    /// Last Gibbs sample.
    pub raw: GreyImage,
    /// Per-pixel mean of the last `smooth_window` samples, rounded.
    pub smoothed: GreyImage,
}

/// Fills `hole` by Gibbs sampling with fixed parameters; pixels outside the
/// hole are never modified.
pub fn inpaint(model: &NestedModel, frame: &GreyImage, hole: Hole, cfg: &InpaintConfig) -> Result<Inpainting> {
    if hole.width == 0
        || hole.height == 0
        || hole.x + hole.width > frame.width()
        || hole.y + hole.height > frame.height()
    {
        return Err(Error::InvalidArgument(format!(
            "hole {}x{} at ({}, {}) exceeds the {}x{} frame",
            hole.width,
            hole.height,
            hole.x,
            hole.y,
            frame.width(),
            frame.height()
        )));
    }
    if cfg.sweeps == 0 {
        return Err(Error::InvalidArgument("sweeps must be at least 1".into()));
    }
    let (w, h) = (frame.width(), frame.height());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut img = frame.clone();
    let mut mask = vec![true; w * h];
    for y in hole.y..hole.y + hole.height {
        for x in hole.x..hole.x + hole.width {
            mask[y * w + x] = false;
            img.set(x, y, rng.random_range(0..model.levels()) as u8);
        }
    }
    let mut sampler = Sampler::new(model.clone(), img)?;
    let window = cfg.smooth_window.clamp(1, cfg.sweeps);
    let mut sums = vec![0u64; w * h];
    for s in 0..cfg.sweeps {
        sampler.sweep(Some(&mask), &mut rng);
        if s + window >= cfg.sweeps {
            for (acc, &v) in sums.iter_mut().zip(sampler.image().pixels()) {
                *acc += v as u64;
            }
        }
    }
    let raw = sampler.into_parts().0;
    let mut smoothed = frame.clone();
    for y in hole.y..hole.y + hole.height {
        for x in hole.x..hole.x + hole.width {
            let mean = sums[y * w + x] as f64 / window as f64;
            smoothed.set(x, y, mean.round() as u8);
        }
    }
    Ok(Inpainting { raw, smoothed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::OffsetList;
    use crate::filterbank::{FilterFeature, FilterId, LinearFilter};
    use crate::model::Potential;

    fn rich_model(rng: &mut ChaCha8Rng, levels: usize, training: &GreyImage) -> NestedModel {
        let mut m = NestedModel::base(levels, true).unwrap();
        let lf = LinearFilter::new(FilterId::Gabor { wavelength: 2, orientation: 3, orientations: 10, odd: true });
        let filt = FilterFeature::fit(&lf, training).unwrap();
        let extra = [
            (FeatureKind::Gld, OffsetList::pair(-2, 1)),
            (FeatureKind::Bp, OffsetList::anchored([Offset::new(1, 0), Offset::new(-1, 1), Offset::new(0, -2), Offset::new(2, 2)])),
            (FeatureKind::Be { threshold: 1 }, OffsetList::anchored([Offset::new(1, 1), Offset::new(-1, 0)])),
            (FeatureKind::Glc, OffsetList::anchored([Offset::new(1, 1), Offset::new(0, 1)])),
            // Repeated member exercises the generic path.
            (FeatureKind::Bp, OffsetList::anchored([Offset::new(1, 0), Offset::new(1, 0), Offset::new(0, 1)])),
            (FeatureKind::Filter(filt.clone()), filt.offsets()),
        ];
        for (kind, offsets) in extra {
            m = m.add_potential(Potential::new(kind, offsets, levels).unwrap()).unwrap();
        }
        for p in m.potentials_mut() {
            p.theta.iter_mut().for_each(|t| *t = rng.random_range(-1.5..1.5));
        }
        m
    }

    #[test]
    fn incremental_statistics_match_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let training = GreyImage::noise(20, 20, 6, &mut rng).unwrap();
        let model = rich_model(&mut rng, 6, &training);
        let img = GreyImage::noise(16, 14, 6, &mut rng).unwrap();
        let mut s = Sampler::new(model.clone(), img).unwrap();
        for _ in 0..400 {
            let (x, y) = (rng.random_range(0..16), rng.random_range(0..14));
            let q = rng.random_range(0..6);
            let local = s.conditional(x, y);
            let oracle = model.local_conditional(s.image(), x, y).unwrap();
            for (a, b) in local.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
            s.set_pixel(x, y, q);
        }
        assert_eq!(s.all_frequencies(), model.histograms(s.image()).unwrap());
        assert!((s.energy() - model.energy(s.image()).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn sweeps_keep_statistics_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let training = GreyImage::noise(20, 20, 4, &mut rng).unwrap();
        let model = rich_model(&mut rng, 4, &training);
        let mut s = Sampler::new(model.clone(), GreyImage::noise(15, 15, 4, &mut rng).unwrap()).unwrap();
        for _ in 0..3 {
            s.sweep(None, &mut rng);
        }
        assert_eq!(s.all_frequencies(), model.histograms(s.image()).unwrap());
    }

    #[test]
    fn uniform_model_gives_uniform_pixels() {
        let model = NestedModel::base(8, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut img = GreyImage::new(100, 100, 8).unwrap();
        gibbs_sweep(&model, &mut img, None, &mut rng).unwrap();
        let counts: Vec<f64> = img.level_histogram().iter().map(|f| f * 1e4).collect();
        let chi2: f64 = counts.iter().map(|c| (c - 1250.0).powi(2) / 1250.0).sum();
        // Chi-square critical value for 7 degrees of freedom at 0.01.
        assert!(chi2 < 18.475, "chi2 = {chi2}");
    }

    #[test]
    fn masked_sites_are_untouched_and_runs_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let training = GreyImage::noise(20, 20, 4, &mut rng).unwrap();
        let model = rich_model(&mut rng, 4, &training);
        let img = GreyImage::noise(12, 12, 4, &mut rng).unwrap();
        let mut a = img.clone();
        gibbs_sweep(&model, &mut a, Some(&vec![true; 144]), &mut rng).unwrap();
        assert_eq!(a, img);
        let run = || {
            let mut b = img.clone();
            let mut r = ChaCha8Rng::seed_from_u64(99);
            gibbs_sweep(&model, &mut b, None, &mut r).unwrap();
            b
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rm_step_follows_the_formula() {
        let mut s = StepState::new(2, StepRule::RobbinsMonro);
        let d = s.step(&[0.4 - 0.5, 0.6 - 0.5]);
        assert!((d[0] + 0.1).abs() < 1e-15 && (d[1] - 0.1).abs() < 1e-15);
        let d = s.step(&[1.0, 1.0]);
        assert!((d[0] - 15.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_gains_follow_error_signs() {
        let mut s = StepState::new(2, StepRule::Adaptive);
        let mut prev = s.lambda.clone();
        for t in 0..20 {
            let alt = if t % 2 == 0 { 0.3 } else { -0.3 };
            s.step(&[0.2, alt]);
            if t > 0 {
                assert!(s.lambda[0] > prev[0]);
                assert!(s.lambda[1] < prev[1]);
            }
            prev = s.lambda.clone();
        }
        for _ in 0..2000 {
            s.step(&[0.2, 0.0]);
        }
        assert_eq!(s.lambda[0], GAIN_MAX);
    }

    #[test]
    fn matched_targets_leave_theta_unchanged() {
        // Sample statistics of a constant image under a one-level marginal
        // model never change, so they equal the target at every step.
        let levels = 3;
        let m = NestedModel::new(levels)
            .unwrap()
            .add_potential(
                Potential::new(FeatureKind::Marginal, OffsetList::single(), levels)
                    .unwrap()
                    .with_theta(vec![0.0, 50.0, 50.0]),
            )
            .unwrap();
        let img = GreyImage::new(10, 10, levels).unwrap();
        let mut cfg = SamplerConfig::noise(10, 10, 5, 1);
        cfg.init = Init::Image(img);
        cfg.mask = Some(vec![true; 100]);
        let out = csa_run(&m, &[vec![1.0, 0.0, 0.0]], &cfg).unwrap();
        assert_eq!(out.model, m);
    }

    #[test]
    fn csa_concentrates_marginal() {
        let levels = 4;
        let m = NestedModel::new(levels)
            .unwrap()
            .add_potential(Potential::new(FeatureKind::Marginal, OffsetList::single(), levels).unwrap())
            .unwrap();
        let target = vec![0.97, 0.01, 0.01, 0.01];
        let out = csa_run(&m, &[target], &SamplerConfig::noise(40, 40, 50, 3)).unwrap();
        assert!(out.image.level_histogram()[0] >= 0.9);
    }

    #[test]
    fn synthesis_trims_to_size_and_reproduces_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let levels = 5;
        let mut px = Vec::new();
        for _ in 0..60 * 60 {
            let u: f64 = rng.random();
            px.push(if u < 0.5 { 0 } else if u < 0.8 { 2 } else { 4 });
        }
        let training = GreyImage::from_pixels(60, 60, levels, px).unwrap();
        let target = training.level_histogram();
        let m = NestedModel::new(levels)
            .unwrap()
            .add_potential(
                Potential::new(FeatureKind::Marginal, OffsetList::single(), levels)
                    .unwrap()
                    .with_target(target.clone()),
            )
            .unwrap();
        let cfg = SynthConfig { sweeps: 60, ..SynthConfig::default() };
        let out = synthesize(&m, Some(&training), &cfg).unwrap();
        assert_eq!((out.width(), out.height()), (180, 180));
        let d = crate::learning::jsd(&out.level_histogram(), &target).unwrap();
        assert!(d <= 0.01, "jsd {d}");
        assert_eq!(synthesize(&m, Some(&training), &cfg).unwrap(), out);
    }

    #[test]
    fn inpainting_freezes_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let training = GreyImage::noise(20, 20, 4, &mut rng).unwrap();
        let model = rich_model(&mut rng, 4, &training);
        let frame = GreyImage::noise(30, 30, 4, &mut rng).unwrap();
        let hole = Hole::centred(30, 30, 12, 12).unwrap();
        let cfg = InpaintConfig { sweeps: 6, smooth_window: 1, seed: 4 };
        let out = inpaint(&model, &frame, hole, &cfg).unwrap();
        assert_eq!(out.raw, out.smoothed);
        for y in 0..30 {
            for x in 0..30 {
                if !hole.contains(x, y) {
                    assert_eq!(out.raw.get(x, y), frame.get(x, y));
                }
            }
        }
        assert!(Hole::centred(76, 76, 80, 80).is_err());
        let bad = Hole { x: 20, y: 20, width: 12, height: 12 };
        assert!(inpaint(&model, &frame, bad, &cfg).is_err());
    }

    #[test]
    fn constant_texture_fills_hole() {
        // Model of a texture whose every pixel is level 2.
        let levels = 4;
        let training = GreyImage::filled(40, 40, levels, 2).unwrap();
        let mut m = NestedModel::base(levels, true).unwrap();
        for p in m.potentials_mut() {
            let keep = if p.kind == FeatureKind::Marginal { 2 } else { levels - 1 };
            p.theta = (0..p.bins()).map(|b| if b == keep { 0.0 } else { 30.0 }).collect();
        }
        let frame = training.crop(0, 0, 30, 30).unwrap();
        let hole = Hole::centred(30, 30, 16, 16).unwrap();
        let out = inpaint(&m, &frame, hole, &InpaintConfig { sweeps: 30, smooth_window: 10, seed: 2 }).unwrap();
        assert_eq!(out.smoothed, frame);
    }
}
