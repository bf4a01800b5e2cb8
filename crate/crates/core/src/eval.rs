//! Evaluation: MSSIM, exact enumeration on tiny lattices and the
//! inpainting benchmark harness.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::accumulate_counts;
use crate::image::{load_image, rescale_level, GreyImage};
use crate::learning::{nest, tune_parameters, NestConfig, SelectorSpec, TuneConfig};
use crate::model::NestedModel;
use crate::sampling::{inpaint, Hole, InpaintConfig};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region Gaussian filtering of a `w x h` map.
fn blur(map: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * map[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every 11x11 window position fully inside the images,
/// with Gaussian weights (sigma 1.5) and dynamic range `levels - 1`.
pub fn mssim(a: &GreyImage, b: &GreyImage) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::InvalidArgument(format!(
            "mssim needs equal sizes, got {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.levels() != b.levels() {
        return Err(Error::InvalidArgument("mssim needs equal level counts".into()));
    }
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::TooSmall {
            width: a.width(),
            height: a.height(),
            need_w: SSIM_WINDOW,
            need_h: SSIM_WINDOW,
        });
    }
    let l = (a.levels() - 1) as f64;
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let (w, h) = (a.width(), a.height());
    let fa: Vec<f64> = a.pixels().iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.pixels().iter().map(|&v| v as f64).collect();
    let k = gaussian_kernel();
    let mu_a = blur(&fa, w, h, &k);
    let mu_b = blur(&fb, w, h, &k);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let aa = blur(&prod(&fa, &fa), w, h, &k);
    let bb = blur(&prod(&fb, &fb), w, h, &k);
    let ab = blur(&prod(&fa, &fb), w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Exact moments of a model on a tiny lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactStats {
    /// Expected normalized histogram per potential.
    pub expected: Vec<Vec<f64>>,
    pub log_z: f64,
}

/// Largest enumerable state space.
pub const MAX_STATES: f64 = (1u64 << 20) as f64;

/// Visits every image of the lattice with its clique counts (all
/// potentials concatenated) and unnormalized log-weight.
fn enumerate_states(
    model: &NestedModel,
    width: usize,
    height: usize,
    mut visit: impl FnMut(&[u64], f64),
) -> Result<Vec<usize>> {
    let q = model.levels();
    let n = width * height;
    let states = (q as f64).powi(n as i32);
    if states > MAX_STATES {
        return Err(Error::StateSpaceTooLarge { states });
    }
    let cliques: Vec<usize> = model
        .potentials()
        .iter()
        .map(|p| p.offsets.clique_count(width, height))
        .collect();
    if cliques.contains(&0) {
        return Err(Error::NoCliques { width, height });
    }
    let dims: Vec<usize> = model.potentials().iter().map(|p| p.bins()).collect();
    let theta = model.theta_vector();
    let mut img = GreyImage::new(width, height, q)?;
    let mut counts = vec![0u64; theta.len()];
    for s in 0..states as usize {
        let mut code = s;
        for i in 0..n {
            img.set(i % width, i / width, (code % q) as u8);
            code /= q;
        }
        counts.iter_mut().for_each(|c| *c = 0);
        let mut off = 0;
        for (p, &d) in model.potentials().iter().zip(&dims) {
            accumulate_counts(&p.kind, &p.offsets, &img, &mut counts[off..off + d]);
            off += d;
        }
        let log_w = -counts.iter().zip(&theta).map(|(&c, t)| c as f64 * t).sum::<f64>();
        visit(&counts, log_w);
    }
    Ok(cliques)
}

fn log_partition(model: &NestedModel, width: usize, height: usize) -> Result<f64> {
    let mut log_w = Vec::new();
    enumerate_states(model, width, height, |_, l| log_w.push(l))?;
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + log_w.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
}

/// Enumerates all `levels^(w*h)` images of a `w x h` lattice.
pub fn exact_expectations(model: &NestedModel, width: usize, height: usize) -> Result<ExactStats> {
    let log_z = log_partition(model, width, height)?;
    let mut mean = vec![0f64; model.theta_vector().len()];
    let cliques = enumerate_states(model, width, height, |counts, l| {
        let p = (l - log_z).exp();
        for (m, &c) in mean.iter_mut().zip(counts) {
            *m += p * c as f64;
        }
    })?;
    let mut expected = Vec::with_capacity(cliques.len());
    let mut off = 0;
    for (p, &nc) in model.potentials().iter().zip(&cliques) {
        expected.push(mean[off..off + p.bins()].iter().map(|m| m / nc as f64).collect());
        off += p.bins();
    }
    Ok(ExactStats { expected, log_z })
}

/// Exact covariance matrix (row-major) of the clique counts of all
/// parameters; the negative of the log-likelihood Hessian.
pub fn exact_count_covariance(model: &NestedModel, width: usize, height: usize) -> Result<Vec<f64>> {
    let log_z = log_partition(model, width, height)?;
    let n = model.theta_vector().len();
    let mut mean = vec![0f64; n];
    let mut second = vec![0f64; n * n];
    enumerate_states(model, width, height, |counts, l| {
        let p = (l - log_z).exp();
        for i in 0..n {
            if counts[i] == 0 {
                continue;
            }
            let ci = counts[i] as f64;
            mean[i] += p * ci;
            for j in 0..n {
                second[i * n + j] += p * ci * counts[j] as f64;
            }
        }
    })?;
    for i in 0..n {
        for j in 0..n {
            second[i * n + j] -= mean[i] * mean[j];
        }
    }
    Ok(second)
}

/// Exact `ln p(img)` under `model`, enumerating the partition function.
pub fn exact_log_likelihood(model: &NestedModel, img: &GreyImage) -> Result<f64> {
    let stats = exact_expectations(model, img.width(), img.height())?;
    Ok(-model.gibbs_energy(img)? - stats.log_z)
}

/// Brodatz textures of the benchmark with their pre-scaling factors.
pub const BENCHMARK_TEXTURES: [(&str, f64); 4] = [("D6", 0.5), ("D21", 0.75), ("D53", 0.5), ("D77", 0.75)];

pub fn benchmark_scale(texture: &str) -> Option<f64> {
    BENCHMARK_TEXTURES
        .iter()
        .find(|(id, _)| id.eq_ignore_ascii_case(texture))
        .map(|&(_, s)| s)
}

/// Finds `<dir>/<id>.<ext>` for the usual image extensions.
pub fn find_texture(dir: &Path, id: &str) -> Result<PathBuf> {
    for ext in ["png", "pgm", "gif", "tif", "tiff", "bmp"] {
        for name in [id.to_string(), id.to_lowercase()] {
            let p = dir.join(format!("{name}.{ext}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::Unreadable {
        path: dir.join(id),
        reason: "texture asset not found".into(),
    })
}

/// Loads a benchmark texture and applies its pre-scaling.
pub fn load_benchmark_texture(dir: &Path, id: &str) -> Result<GreyImage> {
    let img = load_image(find_texture(dir, id)?)?;
    match benchmark_scale(id) {
        Some(s) => img.resize_bilinear(s),
        None => Ok(img),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub levels: usize,
    pub selectors: Vec<SelectorSpec>,
    pub nest: NestConfig,
    /// Fixed-parameter refinement before inpainting; `sweeps = 0` skips it.
    pub tune: TuneConfig,
    pub reps: usize,
    pub frame: usize,
    pub hole: usize,
    pub inpaint: InpaintConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            selectors: Vec::new(),
            nest: NestConfig {
                marginal: false,
                ..NestConfig::default()
            },
            tune: TuneConfig {
                sweeps: 0,
                ..TuneConfig::default()
            },
            reps: 200,
            frame: 76,
            hole: 54,
            inpaint: InpaintConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRow {
    pub texture: String,
    /// MSSIM over the hole against the quantized ground truth.
    pub mean: f64,
    pub sd: f64,
    /// MSSIM over the hole against the 8-bit ground truth.
    pub mean_raw: f64,
    pub sd_raw: f64,
    /// MSSIM over the whole frame against the quantized ground truth.
    pub mean_frame: f64,
    pub reps: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["texture", "mean_mssim", "sd", "mean_mssim_raw256", "sd_raw256", "mean_mssim_frame", "reps", "seconds"])
            .map_err(to_io)?;
        for r in &self.rows {
            w.write_record([
                r.texture.clone(),
                format!("{:.6}", r.mean),
                format!("{:.6}", r.sd),
                format!("{:.6}", r.mean_raw),
                format!("{:.6}", r.sd_raw),
                format!("{:.6}", r.mean_frame),
                r.reps.to_string(),
                format!("{:.1}", r.seconds),
            ])
            .map_err(to_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let mut s = String::from("texture  MSSIM(Q)        MSSIM(256)      frame   reps  seconds\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8} {:.3} ± {:.3}   {:.3} ± {:.3}   {:.3}  {:>4}  {:>7.1}",
                r.texture, r.mean, r.sd, r.mean_raw, r.sd_raw, r.mean_frame, r.reps, r.seconds
            );
        }
        s
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scores of one inpainted frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameScore {
    pub hole: f64,
    pub hole_raw: f64,
    pub frame: f64,
}

/// Scores `filled` against the quantized and 8-bit ground truth frames.
pub fn score_inpainting(filled: &GreyImage, truth: &GreyImage, truth_raw: &GreyImage, hole: Hole) -> Result<FrameScore> {
    let crop = |img: &GreyImage| img.crop(hole.x, hole.y, hole.width, hole.height);
    let filled_raw = GreyImage::from_pixels(
        filled.width(),
        filled.height(),
        256,
        filled.pixels().iter().map(|&v| rescale_level(v, filled.levels())).collect(),
    )?;
    Ok(FrameScore {
        hole: mssim(&crop(filled)?, &crop(truth)?)?,
        hole_raw: mssim(&crop(&filled_raw)?, &crop(truth_raw)?)?,
        frame: mssim(filled, truth)?,
    })
}

/// Trains on the top half of `texture` (8-bit) at `cfg.levels` and inpaints
/// `cfg.reps` random frames from the bottom half.
pub fn inpaint_benchmark(id: &str, texture: &GreyImage, cfg: &BenchConfig) -> Result<(BenchmarkRow, NestedModel)> {
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one repetition".into()));
    }
    let start = Instant::now();
    let raw = if texture.levels() == 256 { texture.clone() } else { texture.rescaled_to_8bit() };
    let quantized = raw.requantize(cfg.levels)?;
    let (w, h) = (raw.width(), raw.height());
    let top = h / 2;
    if h - top < cfg.frame || w < cfg.frame {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            need_w: cfg.frame,
            need_h: 2 * cfg.frame,
        });
    }
    let hole = Hole::centred(cfg.frame, cfg.frame, cfg.hole, cfg.hole)?;
    let training = quantized.crop(0, 0, w, top)?;
    let nest_cfg = NestConfig {
        seed: cfg.seed,
        ..cfg.nest.clone()
    };
    let mut model = nest(&training, &cfg.selectors, &nest_cfg)?.model;
    if cfg.tune.sweeps > 0 {
        model = tune_parameters(&model, &training, &TuneConfig { seed: cfg.seed ^ 0x5eed, ..cfg.tune.clone() })?;
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let jobs: Vec<(usize, usize, u64)> = (0..cfg.reps)
        .map(|_| {
            (
                master.random_range(0..=w - cfg.frame),
                master.random_range(top..=h - cfg.frame),
                master.random(),
            )
        })
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(x, y, seed)| {
            let truth = quantized.crop(x, y, cfg.frame, cfg.frame)?;
            let truth_raw = raw.crop(x, y, cfg.frame, cfg.frame)?;
            let icfg = InpaintConfig { seed, ..cfg.inpaint.clone() };
            let out = inpaint(&model, &truth, hole, &icfg)?;
            score_inpainting(&out.smoothed, &truth, &truth_raw, hole)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, sd) = mean_sd(&scores.iter().map(|s| s.hole).collect::<Vec<_>>());
    let (mean_raw, sd_raw) = mean_sd(&scores.iter().map(|s| s.hole_raw).collect::<Vec<_>>());
    let (mean_frame, _) = mean_sd(&scores.iter().map(|s| s.frame).collect::<Vec<_>>());
    Ok((
        BenchmarkRow {
            texture: id.to_string(),
            mean,
            sd,
            mean_raw,
            sd_raw,
            mean_frame,
            reps: cfg.reps,
            seconds: start.elapsed().as_secs_f64(),
        },
        model,
    ))
}
