//! Command implementations behind the `mgrf` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;

use mgrf::eval::{inpaint_benchmark, load_benchmark_texture, mssim, BenchmarkReport};
use mgrf::image::{clahe_quantize, load_image, save_image};
use mgrf::learning::{nest, write_log_csv};
use mgrf::sampling::{inpaint, synthesize, Hole};
use mgrf::{GreyImage, NestedModel, OffsetList};

pub use config::RunConfig;

/// Failure category; decides the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(anyhow::Error),
    /// Anything that went wrong while running (exit 2).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<mgrf::Error> for CliError {
    fn from(e: mgrf::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage<T>(r: anyhow::Result<T>) -> CliResult<T> {
    r.map_err(CliError::Usage)
}

/// Loads `path` (if any) and applies `key=value` overrides, TOML-typed.
/// Values that do not parse as TOML are taken as strings.
pub fn resolve_config(path: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if overrides.is_empty() {
        base.validate()?;
        return Ok(base);
    }
    let mut table: toml::Table = toml::from_str(&base.to_toml())?;
    for (key, raw) in overrides {
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.clone()),
        };
        table.insert(key.clone(), value);
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .with_context(|| "invalid override".to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads, rescales and quantizes an 8-bit image as configured.
pub fn preprocess(path: &Path, cfg: &RunConfig) -> anyhow::Result<GreyImage> {
    let mut img = load_image(path).with_context(|| format!("cannot load training image {}", path.display()))?;
    if cfg.scale != 1.0 {
        img = img.resize_bilinear(cfg.scale)?;
    }
    quantize(&img, cfg)
}

fn quantize(img: &GreyImage, cfg: &RunConfig) -> anyhow::Result<GreyImage> {
    Ok(match cfg.quantize.as_str() {
        "clahe" => clahe_quantize(img, cfg.levels, cfg.clahe())?,
        _ => img.requantize(cfg.levels)?,
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub struct TrainOutput {
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    pub model: NestedModel,
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutput> {
    let training = cfg
        .training
        .as_deref()
        .ok_or_else(|| CliError::Usage(anyhow::anyhow!("no training image given")))?;
    let selectors = usage(cfg.selector_specs())?;
    let nest_cfg = usage(cfg.nest_config())?;
    let img = preprocess(training, cfg)?;
    let outcome = nest(&img, &selectors, &nest_cfg).context("nesting failed")?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    cfg.write_resolved(dir)?;
    let model_path = dir.join("model.txt");
    outcome.model.save(&model_path)?;
    let log_path = dir.join("train_log.csv");
    let f = File::create(&log_path).with_context(|| format!("cannot write {}", log_path.display()))?;
    write_log_csv(&outcome.log, BufWriter::new(f))?;
    save_image(&img, dir.join("training.png"), true)?;
    Ok(TrainOutput {
        model_path,
        log_path,
        model: outcome.model,
    })
}

fn load_model(cfg: &RunConfig) -> CliResult<NestedModel> {
    let path = cfg
        .model
        .as_deref()
        .ok_or_else(|| CliError::Usage(anyhow::anyhow!("no model file given")))?;
    Ok(NestedModel::load(path).with_context(|| format!("cannot load model {}", path.display()))?)
}

/// Synthesizes a texture; a configured training image supplies the seed piece.
pub fn cmd_synth(cfg: &RunConfig, output: Option<&Path>) -> CliResult<PathBuf> {
    let model = load_model(cfg)?;
    let training = match cfg.training.as_deref() {
        Some(p) => Some(preprocess(p, cfg)?),
        None => None,
    };
    if let Some(t) = &training {
        if t.levels() != model.levels() {
            return Err(CliError::Usage(anyhow::anyhow!(
                "training image quantized to {} levels but the model has {}",
                t.levels(),
                model.levels()
            )));
        }
    }
    let img = synthesize(&model, training.as_ref(), &cfg.synth_config()).context("synthesis failed")?;
    create_dir(&cfg.output_dir)?;
    cfg.write_resolved(&cfg.output_dir)?;
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("synth.png"));
    save_image(&img, &path, true)?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InpaintScores {
    pub hole_raw_sample: f64,
    pub hole_smoothed: f64,
    pub frame_smoothed: f64,
}

/// Inpaints the centre hole of a single frame cut from the middle of `frame`.
pub fn cmd_inpaint(cfg: &RunConfig, frame: &Path) -> CliResult<InpaintScores> {
    usage(cfg.validate())?;
    let model = load_model(cfg)?;
    let img = load_image(frame).with_context(|| format!("cannot load frame {}", frame.display()))?;
    if img.width() < cfg.frame || img.height() < cfg.frame {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "image {}x{} is smaller than the {}x{} frame",
            img.width(),
            img.height(),
            cfg.frame,
            cfg.frame
        )));
    }
    let (x, y) = ((img.width() - cfg.frame) / 2, (img.height() - cfg.frame) / 2);
    let raw = img.crop(x, y, cfg.frame, cfg.frame)?;
    let cfg_q = RunConfig {
        levels: model.levels(),
        ..cfg.clone()
    };
    let truth = quantize(&raw, &cfg_q)?;
    let hole = Hole::centred(cfg.frame, cfg.frame, cfg.hole, cfg.hole).map_err(|e| CliError::Usage(e.into()))?;
    let out = inpaint(&model, &truth, hole, &cfg.inpaint_config()).context("inpainting failed")?;
    let hole_score = |filled: &GreyImage| -> anyhow::Result<f64> {
        Ok(mssim(
            &filled.crop(hole.x, hole.y, hole.width, hole.height)?,
            &truth.crop(hole.x, hole.y, hole.width, hole.height)?,
        )?)
    };
    let scores = InpaintScores {
        hole_raw_sample: hole_score(&out.raw)?,
        hole_smoothed: hole_score(&out.smoothed)?,
        frame_smoothed: mssim(&out.smoothed, &truth)?,
    };
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    cfg.write_resolved(dir)?;
    let mut masked = truth.clone();
    for yy in hole.y..hole.y + hole.height {
        for xx in hole.x..hole.x + hole.width {
            masked.set(xx, yy, 0);
        }
    }
    save_image(&truth, dir.join("frame.png"), true)?;
    save_image(&masked, dir.join("masked.png"), true)?;
    save_image(&out.raw, dir.join("inpainted_raw.png"), true)?;
    save_image(&out.smoothed, dir.join("inpainted_smoothed.png"), true)?;
    let text = format!(
        "mssim_hole_raw\t{:.6}\nmssim_hole_smoothed\t{:.6}\nmssim_frame_smoothed\t{:.6}\n",
        scores.hole_raw_sample, scores.hole_smoothed, scores.frame_smoothed
    );
    std::fs::write(dir.join("scores.tsv"), text).context("cannot write scores")?;
    Ok(scores)
}

/// Runs the inpainting benchmark over `cfg.textures`.
pub fn cmd_bench(cfg: &RunConfig) -> CliResult<BenchmarkReport> {
    let bench = usage(cfg.bench_config())?;
    if cfg.textures.is_empty() {
        return Err(CliError::Usage(anyhow::anyhow!("no textures configured")));
    }
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    cfg.write_resolved(dir)?;
    let mut report = BenchmarkReport::default();
    for id in &cfg.textures {
        let texture = load_benchmark_texture(&cfg.texture_dir, id)
            .with_context(|| format!("texture {id} in {}", cfg.texture_dir.display()))?;
        let (row, model) = inpaint_benchmark(id, &texture, &bench).with_context(|| format!("benchmark on {id}"))?;
        model.save(dir.join(format!("model-{id}.txt")))?;
        eprintln!("{id}: {:.3} ± {:.3} ({:.0}s)", row.mean, row.sd, row.seconds);
        report.rows.push(row);
    }
    let csv = dir.join("bench.csv");
    let f = File::create(&csv).with_context(|| format!("cannot write {}", csv.display()))?;
    report.write_csv(BufWriter::new(f))?;
    Ok(report)
}

/// ASCII map of a clique shape: `O` is the anchor, `#` the other pixels.
pub fn offset_map(offsets: &OffsetList) -> String {
    let (x0, x1, y0, y1) = offsets.bounds();
    let (x0, x1, y0, y1) = (x0.min(0), x1.max(0), y0.min(0), y1.max(0));
    let mut out = String::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let c = if x == 0 && y == 0 {
                'O'
            } else if offsets.iter().any(|o| o.dx == x && o.dy == y) {
                '#'
            } else {
                '.'
            };
            out.push(c);
        }
        out.push('\n');
    }
    out
}

/// Human-readable listing of a model's potentials.
pub fn describe_model(model: &NestedModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "levels {}  potentials {}", model.levels(), model.len());
    for (i, p) in model.potentials().iter().enumerate() {
        let peak = p.theta.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        let _ = writeln!(
            out,
            "\n#{i} {} arity {} bins {} iteration {} max|theta| {:.3}\n  offsets {}",
            p.kind,
            p.offsets.arity(),
            p.bins(),
            p.iteration,
            peak,
            p.offsets
        );
        for line in offset_map(&p.offsets).lines() {
            let _ = writeln!(out, "  {line}");
        }
    }
    out
}

pub fn cmd_inspect(cfg: &RunConfig) -> CliResult<String> {
    let model = load_model(cfg)?;
    Ok(describe_model(&model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_map_marks_anchor() {
        let m = offset_map(&OffsetList::pair(2, -1));
        assert_eq!(m, "..#\nO..\n");
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = resolve_config(
            None,
            &[
                ("levels".into(), "4".into()),
                ("mode".into(), "max-min".into()),
                ("selectors".into(), "[\"gld2\", \"bp5\"]".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.levels, 4);
        assert_eq!(cfg.mode, "max-min");
        assert_eq!(cfg.selectors.len(), 2);
        assert!(resolve_config(None, &[("nope".into(), "1".into())]).is_err());
    }
}
