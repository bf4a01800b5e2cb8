//! Flat run configuration shared by every subcommand.
//!
//! Values come from built-in defaults, then an optional TOML file, then
//! command-line flags. Unknown keys are rejected. The resolved values are
//! written next to each command's outputs as `config.toml`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use mgrf::eval::BenchConfig;
use mgrf::image::ClaheParams;
use mgrf::learning::{NestConfig, SelectionMode, SelectorFamily, SelectorSpec, TuneConfig};
use mgrf::sampling::{InpaintConfig, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Inputs and outputs.
    pub training: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub output_dir: PathBuf,

    // Preprocessing.
    pub levels: usize,
    /// `clahe` or `uniform`.
    pub quantize: String,
    pub clahe_tile: usize,
    pub clahe_clip: f64,
    /// Bilinear pre-scaling of the input image.
    pub scale: f64,

    // Nesting.
    pub selectors: Vec<String>,
    pub iterations: usize,
    /// Per-selector add counts; empty means each family's default.
    pub add_counts: Vec<usize>,
    /// `plain`, `max-min` or `soft-min`.
    pub mode: String,
    pub alpha: f64,
    pub marginal: bool,
    pub csa_runs: usize,
    pub csa_sweeps: usize,
    pub sample_size: usize,
    pub piece_size: usize,
    pub piece_overlap: usize,
    pub smoothing: f64,
    pub max_radius: f64,
    pub seed: u64,

    // Synthesis.
    pub synth_width: usize,
    pub synth_height: usize,
    pub synth_sweeps: usize,
    pub seed_size: usize,
    pub freeze_theta: bool,

    // Inpainting and benchmark.
    pub frame: usize,
    pub hole: usize,
    pub inpaint_sweeps: usize,
    pub smooth_window: usize,
    pub reps: usize,
    pub tune_sweeps: usize,
    pub texture_dir: PathBuf,
    pub textures: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let nest = NestConfig::default();
        let synth = SynthConfig::default();
        let inpaint = InpaintConfig::default();
        let bench = BenchConfig::default();
        Self {
            training: None,
            model: None,
            output_dir: PathBuf::from("out"),
            levels: 8,
            quantize: "clahe".into(),
            clahe_tile: ClaheParams::default().tile,
            clahe_clip: ClaheParams::default().clip,
            scale: 1.0,
            selectors: vec!["gld2".into()],
            iterations: mgrf::learning::DEFAULT_ITERATIONS,
            add_counts: Vec::new(),
            mode: nest.mode.to_string(),
            alpha: mgrf::learning::DEFAULT_SOFTMIN_ALPHA,
            marginal: nest.marginal,
            csa_runs: nest.csa_runs,
            csa_sweeps: nest.csa_sweeps,
            sample_size: nest.sample_size,
            piece_size: nest.piece_size,
            piece_overlap: nest.piece_overlap,
            smoothing: nest.smoothing,
            max_radius: nest.max_radius,
            seed: 0,
            synth_width: synth.width,
            synth_height: synth.height,
            synth_sweeps: synth.sweeps,
            seed_size: synth.seed_size,
            freeze_theta: synth.freeze_theta,
            frame: bench.frame,
            hole: bench.hole,
            inpaint_sweeps: inpaint.sweeps,
            smooth_window: inpaint.smooth_window,
            reps: bench.reps,
            tune_sweeps: bench.tune.sweeps,
            texture_dir: PathBuf::from("textures"),
            textures: mgrf::eval::BENCHMARK_TEXTURES.iter().map(|(id, _)| id.to_string()).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn selection_mode(&self) -> anyhow::Result<SelectionMode> {
        let mode: SelectionMode = self.mode.parse().map_err(anyhow::Error::msg)?;
        Ok(match mode {
            SelectionMode::SoftMin { .. } if self.mode == "soft-min" || self.mode == "softmin" => {
                if !(self.alpha > 0.0) {
                    bail!("alpha must be positive");
                }
                SelectionMode::SoftMin { alpha: self.alpha }
            }
            m => m,
        })
    }

    pub fn selector_specs(&self) -> anyhow::Result<Vec<SelectorSpec>> {
        if !self.add_counts.is_empty() && self.add_counts.len() != self.selectors.len() {
            bail!(
                "add_counts has {} entries but there are {} selectors",
                self.add_counts.len(),
                self.selectors.len()
            );
        }
        self.selectors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let family: SelectorFamily = s.parse().map_err(anyhow::Error::msg)?;
                let mut spec = SelectorSpec::new(family);
                spec.iterations = self.iterations;
                if let Some(&n) = self.add_counts.get(i) {
                    spec.add_count = n;
                }
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }

    pub fn nest_config(&self) -> anyhow::Result<NestConfig> {
        Ok(NestConfig {
            marginal: self.marginal,
            mode: self.selection_mode()?,
            csa_runs: self.csa_runs,
            csa_sweeps: self.csa_sweeps,
            sample_size: self.sample_size,
            piece_size: self.piece_size,
            piece_overlap: self.piece_overlap,
            smoothing: self.smoothing,
            max_radius: self.max_radius,
            seed: self.seed,
        })
    }

    pub fn clahe(&self) -> ClaheParams {
        ClaheParams {
            tile: self.clahe_tile,
            clip: self.clahe_clip,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            width: self.synth_width,
            height: self.synth_height,
            sweeps: self.synth_sweeps,
            seed_size: self.seed_size,
            freeze_theta: self.freeze_theta,
            seed: self.seed,
        }
    }

    pub fn inpaint_config(&self) -> InpaintConfig {
        InpaintConfig {
            sweeps: self.inpaint_sweeps,
            smooth_window: self.smooth_window,
            seed: self.seed,
        }
    }

    pub fn bench_config(&self) -> anyhow::Result<BenchConfig> {
        Ok(BenchConfig {
            levels: self.levels,
            selectors: self.selector_specs()?,
            nest: self.nest_config()?,
            tune: TuneConfig {
                sweeps: self.tune_sweeps,
                seed: self.seed,
                ..TuneConfig::default()
            },
            reps: self.reps,
            frame: self.frame,
            hole: self.hole,
            inpaint: self.inpaint_config(),
            seed: self.seed,
        })
    }

    /// Sanity checks shared by all commands.
    pub fn validate(&self) -> anyhow::Result<()> {
        if !(2..=256).contains(&self.levels) {
            bail!("levels must be in 2..=256, got {}", self.levels);
        }
        if !matches!(self.quantize.as_str(), "clahe" | "uniform") {
            bail!("quantize must be `clahe` or `uniform`, got `{}`", self.quantize);
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            bail!("scale must be positive");
        }
        if self.hole > self.frame {
            bail!("hole {0}x{0} does not fit in a {1}x{1} frame", self.hole, self.frame);
        }
        self.selector_specs()?;
        self.selection_mode()?;
        Ok(())
    }
}
