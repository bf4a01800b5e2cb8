use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mgrf_cli::{
    cmd_bench, cmd_inpaint, cmd_inspect, cmd_synth, cmd_train, resolve_config, usage, CliError, CliResult, RunConfig,
};

/// Learn, sample and evaluate nested Markov-Gibbs texture models.
#[derive(Parser, Debug)]
#[command(name = "mgrf", version)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MGRF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any configuration key, e.g. `--set levels=16`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a nested model from a training image.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training image (8-bit greyscale).
        #[arg(short, long)]
        training: Option<PathBuf>,
    },
    /// Synthesize a texture from a model.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        model: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        sweeps: Option<usize>,
        /// Output image (default: <output_dir>/synth.png).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fill a square hole in the centre of a frame.
    Inpaint {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        model: Option<PathBuf>,
        /// Image to cut the frame from.
        #[arg(long)]
        frame_image: PathBuf,
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long)]
        hole: Option<usize>,
        #[arg(long)]
        sweeps: Option<usize>,
        /// Window of the running average; 0 disables smoothing.
        #[arg(long)]
        smooth_window: Option<usize>,
    },
    /// Run the inpainting benchmark.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        texture_dir: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Print a model's potentials with ASCII clique maps.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(short, long)]
        model: Option<PathBuf>,
    },
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn toml_str(p: &std::path::Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

/// Config file, then `--set` pairs, then dedicated flags.
fn resolve(common: &Common, mut extra: Vec<(String, String)>) -> CliResult<RunConfig> {
    let mut overrides = common.set.clone();
    if let Some(d) = &common.output_dir {
        overrides.push(kv("output_dir", toml_str(d)));
    }
    if let Some(s) = common.seed {
        overrides.push(kv("seed", s));
    }
    overrides.append(&mut extra);
    usage(resolve_config(common.config.as_deref(), &overrides))
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.into()))?;
    }
    match cli.command {
        Command::Train { common, training } => {
            let extra = training.iter().map(|t| kv("training", toml_str(t))).collect();
            let cfg = resolve(&common, extra)?;
            let out = cmd_train(&cfg)?;
            println!(
                "wrote {} ({} potentials) and {}",
                out.model_path.display(),
                out.model.len(),
                out.log_path.display()
            );
        }
        Command::Synth {
            common,
            model,
            width,
            height,
            sweeps,
            out,
        } => {
            let mut extra = Vec::new();
            extra.extend(model.iter().map(|m| kv("model", toml_str(m))));
            extra.extend(width.map(|v| kv("synth_width", v)));
            extra.extend(height.map(|v| kv("synth_height", v)));
            extra.extend(sweeps.map(|v| kv("synth_sweeps", v)));
            let cfg = resolve(&common, extra)?;
            let path = cmd_synth(&cfg, out.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Inpaint {
            common,
            model,
            frame_image,
            frame,
            hole,
            sweeps,
            smooth_window,
        } => {
            let mut extra = Vec::new();
            extra.extend(model.iter().map(|m| kv("model", toml_str(m))));
            extra.extend(frame.map(|v| kv("frame", v)));
            extra.extend(hole.map(|v| kv("hole", v)));
            extra.extend(sweeps.map(|v| kv("inpaint_sweeps", v)));
            extra.extend(smooth_window.map(|v| kv("smooth_window", v)));
            let cfg = resolve(&common, extra)?;
            let s = cmd_inpaint(&cfg, &frame_image)?;
            println!(
                "MSSIM hole (raw sample) {:.4}\nMSSIM hole (smoothed)   {:.4}\nMSSIM frame (smoothed)  {:.4}",
                s.hole_raw_sample, s.hole_smoothed, s.frame_smoothed
            );
        }
        Command::Bench {
            common,
            texture_dir,
            reps,
        } => {
            let mut extra = Vec::new();
            extra.extend(texture_dir.iter().map(|d| kv("texture_dir", toml_str(d))));
            extra.extend(reps.map(|v| kv("reps", v)));
            let cfg = resolve(&common, extra)?;
            let report = cmd_bench(&cfg)?;
            print!("{}", report.table());
        }
        Command::Inspect { common, model } => {
            let extra = model.iter().map(|m| kv("model", toml_str(m))).collect();
            let cfg = resolve(&common, extra)?;
            print!("{}", cmd_inspect(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
