use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvedit::cli::{Command, MeterMode, RunConfig};

/// Background-preserving image editing on a small rectified-flow diffusion
/// transformer.
#[derive(Parser)]
#[command(name = "kvedit", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic shape/color dataset.
    GenData(CommonArgs),
    /// Train the model on the synthetic dataset.
    Train(CommonArgs),
    /// Sample an image from noise under a condition.
    Generate(CommonArgs),
    /// Invert an image, persisting the background KV cache.
    Invert(CommonArgs),
    /// Inversion-based edit with cached background K/V.
    Edit(CommonArgs),
    /// Inversion-free edit with one timestep of cache residency.
    EditInf(CommonArgs),
    /// Reconstruction error by inversion depth.
    ReconCurve(CommonArgs),
    /// Background drift: plain invert-denoise vs cache-backed edit.
    Drift(CommonArgs),
    /// Peak cached floats for retain or stream mode.
    MemReport(CommonArgs),
    /// Region-restricted MSE and PSNR between two images.
    Metrics(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint path.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Input image (.tnsr or .ppm).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Second image for metrics.
    #[arg(long = "image-b")]
    image_b: Option<PathBuf>,
    /// Foreground mask (.pgm, values > 127 are foreground).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Directory holding a persisted inversion (cache.kvch + xtop.tnsr).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Numeric precision: f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Total timesteps of the grid.
    #[arg(long)]
    steps: Option<usize>,
    /// Grid nodes dropped at the noise end.
    #[arg(long)]
    skip: Option<usize>,
    #[arg(long = "guidance-inversion")]
    guidance_inversion: Option<f64>,
    #[arg(long = "guidance-denoise")]
    guidance_denoise: Option<f64>,
    /// Blend the inverted foreground with fresh noise before denoising.
    #[arg(long)]
    reinit: bool,
    /// Block background queries from foreground keys during inversion.
    #[arg(long = "inversion-mask")]
    inversion_mask: bool,
    /// Multiplier (>= 1) on foreground-query/background-key logits.
    #[arg(long = "attention-scale")]
    attention_scale: Option<f64>,
    /// Source condition class.
    #[arg(long = "c-src")]
    c_src: Option<usize>,
    /// Target condition class.
    #[arg(long = "c-tgt")]
    c_tgt: Option<usize>,
    #[arg(long = "train-steps")]
    train_steps: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long = "cond-dropout")]
    cond_dropout: Option<f64>,
    /// Sample count for gen-data / train.
    #[arg(long)]
    count: Option<usize>,
    /// Cache lifecycle for mem-report: retain or stream.
    #[arg(long)]
    mode: Option<String>,
}

fn build_config(command: Command, args: &CommonArgs) -> kvedit::Result<RunConfig> {
    let mut cfg = RunConfig::new(command);
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    macro_rules! merge {
        ($field:ident) => {
            if let Some(v) = &args.$field {
                cfg.$field = v.clone().into();
            }
        };
    }
    merge!(weights);
    merge!(image);
    merge!(image_b);
    merge!(mask);
    merge!(cache);
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(p) = &args.precision {
        cfg.set("precision", p)?;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.skip {
        cfg.skip = v;
    }
    if let Some(v) = args.guidance_inversion {
        cfg.guidance_inversion = v;
    }
    if let Some(v) = args.guidance_denoise {
        cfg.guidance_denoise = v;
    }
    if args.reinit {
        cfg.reinit = true;
    }
    if args.inversion_mask {
        cfg.inversion_mask = true;
    }
    if let Some(v) = args.attention_scale {
        cfg.attention_scale = v;
    }
    if let Some(v) = args.c_src {
        cfg.c_src = v;
    }
    if let Some(v) = args.c_tgt {
        cfg.c_tgt = v;
    }
    if let Some(v) = args.train_steps {
        cfg.train_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.cond_dropout {
        cfg.cond_dropout = v;
    }
    if let Some(v) = args.count {
        cfg.count = v;
    }
    if let Some(m) = &args.mode {
        cfg.mode = match m.as_str() {
            "retain" => MeterMode::Retain,
            "stream" => MeterMode::Stream,
            other => {
                return Err(kvedit::Error::Config(format!(
                    "bad --mode {other:?}, expected retain or stream"
                )))
            }
        };
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Cmd::GenData(a) => (Command::GenData, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Generate(a) => (Command::Generate, a),
        Cmd::Invert(a) => (Command::Invert, a),
        Cmd::Edit(a) => (Command::Edit, a),
        Cmd::EditInf(a) => (Command::EditInf, a),
        Cmd::ReconCurve(a) => (Command::ReconCurve, a),
        Cmd::Drift(a) => (Command::Drift, a),
        Cmd::MemReport(a) => (Command::MemReport, a),
        Cmd::Metrics(a) => (Command::Metrics, a),
    };
    let outcome = build_config(command, args).and_then(|cfg| kvedit::cli::run(&cfg));
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
