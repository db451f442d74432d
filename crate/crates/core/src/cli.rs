//! Command implementations behind the `kvedit` binary: configuration
//! merging, artifact writing, and one-line summaries.
//!
//! Every command is deterministic under a fixed configuration and seed, and
//! writes its artifacts into the `--out` directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{self, ScheduleKind, TimeGrid};
use crate::imageio;
use crate::kvcache::KvCache;
use crate::kvedit::{self, EditConfig, PixelMask};
use crate::metrics::RegionMetricReport;
use crate::model::{ConditionId, GuidanceConfig, ModelConfig, ModelWeights, TokenState};
use crate::numerics::{set_precision, Precision, Rng, Tensor};
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Generate,
    Invert,
    Edit,
    EditInf,
    ReconCurve,
    Drift,
    MemReport,
    Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeterMode {
    Retain,
    Stream,
}

/// Fully-resolved run configuration. Every field has a default; a flat
/// `key = value` file can override defaults, and command-line flags override
/// the file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub weights: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub image_b: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub precision: Precision,
    pub steps: usize,
    pub skip: usize,
    pub guidance_inversion: f64,
    pub guidance_denoise: f64,
    pub reinit: bool,
    pub inversion_mask: bool,
    pub attention_scale: f64,
    pub c_src: usize,
    pub c_tgt: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_dropout: f64,
    pub count: usize,
    pub mode: MeterMode,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig {
            command,
            weights: None,
            image: None,
            image_b: None,
            mask: None,
            cache: None,
            out: PathBuf::from("out"),
            seed: 0,
            precision: Precision::F32,
            steps: 28,
            skip: 4,
            guidance_inversion: 1.5,
            guidance_denoise: 5.5,
            reinit: false,
            inversion_mask: false,
            attention_scale: 1.0,
            c_src: 0,
            c_tgt: 0,
            train_steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            cond_dropout: 0.1,
            count: 512,
            mode: MeterMode::Stream,
        }
    }

    /// Apply one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for key {what}"));
        match key {
            "weights" => self.weights = Some(PathBuf::from(value)),
            "image" => self.image = Some(PathBuf::from(value)),
            "image-b" => self.image_b = Some(PathBuf::from(value)),
            "mask" => self.mask = Some(PathBuf::from(value)),
            "cache" => self.cache = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key)),
                }
            }
            "steps" => self.steps = value.parse().map_err(|_| bad(key))?,
            "skip" => self.skip = value.parse().map_err(|_| bad(key))?,
            "guidance-inversion" => {
                self.guidance_inversion = value.parse().map_err(|_| bad(key))?
            }
            "guidance-denoise" => self.guidance_denoise = value.parse().map_err(|_| bad(key))?,
            "reinit" => self.reinit = value.parse().map_err(|_| bad(key))?,
            "inversion-mask" => self.inversion_mask = value.parse().map_err(|_| bad(key))?,
            "attention-scale" => self.attention_scale = value.parse().map_err(|_| bad(key))?,
            "c-src" => self.c_src = value.parse().map_err(|_| bad(key))?,
            "c-tgt" => self.c_tgt = value.parse().map_err(|_| bad(key))?,
            "train-steps" => self.train_steps = value.parse().map_err(|_| bad(key))?,
            "batch-size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "learning-rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "cond-dropout" => self.cond_dropout = value.parse().map_err(|_| bad(key))?,
            "count" => self.count = value.parse().map_err(|_| bad(key))?,
            "mode" => {
                self.mode = match value {
                    "retain" => MeterMode::Retain,
                    "stream" => MeterMode::Stream,
                    _ => return Err(bad(key)),
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Merge a flat `key = value` file (comments with `#`, blank lines ok).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected key = value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.steps, self.skip, ScheduleKind::Uniform)
    }

    fn edit_config(&self) -> Result<EditConfig> {
        let cfg = EditConfig {
            grid: self.grid()?,
            guidance: GuidanceConfig {
                inversion: self.guidance_inversion,
                denoise: self.guidance_denoise,
            },
            reinit: self.reinit,
            inversion_attention_mask: self.inversion_mask,
            attention_scale: self.attention_scale,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn need(&self, field: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        field
            .clone()
            .ok_or_else(|| Error::Config(format!("missing required --{flag}")))
    }

    fn load_weights(&self) -> Result<ModelWeights> {
        ModelWeights::load(&self.need(&self.weights, "weights")?)
    }

    fn load_image(&self) -> Result<Tensor> {
        imageio::read_image(&self.need(&self.image, "image")?)
    }

    fn load_mask(&self) -> Result<PixelMask> {
        imageio::read_pgm_mask(&self.need(&self.mask, "mask")?)
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Execute one command; returns the one-line summary to print.
pub fn run(cfg: &RunConfig) -> Result<String> {
    set_precision(cfg.precision);
    ensure_out(&cfg.out)?;
    match cfg.command {
        Command::GenData => cmd_gen_data(cfg),
        Command::Train => cmd_train(cfg),
        Command::Generate => cmd_generate(cfg),
        Command::Invert => cmd_invert(cfg),
        Command::Edit => cmd_edit(cfg),
        Command::EditInf => cmd_edit_inf(cfg),
        Command::ReconCurve => cmd_recon_curve(cfg),
        Command::Drift => cmd_drift(cfg),
        Command::MemReport => cmd_mem_report(cfg),
        Command::Metrics => cmd_metrics(cfg),
    }
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<String> {
    let model_cfg = ModelConfig::default();
    let data = train::gen_dataset(cfg.seed, cfg.count, &model_cfg)?;
    let mut labels = String::from("index,condition\n");
    for s in &data {
        let path = cfg.out.join(format!("sample_{:04}.tnsr", s.index));
        s.image.save_tnsr(&path)?;
        writeln!(labels, "{},{}", s.index, s.condition.0).expect("string write");
    }
    // A couple of quantized previews for eyeballing.
    for s in data.iter().take(4) {
        imageio::write_ppm(&s.image, &cfg.out.join(format!("sample_{:04}.ppm", s.index)))?;
    }
    write_text(&cfg.out.join("labels.csv"), &labels)?;
    Ok(format!(
        "gen-data: wrote {} samples (seed {}) to {}",
        data.len(),
        cfg.seed,
        cfg.out.display()
    ))
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let model_cfg = ModelConfig::default();
    let tcfg = TrainConfig {
        steps: cfg.train_steps,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        cond_dropout: cfg.cond_dropout,
        seed: cfg.seed,
    };
    let data = train::gen_dataset(cfg.seed, cfg.count, &model_cfg)?;
    let (weights, losses) = train::train(&model_cfg, &tcfg, &data)?;
    let ckpt = cfg.out.join("model.ckpt");
    weights.save(&ckpt)?;
    let mut log = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(log, "{i},{l}").expect("string write");
    }
    write_text(&cfg.out.join("train_log.csv"), &log)?;
    let first = losses.first().copied().unwrap_or(0.0);
    let last = losses.last().copied().unwrap_or(0.0);
    Ok(format!(
        "train: {} steps, loss {first:.4} -> {last:.4}, checkpoint {}",
        losses.len(),
        ckpt.display()
    ))
}

fn cmd_generate(cfg: &RunConfig) -> Result<String> {
    let weights = cfg.load_weights()?;
    let model_cfg = &weights.config;
    // Generation starts from pure noise at t = 1, so the grid has no skip.
    let grid = TimeGrid::new(cfg.steps, 0, ScheduleKind::Uniform)?;
    let mut rng = Rng::new(cfg.seed).substream(0x6E4);
    let noise = rng.gaussian(vec![model_cfg.tokens(), model_cfg.token_dim]);
    let top = TokenState::full(noise, 1.0)?;
    let mut field = flow::GuidedField {
        weights: &weights,
        condition: ConditionId(cfg.c_src),
        guidance: cfg.guidance_denoise,
    };
    let z0 = flow::denoise_loop(top, &grid, &mut field, grid.steps())?;
    let image = crate::model::detokenize(&z0, &weights)?;
    if !image.all_finite() {
        return Err(Error::Numeric("generated image is not finite".into()));
    }
    image.save_tnsr(&cfg.out.join("generate.tnsr"))?;
    imageio::write_ppm(&image, &cfg.out.join("generate.ppm"))?;
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    Ok(format!(
        "generate: condition {} seed {} range [{lo:.3}, {hi:.3}] -> {}",
        cfg.c_src,
        cfg.seed,
        cfg.out.display()
    ))
}

fn cmd_invert(cfg: &RunConfig) -> Result<String> {
    let weights = cfg.load_weights()?;
    let image = cfg.load_image()?;
    let mask = cfg.load_mask()?;
    let ecfg = cfg.edit_config()?;
    let (x_top, cache) = kvedit::invert_with_cache(
        &image,
        &mask,
        ConditionId(cfg.c_src),
        &weights,
        &ecfg,
    )?;
    cache.persist(&cfg.out.join("cache.kvch"))?;
    x_top.tokens.save_tnsr(&cfg.out.join("xtop.tnsr"))?;
    Ok(format!(
        "invert: {} cache entries, {} floats resident, t_N = {} -> {}",
        cache.len(),
        cache.meter().current_floats(),
        x_top.t,
        cfg.out.display()
    ))
}

fn cmd_edit(cfg: &RunConfig) -> Result<String> {
    let weights = cfg.load_weights()?;
    let image = cfg.load_image()?;
    let mask = cfg.load_mask()?;
    let ecfg = cfg.edit_config()?;
    let (output, log) = match &cfg.cache {
        Some(dir) => {
            let cache = KvCache::load(&dir.join("cache.kvch"))?;
            let tokens = Tensor::load_tnsr(&dir.join("xtop.tnsr"))?;
            let x_top = TokenState::full(tokens, ecfg.grid.top())?;
            kvedit::edit_from_cache(
                &image,
                &mask,
                ConditionId(cfg.c_tgt),
                &weights,
                &ecfg,
                &x_top,
                &cache,
            )?
        }
        None => kvedit::edit(
            &image,
            &mask,
            ConditionId(cfg.c_src),
            ConditionId(cfg.c_tgt),
            &weights,
            &ecfg,
        )?,
    };
    output.save_tnsr(&cfg.out.join("edit.tnsr"))?;
    imageio::write_ppm(&output, &cfg.out.join("edit.ppm"))?;
    write_text(&cfg.out.join("edit.jsonl"), &log.to_jsonl())?;
    let report = RegionMetricReport::compute(&output, &image, &mask)?;
    Ok(format!(
        "edit: {} -> {} ({} steps, bg mse {}, peak {} floats) -> {}",
        cfg.c_src,
        cfg.c_tgt,
        log.steps.len(),
        report.mse_bg,
        log.peak_floats,
        cfg.out.display()
    ))
}

fn cmd_edit_inf(cfg: &RunConfig) -> Result<String> {
    let weights = cfg.load_weights()?;
    let image = cfg.load_image()?;
    let mask = cfg.load_mask()?;
    let ecfg = cfg.edit_config()?;
    let (output, log) = crate::infedit::inf_edit(
        &image,
        &mask,
        ConditionId(cfg.c_src),
        ConditionId(cfg.c_tgt),
        &weights,
        &ecfg,
    )?;
    output.save_tnsr(&cfg.out.join("edit_inf.tnsr"))?;
    imageio::write_ppm(&output, &cfg.out.join("edit_inf.ppm"))?;
    write_text(&cfg.out.join("edit_inf.jsonl"), &log.to_jsonl())?;
    let report = RegionMetricReport::compute(&output, &image, &mask)?;
    Ok(format!(
        "edit-inf: {} -> {} ({} steps, bg mse {}, peak {} floats) -> {}",
        cfg.c_src,
        cfg.c_tgt,
        log.steps.len(),
        report.mse_bg,
        log.peak_floats,
        cfg.out.display()
    ))
}

fn cmd_recon_curve(cfg: &RunConfig) -> Result<String> {
    let weights = cfg.load_weights()?;
    let image = cfg.load_image()?;
    let grid = cfg.grid()?;
    let curve = flow::recon_error_curve(&image, ConditionId(cfg.c_src), &weights, &grid)?;
    let mut csv = String::from("depth,mse\n");
    for (depth, mse) in &curve {
        writeln!(csv, "{depth},{mse}").expect("string write");
    }
    write_text(&cfg.out.join("curve.csv"), &csv)?;
    let last = curve.last().expect("non-empty curve");
    Ok(format!(
        "recon-curve: {} depths, mse(0) = {}, mse({}) = {} -> {}",
        curve.len(),
        curve[0].1,
        last.0,
        last.1,
        cfg.out.display()
    ))
}

fn cmd_drift(cfg: &RunConfig) -> Result<String> {
    let weights = cfg.load_weights()?;
    let image = cfg.load_image()?;
    let mask = cfg.load_mask()?;
    let grid = cfg.grid()?;
    let guidance = GuidanceConfig {
        inversion: cfg.guidance_inversion,
        denoise: cfg.guidance_denoise,
    };
    let (vanilla, kv) = flow::drift_experiment(
        &image,
        &mask,
        ConditionId(cfg.c_src),
        ConditionId(cfg.c_tgt),
        &weights,
        &grid,
        &guidance,
    )?;
    let csv = format!("variant,bg_mse\nvanilla,{vanilla}\nkvedit,{kv}\n");
    write_text(&cfg.out.join("drift.csv"), &csv)?;
    Ok(format!(
        "drift: vanilla bg mse {vanilla}, cache-backed bg mse {kv} -> {}",
        cfg.out.display()
    ))
}

fn cmd_mem_report(cfg: &RunConfig) -> Result<String> {
    let weights = cfg.load_weights()?;
    let image = cfg.load_image()?;
    let mask = cfg.load_mask()?;
    let ecfg = cfg.edit_config()?;
    let (mode, peak) = match cfg.mode {
        MeterMode::Retain => {
            let (_, cache) = kvedit::invert_with_cache(
                &image,
                &mask,
                ConditionId(cfg.c_src),
                &weights,
                &ecfg,
            )?;
            ("retain", cache.meter().peak_floats())
        }
        MeterMode::Stream => {
            let (_, log) = crate::infedit::inf_edit(
                &image,
                &mask,
                ConditionId(cfg.c_src),
                ConditionId(cfg.c_tgt),
                &weights,
                &ecfg,
            )?;
            ("stream", log.peak_floats)
        }
    };
    let csv = format!("mode,steps,peak_floats\n{mode},{},{peak}\n", ecfg.grid.steps());
    write_text(&cfg.out.join("mem.csv"), &csv)?;
    Ok(format!(
        "mem-report: mode {mode}, {} steps, peak_floats {peak} -> {}",
        ecfg.grid.steps(),
        cfg.out.display()
    ))
}

fn cmd_metrics(cfg: &RunConfig) -> Result<String> {
    let a = cfg.load_image()?;
    let b = imageio::read_image(&cfg.need(&cfg.image_b, "image-b")?)?;
    let mask = match &cfg.mask {
        Some(path) => imageio::read_pgm_mask(path)?,
        None => PixelMask::zeros(a.shape()[1], a.shape()[2]),
    };
    let report = RegionMetricReport::compute(&a, &b, &mask)?;
    let csv = format!("{}\n{}\n", RegionMetricReport::csv_header(), report.csv_row());
    write_text(&cfg.out.join("metrics.csv"), &csv)?;
    Ok(format!(
        "metrics: full mse {} psnr {:.2} dB, bg mse {} -> {}",
        report.mse_full,
        report.psnr_full,
        report.mse_bg,
        cfg.out.display()
    ))
}
