//! Inversion-free editing: a walk in t_0 space that noises the source,
//! records background K/V, denoises the foreground against them, and
//! releases the cache before the next step. At most one timestep of cache
//! is ever resident.

use crate::error::{Error, Result};
use crate::kvcache::{CacheMode, KvCache, KvEntry};
use crate::kvedit::{
    composite, partition_tokens, EditConfig, EditLog, PixelMask, StepLog, TokenPartition,
};
use crate::model::{
    detokenize, guided_velocity, tokenize, ConditionId, KvMode, KvStep, ModelWeights, TokenState,
};
use crate::numerics::{add, add_scaled, scale, sub, Rng, Tensor};

/// Everything produced by one inversion-free step.
#[derive(Debug, Clone)]
pub struct InfStepRecord {
    pub timestep: usize,
    /// Fresh noise draw for this step.
    pub noise: Tensor,
    /// Noised source `(1 - t_i) x_0 + t_i noise`.
    pub x_src_t: Tensor,
    /// Source velocity over all tokens.
    pub v_src: Tensor,
    /// Target velocity over foreground rows.
    pub v_fg_target: Tensor,
    /// `v_fg_target - v_src` restricted to foreground rows.
    pub delta: Tensor,
}

/// One step of the inversion-free walk.
///
/// Draws noise, forms the noised source, records background K/V for this
/// timestep, runs the foreground-only target pass against them, and releases
/// the timestep before returning.
#[allow(clippy::too_many_arguments)]
pub fn inf_edit_step(
    x0_tokens: &Tensor,
    z_fg: &Tensor,
    partition: &TokenPartition,
    step: usize,
    c_src: ConditionId,
    c_tgt: ConditionId,
    weights: &ModelWeights,
    cfg: &EditConfig,
    cache: &mut KvCache,
    rng: &mut Rng,
) -> Result<(Tensor, InfStepRecord)> {
    if cache.mode() != CacheMode::Stream {
        return Err(Error::Config(
            "inversion-free editing needs a stream-mode cache".into(),
        ));
    }
    if !cache.is_empty() {
        return Err(Error::Config(format!(
            "stream cache not empty at entry to step {step}: residency violation"
        )));
    }
    let t_i = cfg.grid.node(step);
    let noise = rng.gaussian(x0_tokens.shape().to_vec());
    let x_src_t = add(&scale(x0_tokens, 1.0 - t_i), &scale(&noise, t_i))?;

    // Source pass: full attention, recording background K/V.
    let src_state = TokenState::full(x_src_t.clone(), t_i)?;
    let mode = KvMode::Record {
        partition,
        masked: cfg.inversion_attention_mask,
    };
    let (v_src, record) = guided_velocity(
        &src_state,
        c_src,
        weights,
        cfg.guidance.inversion,
        &mode,
    )?;
    for (j, pair) in record.expect("record mode").into_iter().enumerate() {
        cache.append(KvEntry::new(
            step,
            j,
            partition.bg().to_vec(),
            pair.k,
            pair.v,
        )?)?;
    }

    // Target pass: foreground queries over the just-cached background.
    let drift = sub(&x_src_t, x0_tokens)?;
    let z_tilde = add(z_fg, &drift.select_rows(partition.fg())?)?;
    let z_state = TokenState::foreground(z_tilde, t_i, partition.fg().to_vec())?;
    let mut kv = Vec::with_capacity(weights.config.layers);
    for j in 0..weights.config.layers {
        let entry = cache.get(step, j)?;
        kv.push((&entry.k_bg, &entry.v_bg));
    }
    let inject = KvMode::Inject {
        step: KvStep {
            layers: kv,
            bg_positions: partition.bg(),
        },
        attention_scale: cfg.attention_scale,
    };
    let (v_fg_target, _) = guided_velocity(
        &z_state,
        c_tgt,
        weights,
        cfg.guidance.denoise,
        &inject,
    )?;

    let delta = sub(&v_fg_target, &v_src.select_rows(partition.fg())?)?;
    cache.release_timestep(step);

    let record = InfStepRecord {
        timestep: step,
        noise,
        x_src_t,
        v_src,
        v_fg_target,
        delta: delta.clone(),
    };
    Ok((delta, record))
}

/// The complete inversion-free edit.
pub fn inf_edit(
    image: &Tensor,
    mask: &PixelMask,
    c_src: ConditionId,
    c_tgt: ConditionId,
    weights: &ModelWeights,
    cfg: &EditConfig,
) -> Result<(Tensor, EditLog)> {
    cfg.validate()?;
    if cfg.reinit {
        return Err(Error::Config(
            "reinitialization is unavailable in inversion-free mode".into(),
        ));
    }
    let partition = partition_tokens(mask, &weights.config)?;
    if partition.fg().is_empty() {
        return Ok((image.clone(), EditLog::default()));
    }
    let x0_tokens = tokenize(image, weights)?.tokens;
    let mut z_fg = x0_tokens.select_rows(partition.fg())?;

    let mut cache = KvCache::new(CacheMode::Stream);
    let mut rng = Rng::new(cfg.seed).substream(0x1FED);
    let mut steps = Vec::with_capacity(cfg.grid.steps());
    for step in (1..=cfg.grid.steps()).rev() {
        let (delta, _) = inf_edit_step(
            &x0_tokens,
            &z_fg,
            &partition,
            step,
            c_src,
            c_tgt,
            weights,
            cfg,
            &mut cache,
            &mut rng,
        )?;
        let dt = cfg.grid.node(step - 1) - cfg.grid.node(step);
        z_fg = add_scaled(&z_fg, &delta, dt)?;
        steps.push(StepLog {
            step,
            t: cfg.grid.node(step),
            fg_count: partition.fg().len(),
            cache_hits: weights.config.layers,
            peak_floats: Some(cache.meter().peak_floats()),
        });
    }

    let mut assembled = x0_tokens.clone();
    for (r, &pos) in partition.fg().iter().enumerate() {
        assembled.row_mut(pos).copy_from_slice(z_fg.row(r));
    }
    let generated = detokenize(&TokenState::full(assembled, 0.0)?, weights)?;
    let output = composite(&generated, image, mask)?;
    Ok((
        output,
        EditLog {
            steps,
            peak_floats: cache.meter().peak_floats(),
        },
    ))
}
