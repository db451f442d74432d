//! Rectified-flow training on a procedurally generated, class-conditioned
//! dataset, with condition dropout for classifier-free guidance and a
//! finite-difference gradient oracle.

mod backward;

pub use backward::Gradients;

use crate::error::{Error, Result};
use crate::model::{
    forward_with_tape, tokenize, ConditionId, ModelConfig, ModelWeights,
};
use crate::numerics::{add, quantize, scale, sub, Precision, Rng, Tensor};

/// One rendered training image: a colored shape on a solid background.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub index: usize,
    pub image: Tensor,
    pub condition: ConditionId,
    pub params: GenParams,
}

/// Generator parameters kept for reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    pub shape: ShapeKind,
    pub color: usize,
    pub center_x: f64,
    pub center_y: f64,
    pub half_size: f64,
    pub background: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
}

const PALETTE: [[f64; 3]; 4] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.35, 0.95],
    [0.95, 0.90, 0.15],
];

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!(
                "condition dropout {} outside [0,1)",
                self.cond_dropout
            )));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch size must be > 0".into()));
        }
        Ok(())
    }
}

/// Render `count` samples, each deterministic from `(seed, index)`.
///
/// The class pairs a shape with a palette color; position, size, and the
/// solid background vary freely.
pub fn gen_dataset(seed: u64, count: usize, config: &ModelConfig) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    config.validate()?;
    if config.num_conditions != 8 || config.channels != 3 {
        return Err(Error::Config(
            "the shape/color generator renders 8 classes over 3 channels".into(),
        ));
    }
    let n = config.image_size;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = Rng::new(seed).substream(index as u64);
        let condition = rng.below(config.num_conditions);
        let shape = if condition < 4 {
            ShapeKind::Circle
        } else {
            ShapeKind::Square
        };
        let color = condition % 4;
        let background = [
            rng.range(0.0, 0.45),
            rng.range(0.0, 0.45),
            rng.range(0.0, 0.45),
        ];
        let half_size = rng.range(n as f64 * 0.15, n as f64 * 0.3);
        let center_x = rng.range(half_size, n as f64 - half_size);
        let center_y = rng.range(half_size, n as f64 - half_size);

        let mut data = vec![0.0; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 + 0.5 - center_x;
                let dy = y as f64 + 0.5 - center_y;
                let inside = match shape {
                    ShapeKind::Circle => dx * dx + dy * dy <= half_size * half_size,
                    ShapeKind::Square => dx.abs() <= half_size && dy.abs() <= half_size,
                };
                for ch in 0..3 {
                    let v = if inside {
                        PALETTE[color][ch]
                    } else {
                        background[ch]
                    };
                    data[ch * n * n + y * n + x] = quantize(v);
                }
            }
        }
        out.push(SyntheticSample {
            index,
            image: Tensor::new(vec![3, n, n], data)?,
            condition: ConditionId(condition),
            params: GenParams {
                shape,
                color,
                center_x,
                center_y,
                half_size,
                background,
            },
        });
    }
    Ok(out)
}

/// Straight-path interpolation `(1 - t) x0 + t eps`.
pub(crate) fn blend(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    add(&scale(x0, 1.0 - t), &scale(eps, t))
}

struct ItemDraw {
    t: f64,
    eps: Tensor,
    cond: ConditionId,
}

/// Per-item draws bound to the sample index, so the loss is invariant to
/// batch order.
fn draw_for(
    sample: &SyntheticSample,
    noise: &Rng,
    dropout: f64,
    config: &ModelConfig,
) -> ItemDraw {
    let mut rng = noise.substream(sample.index as u64);
    let t = rng.uniform();
    let dropped = rng.uniform() < dropout;
    let eps = rng.gaussian(vec![config.tokens(), config.token_dim]);
    ItemDraw {
        t,
        eps,
        cond: if dropped {
            ConditionId(config.null_condition())
        } else {
            sample.condition
        },
    }
}

/// Rectified-flow loss over a batch: sample `t`, noise the tokenized image
/// along the straight path, and regress the predicted velocity onto
/// `eps - x0`. Conditions drop to null with probability `dropout`.
pub fn rf_loss(
    batch: &[SyntheticSample],
    weights: &ModelWeights,
    noise: &Rng,
    dropout: f64,
) -> Result<f64> {
    rf_loss_inner(batch, weights, noise, dropout, false).map(|(l, _)| l)
}

/// Loss plus parameter gradients.
pub fn rf_loss_grad(
    batch: &[SyntheticSample],
    weights: &ModelWeights,
    noise: &Rng,
    dropout: f64,
) -> Result<(f64, Gradients)> {
    let (loss, grads) = rf_loss_inner(batch, weights, noise, dropout, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

fn rf_loss_inner(
    batch: &[SyntheticSample],
    weights: &ModelWeights,
    noise: &Rng,
    dropout: f64,
    want_grads: bool,
) -> Result<(f64, Option<Gradients>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let config = &weights.config;
    let per_item = (config.tokens() * config.token_dim) as f64;
    let mut grads = want_grads.then(|| Gradients::zeros_like(weights));
    let mut total = 0.0;

    for sample in batch {
        let draw = draw_for(sample, noise, dropout, config);
        let x0 = tokenize(&sample.image, weights)?.tokens;
        let x_t = blend(&x0, &draw.eps, draw.t)?;
        let target = sub(&draw.eps, &x0)?;
        let state = crate::model::TokenState::full(x_t, draw.t)?;

        if let Some(grads) = grads.as_mut() {
            let (vel, tape) = forward_with_tape(&state, draw.cond, weights, )?;
            let residual = sub(&vel, &target)?;
            total += residual.data().iter().map(|v| v * v).sum::<f64>() / per_item;
            // d(loss)/d(vel), with the 1/(batch * P * d) reduction baked in.
            let g_vel = scale(&residual, 2.0 / (batch.len() as f64 * per_item));
            let g_input = backward::backward(&tape, &g_vel, weights, grads)?;
            // The positional embedding also enters through x_t = (1-t) x0 + t eps
            // and through the target eps - x0.
            let g_pos = add(&scale(&g_input, 1.0 - draw.t), &g_vel)?;
            grads.accumulate("pos_embed", &g_pos)?;
        } else {
            let (vel, _) = crate::model::forward_velocity(
                &state,
                draw.cond,
                weights,
                &crate::model::KvMode::Plain,
            )?;
            let residual = sub(&vel, &target)?;
            total += residual.data().iter().map(|v| v * v).sum::<f64>() / per_item;
        }
    }
    Ok((total / batch.len() as f64, grads))
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(weights: &ModelWeights) -> AdamState {
        let mut m = Vec::new();
        weights.visit_params(|_, t| m.push(Tensor::zeros(t.shape().to_vec())));
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

/// One optimizer update in place.
pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) {
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let mut idx = 0;
    weights.visit_params_mut(|_, w| {
        let g = &grads.tensors()[idx];
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..w.len() {
            let gi = g.data()[i];
            let mi = quantize(ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi);
            let vi = quantize(ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi);
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
            w.data_mut()[i] = quantize(w.data()[i] - update);
        }
        idx += 1;
    });
}

/// One training step: loss, gradients, optimizer update.
pub fn train_step(
    weights: &mut ModelWeights,
    batch: &[SyntheticSample],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let noise = Rng::new(cfg.seed).substream(0x7EA1).substream(state.step as u64);
    let (loss, grads) = rf_loss_grad(batch, weights, &noise, cfg.cond_dropout)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss or gradients at optimizer step {}",
            state.step
        )));
    }
    adam_step(weights, &grads, state, cfg.learning_rate);
    Ok(loss)
}

/// Full training loop over a dataset, batches taken round-robin.
/// Returns the trained weights and the per-step loss log.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[SyntheticSample],
) -> Result<(ModelWeights, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut weights = ModelWeights::init(model_cfg, cfg.seed)?;
    let mut state = AdamState::new(&weights);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        for i in 0..cfg.batch_size {
            batch.push(dataset[(step * cfg.batch_size + i) % dataset.len()].clone());
        }
        let loss = train_step(&mut weights, &batch, &mut state, cfg)?;
        losses.push(loss);
        let _ = step;
    }
    Ok((weights, losses))
}

/// Compare analytic gradients against central finite differences on `count`
/// randomly chosen weight coordinates. Requires 64-bit precision; intended
/// for small models (2 layers, token dim <= 16).
pub fn grad_check(
    weights: &ModelWeights,
    batch: &[SyntheticSample],
    count: usize,
    seed: u64,
) -> Result<f64> {
    if crate::numerics::precision() != Precision::F64 {
        return Err(Error::Config(
            "gradient checks require 64-bit precision".into(),
        ));
    }
    const FD_STEP: f64 = 1e-5;
    let noise = Rng::new(seed).substream(0xFD);
    let (_, grads) = rf_loss_grad(batch, weights, &noise, 0.0)?;

    let sizes: Vec<usize> = grads.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut pick = Rng::new(seed).substream(0xC0);
    let mut max_rel: f64 = 0.0;
    for _ in 0..count {
        let mut flat = pick.below(total);
        let mut param_idx = 0;
        while flat >= sizes[param_idx] {
            flat -= sizes[param_idx];
            param_idx += 1;
        }

        let analytic = grads.tensors()[param_idx].data()[flat];
        let lp = loss_at(&perturbed(weights, param_idx, flat, FD_STEP), batch, &noise)?;
        let lm = loss_at(&perturbed(weights, param_idx, flat, -FD_STEP), batch, &noise)?;
        let numeric = (lp - lm) / (2.0 * FD_STEP);

        let rel = if (analytic - numeric).abs() < 1e-10 {
            0.0
        } else {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
        };
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn loss_at(weights: &ModelWeights, batch: &[SyntheticSample], noise: &Rng) -> Result<f64> {
    rf_loss(batch, weights, noise, 0.0)
}

fn perturbed(weights: &ModelWeights, param_idx: usize, offset: usize, delta: f64) -> ModelWeights {
    let mut w = weights.clone();
    let mut i = 0;
    w.visit_params_mut(|_, t| {
        if i == param_idx {
            t.data_mut()[offset] += delta;
        }
        i += 1;
    });
    w
}
