//! Rectified-flow time grids, Euler inversion/denoising steps and loops,
//! the DDIM stepper, and the reconstruction-error diagnostic.
//!
//! Inversion evaluates the velocity at the known earlier state (explicit
//! Euler), which is exactly the approximation responsible for cumulative
//! reconstruction error; denoising evaluates at the current state. For a
//! state-independent velocity the two are identical, making the round trip
//! exactly reversible.

use crate::error::{Error, Result};
use crate::model::{
    guided_velocity, tokenize, ConditionId, KvMode, ModelWeights, TokenState,
};
use crate::numerics::{add_scaled, scale, sub, Tensor};

/// Node spacing of the time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Uniform,
}

/// Discrete times t_0 = 0 < t_1 < ... < t_N, with the noise end truncated
/// by `skip` nodes: t_N = (n_total - skip) / n_total.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    n_total: usize,
    skip: usize,
}

impl TimeGrid {
    pub fn new(n_total: usize, skip: usize, kind: ScheduleKind) -> Result<Self> {
        if n_total == 0 {
            return Err(Error::Config("need at least one timestep".into()));
        }
        if skip >= n_total {
            return Err(Error::Config(format!(
                "skip {skip} must be smaller than total steps {n_total}"
            )));
        }
        let ScheduleKind::Uniform = kind;
        let nodes = (0..=n_total - skip)
            .map(|i| i as f64 / n_total as f64)
            .collect();
        Ok(TimeGrid {
            nodes,
            n_total,
            skip,
        })
    }

    /// Effective step count N.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Top node t_N (1.0 when skip = 0).
    pub fn top(&self) -> f64 {
        *self.nodes.last().expect("non-empty grid")
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn skip(&self) -> usize {
        self.skip
    }
}

/// Per-node DDIM schedule coefficients.
#[derive(Debug, Clone)]
pub struct DdimSchedule {
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
}

impl DdimSchedule {
    pub fn new(alpha_bar: Vec<f64>, beta_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() != beta_bar.len() || alpha_bar.is_empty() {
            return Err(Error::Config("schedule lengths must match".into()));
        }
        Ok(DdimSchedule {
            alpha_bar,
            beta_bar,
        })
    }

    /// The straight-path schedule alpha = 1 - t, beta = t over a grid.
    pub fn linear_flow(grid: &TimeGrid) -> Self {
        DdimSchedule {
            alpha_bar: grid.nodes().iter().map(|t| 1.0 - t).collect(),
            beta_bar: grid.nodes().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }
}

/// One DDIM update from node `i` to node `i - 1`:
/// `x' = alpha[i-1] (x - beta[i] eps) / alpha[i] + beta[i-1] eps`.
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    schedule: &DdimSchedule,
    i: usize,
) -> Result<Tensor> {
    if i == 0 || i >= schedule.len() {
        return Err(Error::Config(format!(
            "node index {i} outside schedule of length {}",
            schedule.len()
        )));
    }
    let a_cur = schedule.alpha_bar[i];
    let a_prev = schedule.alpha_bar[i - 1];
    let b_cur = schedule.beta_bar[i];
    let b_prev = schedule.beta_bar[i - 1];
    if a_cur == 0.0 {
        return Err(Error::Numeric(format!(
            "alpha_bar[{i}] = 0 makes the DDIM update undefined"
        )));
    }
    let predicted = scale(&add_scaled(x_t, eps, -b_cur)?, a_prev / a_cur);
    add_scaled(&predicted, eps, b_prev)
}

/// Anything that can produce a velocity for a state at a numbered step.
///
/// `step` is the 1-based step index: inversion step `i` evaluates at node
/// `i - 1`, denoising step `i` evaluates at node `i`.
pub trait VelocityField {
    fn velocity(&mut self, state: &TokenState, step: usize) -> Result<Tensor>;
}

/// State-independent field: every token row moves with the same velocity.
pub struct ConstantField(pub Vec<f64>);

impl VelocityField for ConstantField {
    fn velocity(&mut self, state: &TokenState, _step: usize) -> Result<Tensor> {
        let rows = state.rows();
        let d = self.0.len();
        if state.tokens.cols() != d {
            return Err(Error::shape(
                "ConstantField",
                format!("{} cols vs {d} velocity entries", state.tokens.cols()),
            ));
        }
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(&self.0);
        }
        Tensor::new(vec![rows, d], data)
    }
}

/// Classifier-free guided model velocity with full self-attention.
pub struct GuidedField<'a> {
    pub weights: &'a ModelWeights,
    pub condition: ConditionId,
    pub guidance: f64,
}

impl VelocityField for GuidedField<'_> {
    fn velocity(&mut self, state: &TokenState, _step: usize) -> Result<Tensor> {
        let (v, _) = guided_velocity(
            state,
            self.condition,
            self.weights,
            self.guidance,
            &KvMode::Plain,
        )?;
        Ok(v)
    }
}

/// Euler update to `t_next`: tokens + (t_next - t) * velocity.
pub fn euler_step(state: &TokenState, velocity: &Tensor, t_next: f64) -> Result<TokenState> {
    let dt = t_next - state.t;
    let tokens = add_scaled(&state.tokens, velocity, dt)?;
    Ok(state.with_tokens(tokens, t_next))
}

fn check_on_grid(state: &TokenState, grid: &TimeGrid, node: usize, op: &'static str) -> Result<()> {
    if state.t != grid.node(node) {
        return Err(Error::Config(format!(
            "{op}: state at t = {} is off-grid (expected node {node} = {})",
            state.t,
            grid.node(node)
        )));
    }
    Ok(())
}

/// Inversion step `i`: from node `i - 1` up to node `i`, velocity evaluated
/// at the earlier state.
pub fn invert_step_with(
    state: &TokenState,
    grid: &TimeGrid,
    step: usize,
    field: &mut dyn VelocityField,
) -> Result<TokenState> {
    if step == 0 || step > grid.steps() {
        return Err(Error::Config(format!(
            "inversion step {step} outside 1..={}",
            grid.steps()
        )));
    }
    check_on_grid(state, grid, step - 1, "invert_step")?;
    let v = field.velocity(state, step)?;
    euler_step(state, &v, grid.node(step))
}

/// Denoising step `i`: from node `i` down to node `i - 1`, velocity
/// evaluated at the current state.
pub fn denoise_step_with(
    state: &TokenState,
    grid: &TimeGrid,
    step: usize,
    field: &mut dyn VelocityField,
) -> Result<TokenState> {
    if step == 0 || step > grid.steps() {
        return Err(Error::Config(format!(
            "denoising step {step} outside 1..={}",
            grid.steps()
        )));
    }
    check_on_grid(state, grid, step, "denoise_step")?;
    let v = field.velocity(state, step)?;
    euler_step(state, &v, grid.node(step - 1))
}

/// Model-backed inversion step (full attention, guided).
pub fn invert_step(
    state: &TokenState,
    c: ConditionId,
    weights: &ModelWeights,
    guidance: f64,
    grid: &TimeGrid,
    step: usize,
) -> Result<TokenState> {
    let mut field = GuidedField {
        weights,
        condition: c,
        guidance,
    };
    invert_step_with(state, grid, step, &mut field)
}

/// Model-backed denoising step (full attention, guided).
pub fn denoise_step(
    state: &TokenState,
    c: ConditionId,
    weights: &ModelWeights,
    guidance: f64,
    grid: &TimeGrid,
    step: usize,
) -> Result<TokenState> {
    let mut field = GuidedField {
        weights,
        condition: c,
        guidance,
    };
    denoise_step_with(state, grid, step, &mut field)
}

/// Run all inversion steps from node 0 to node N.
///
/// Returns the whole trajectory (nodes 0..=N) when `record_trajectory`,
/// otherwise just the final state.
pub fn invert_loop(
    start: TokenState,
    grid: &TimeGrid,
    field: &mut dyn VelocityField,
    record_trajectory: bool,
) -> Result<Vec<TokenState>> {
    check_on_grid(&start, grid, 0, "invert_loop")?;
    let mut trajectory = Vec::with_capacity(if record_trajectory {
        grid.steps() + 1
    } else {
        1
    });
    let mut state = start;
    for step in 1..=grid.steps() {
        let next = invert_step_with(&state, grid, step, field)?;
        if record_trajectory {
            trajectory.push(state);
        }
        state = next;
    }
    trajectory.push(state);
    Ok(trajectory)
}

/// Run denoising steps from node `start_node` down to node 0.
pub fn denoise_loop(
    top: TokenState,
    grid: &TimeGrid,
    field: &mut dyn VelocityField,
    start_node: usize,
) -> Result<TokenState> {
    if start_node > grid.steps() {
        return Err(Error::Config(format!(
            "start node {start_node} outside grid of {} steps",
            grid.steps()
        )));
    }
    check_on_grid(&top, grid, start_node, "denoise_loop")?;
    let mut state = top;
    for step in (1..=start_node).rev() {
        state = denoise_step_with(&state, grid, step, field)?;
    }
    Ok(state)
}

/// Invert an image to the grid's top node under a condition.
pub fn invert(
    image: &Tensor,
    c: ConditionId,
    weights: &ModelWeights,
    grid: &TimeGrid,
    guidance: f64,
    record_trajectory: bool,
) -> Result<Vec<TokenState>> {
    let start = tokenize(image, weights)?;
    let mut field = GuidedField {
        weights,
        condition: c,
        guidance,
    };
    invert_loop(start, grid, &mut field, record_trajectory)
}

/// Mean squared difference between two token tensors.
pub fn token_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = sub(a, b)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

/// Reconstruction error by inversion depth: invert the image, then denoise
/// each intermediate state back to node 0 and measure the MSE against the
/// starting state. Depth 0 is exactly zero; error grows with depth as the
/// explicit-Euler mismatch accumulates.
pub fn recon_error_curve(
    image: &Tensor,
    c: ConditionId,
    weights: &ModelWeights,
    grid: &TimeGrid,
) -> Result<Vec<(usize, f64)>> {
    let trajectory = invert(image, c, weights, grid, 1.0, true)?;
    let mut curve = Vec::with_capacity(trajectory.len());
    for (depth, state) in trajectory.iter().enumerate() {
        let mut field = GuidedField {
            weights,
            condition: c,
            guidance: 1.0,
        };
        let back = denoise_loop(state.clone(), grid, &mut field, depth)?;
        curve.push((depth, token_mse(&back.tokens, &trajectory[0].tokens)?));
    }
    Ok(curve)
}

/// Background drift comparison: how much the background changes under a
/// plain invert-then-denoise with a new condition, versus the cache-backed
/// edit on the same inputs.
///
/// Returns `(bg_mse_vanilla, bg_mse_kvedit)` over the unmasked region. The
/// cache-backed branch composites background pixels from the source, so its
/// value is exactly zero.
pub fn drift_experiment(
    image: &Tensor,
    mask: &crate::kvedit::PixelMask,
    c_src: ConditionId,
    c_tgt: ConditionId,
    weights: &ModelWeights,
    grid: &TimeGrid,
    guidance: &crate::model::GuidanceConfig,
) -> Result<(f64, f64)> {
    let bg_region = mask.invert();
    if bg_region.count_ones() == 0 {
        return Err(Error::Config(
            "drift experiment needs a non-empty background region".into(),
        ));
    }

    // Vanilla: the whole image goes through inversion and denoising.
    let trajectory = invert(image, c_src, weights, grid, guidance.inversion, false)?;
    let top = trajectory.into_iter().next_back().expect("non-empty");
    let mut field = GuidedField {
        weights,
        condition: c_tgt,
        guidance: guidance.denoise,
    };
    let z0 = denoise_loop(top, grid, &mut field, grid.steps())?;
    let vanilla = crate::model::detokenize(&z0, weights)?;
    let bg_mse_vanilla = crate::metrics::mse(&vanilla, image, Some(&bg_region))?;

    let cfg = crate::kvedit::EditConfig {
        grid: grid.clone(),
        guidance: *guidance,
        ..crate::kvedit::EditConfig::default()
    };
    let (edited, _) = crate::kvedit::edit(image, mask, c_src, c_tgt, weights, &cfg)?;
    let bg_mse_kvedit = crate::metrics::mse(&edited, image, Some(&bg_region))?;

    Ok((bg_mse_vanilla, bg_mse_kvedit))
}
