//! Mask-driven editing: token partitioning, decoupled attention, the
//! cache-backed edit pipeline, and pixel-exact compositing.
//!
//! Queries are restricted to foreground tokens while keys and values span
//! the full sequence (cached background rows plus fresh foreground rows in
//! their original order). Final images always take background pixels
//! directly from the source, so the background is bit-exact no matter what
//! the model does.

use crate::error::{Error, Result};
use crate::flow::{denoise_loop, invert_loop, ScheduleKind, TimeGrid, VelocityField};
use crate::kvcache::{CacheMode, KvCache, KvEntry};
use crate::model::{
    detokenize, guided_velocity, tokenize, ConditionId, GuidanceConfig, KvMode, KvStep,
    ModelConfig, ModelWeights, TokenState,
};
use crate::numerics::{matmul, scale, softmax_rows, transpose, Rng, Tensor};

/// Binary H x W mask; 1 marks the foreground (edit) region.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                "PixelMask::new",
                format!("{height}x{width} mask wants {} entries", height * width),
            ));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Config("mask entries must be 0 or 1".into()));
        }
        Ok(PixelMask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        PixelMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = if v > 0 { 1 } else { 0 };
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Complement mask (1 where this mask is 0).
    pub fn invert(&self) -> PixelMask {
        PixelMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }
}

/// Disjoint foreground/background token index sets covering `0..P`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPartition {
    fg: Vec<usize>,
    bg: Vec<usize>,
    total: usize,
}

impl TokenPartition {
    pub fn new(fg: Vec<usize>, bg: Vec<usize>, total: usize) -> Result<Self> {
        let p = TokenPartition { fg, bg, total };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.total];
        for set in [&self.fg, &self.bg] {
            let mut prev = None;
            for &i in set.iter() {
                if i >= self.total {
                    return Err(Error::shape(
                        "TokenPartition",
                        format!("index {i} out of range {}", self.total),
                    ));
                }
                if let Some(p) = prev {
                    if i <= p {
                        return Err(Error::Config(
                            "partition indices must be strictly increasing".into(),
                        ));
                    }
                }
                if seen[i] {
                    return Err(Error::Config(format!("token {i} in both partitions")));
                }
                seen[i] = true;
                prev = Some(i);
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Config("partition does not cover all tokens".into()));
        }
        Ok(())
    }

    pub fn fg(&self) -> &[usize] {
        &self.fg
    }

    pub fn bg(&self) -> &[usize] {
        &self.bg
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_fg(&self, token: usize) -> bool {
        self.fg.binary_search(&token).is_ok()
    }
}

/// Split tokens by mask coverage: a token is foreground iff any pixel of its
/// patch is masked.
pub fn partition_tokens(mask: &PixelMask, config: &ModelConfig) -> Result<TokenPartition> {
    if mask.height() != config.image_size || mask.width() != config.image_size {
        return Err(Error::shape(
            "partition_tokens",
            format!(
                "mask {}x{} vs image {}",
                mask.height(),
                mask.width(),
                config.image_size
            ),
        ));
    }
    let ps = config.patch_size;
    let grid = config.image_size / ps;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for py in 0..grid {
        for px in 0..grid {
            let token = py * grid + px;
            let mut any = false;
            'scan: for dy in 0..ps {
                for dx in 0..ps {
                    if mask.get(py * ps + dy, px * ps + dx) == 1 {
                        any = true;
                        break 'scan;
                    }
                }
            }
            if any {
                fg.push(token);
            } else {
                bg.push(token);
            }
        }
    }
    TokenPartition::new(fg, bg, grid * grid)
}

/// Scatter cached background rows and fresh foreground rows back into their
/// original token order.
///
/// Rejects any gap or overlap in the combined position sets.
pub fn assemble_rows(
    bg_positions: &[usize],
    bg_rows: &Tensor,
    fg_positions: &[usize],
    fg_rows: &Tensor,
    total: usize,
) -> Result<Tensor> {
    if bg_rows.rows() != bg_positions.len() || fg_rows.rows() != fg_positions.len() {
        return Err(Error::shape(
            "assemble_rows",
            format!(
                "row counts {}/{} do not match position counts {}/{}",
                bg_rows.rows(),
                fg_rows.rows(),
                bg_positions.len(),
                fg_positions.len()
            ),
        ));
    }
    let d = if bg_positions.is_empty() {
        fg_rows.cols()
    } else {
        bg_rows.cols()
    };
    if !fg_positions.is_empty() && fg_rows.cols() != d {
        return Err(Error::shape("assemble_rows", "column widths disagree"));
    }
    let mut filled = vec![false; total];
    let mut out = Tensor::zeros(vec![total, d]);
    for (slot, (positions, rows)) in [(bg_positions, bg_rows), (fg_positions, fg_rows)]
        .into_iter()
        .enumerate()
    {
        let _ = slot;
        for (r, &pos) in positions.iter().enumerate() {
            if pos >= total {
                return Err(Error::shape(
                    "assemble_rows",
                    format!("position {pos} out of range {total}"),
                ));
            }
            if filled[pos] {
                return Err(Error::Config(format!(
                    "assemble_rows: position {pos} assigned twice"
                )));
            }
            filled[pos] = true;
            out.row_mut(pos).copy_from_slice(rows.row(r));
        }
    }
    if let Some(gap) = filled.iter().position(|&f| !f) {
        return Err(Error::Config(format!(
            "assemble_rows: no row for position {gap}"
        )));
    }
    Ok(out)
}

/// Attention with queries restricted to foreground rows over fully-assembled
/// keys and values: `softmax(Q_fg K^T / sqrt(d)) V`.
pub fn decoupled_attention(q_fg: &Tensor, k_full: &Tensor, v_full: &Tensor) -> Result<Tensor> {
    if k_full.rows() != v_full.rows() {
        return Err(Error::shape(
            "decoupled_attention",
            format!("K rows {} vs V rows {}", k_full.rows(), v_full.rows()),
        ));
    }
    if q_fg.cols() != k_full.cols() {
        return Err(Error::shape(
            "decoupled_attention",
            format!("Q width {} vs K width {}", q_fg.cols(), k_full.cols()),
        ));
    }
    let d = q_fg.cols() as f64;
    let logits = scale(&matmul(q_fg, &transpose(k_full)?)?, 1.0 / d.sqrt());
    let weights = softmax_rows(&logits)?;
    matmul(&weights, v_full)
}

/// Block background queries from foreground keys: entries (q in bg, k in fg)
/// are set to `-inf` before softmax. Logit rows/columns are in token order.
pub fn apply_inversion_attention_mask(logits: &Tensor, partition: &TokenPartition) -> Tensor {
    let mut out = logits.clone();
    let n = logits.cols();
    for &q in partition.bg() {
        for &k in partition.fg() {
            out.data_mut()[q * n + k] = f64::NEG_INFINITY;
        }
    }
    out
}

/// Strengthen background context for foreground queries: entries
/// (q in fg, k in bg) are multiplied by `s` before softmax. Logit rows
/// correspond to the foreground set in order; columns are in token order.
pub fn apply_attention_scale(logits: &Tensor, bg_columns: &[usize], s: f64) -> Tensor {
    if s == 1.0 {
        return logits.clone();
    }
    let mut out = logits.clone();
    let n = logits.cols();
    for q in 0..logits.rows() {
        for &k in bg_columns {
            let v = out.data()[q * n + k];
            out.data_mut()[q * n + k] = crate::numerics::quantize(v * s);
        }
    }
    out
}

/// Knobs of one edit session.
#[derive(Debug, Clone)]
pub struct EditConfig {
    pub grid: TimeGrid,
    pub guidance: GuidanceConfig,
    /// Blend the inverted foreground with fresh noise before denoising.
    pub reinit: bool,
    /// Block background queries from foreground keys during inversion.
    pub inversion_attention_mask: bool,
    /// Multiplier (>= 1) on foreground-query/background-key logits.
    pub attention_scale: f64,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            grid: TimeGrid::new(28, 4, ScheduleKind::Uniform).expect("valid default grid"),
            guidance: GuidanceConfig::default(),
            reinit: false,
            inversion_attention_mask: false,
            attention_scale: 1.0,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.attention_scale < 1.0 {
            return Err(Error::Config(format!(
                "attention scale {} must be >= 1",
                self.attention_scale
            )));
        }
        Ok(())
    }
}

/// One denoising step in the JSON-lines run log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub t: f64,
    pub fg_count: usize,
    pub cache_hits: usize,
    /// Peak cached floats so far; reported by the inversion-free variant.
    pub peak_floats: Option<usize>,
}

impl StepLog {
    pub fn to_json(&self) -> String {
        match self.peak_floats {
            Some(p) => format!(
                "{{\"step\":{},\"t\":{},\"fg_count\":{},\"cache_hits\":{},\"peak_floats\":{}}}",
                self.step, self.t, self.fg_count, self.cache_hits, p
            ),
            None => format!(
                "{{\"step\":{},\"t\":{},\"fg_count\":{},\"cache_hits\":{}}}",
                self.step, self.t, self.fg_count, self.cache_hits
            ),
        }
    }
}

/// Per-edit run log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditLog {
    pub steps: Vec<StepLog>,
    pub peak_floats: usize,
}

impl EditLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&s.to_json());
            out.push('\n');
        }
        out
    }
}

/// Velocity field that records background K/V into a cache at every step.
struct RecordingField<'a> {
    weights: &'a ModelWeights,
    condition: ConditionId,
    guidance: f64,
    partition: &'a TokenPartition,
    masked: bool,
    cache: &'a mut KvCache,
}

impl VelocityField for RecordingField<'_> {
    fn velocity(&mut self, state: &TokenState, step: usize) -> Result<Tensor> {
        let mode = KvMode::Record {
            partition: self.partition,
            masked: self.masked,
        };
        let (v, record) = guided_velocity(state, self.condition, self.weights, self.guidance, &mode)?;
        let record = record.expect("record mode returns kv");
        for (j, pair) in record.into_iter().enumerate() {
            self.cache.append(KvEntry::new(
                step,
                j,
                self.partition.bg().to_vec(),
                pair.k,
                pair.v,
            )?)?;
        }
        Ok(v)
    }
}

/// Velocity field that injects cached background K/V, queries restricted to
/// the foreground subsequence.
struct InjectField<'a> {
    weights: &'a ModelWeights,
    condition: ConditionId,
    guidance: f64,
    cache: &'a KvCache,
    attention_scale: f64,
    log: Option<&'a mut Vec<StepLog>>,
}

impl VelocityField for InjectField<'_> {
    fn velocity(&mut self, state: &TokenState, step: usize) -> Result<Tensor> {
        let layers = self.weights.config.layers;
        let mut kv = Vec::with_capacity(layers);
        let mut bg_positions: Option<&[usize]> = None;
        for j in 0..layers {
            let entry = self.cache.get(step, j)?;
            match bg_positions {
                None => bg_positions = Some(&entry.bg_positions),
                Some(prev) if prev != entry.bg_positions.as_slice() => {
                    return Err(Error::Config(format!(
                        "cache entry ({step},{j}) disagrees on background positions"
                    )));
                }
                _ => {}
            }
            kv.push((&entry.k_bg, &entry.v_bg));
        }
        let step_kv = KvStep {
            layers: kv,
            bg_positions: bg_positions.unwrap_or(&[]),
        };
        let mode = KvMode::Inject {
            step: step_kv,
            attention_scale: self.attention_scale,
        };
        let (v, _) = guided_velocity(state, self.condition, self.weights, self.guidance, &mode)?;
        if let Some(log) = self.log.as_deref_mut() {
            log.push(StepLog {
                step,
                t: state.t,
                fg_count: state.rows(),
                cache_hits: layers,
                peak_floats: None,
            });
        }
        Ok(v)
    }
}

/// Invert an image while caching background K/V for every (timestep, layer).
pub fn invert_with_cache(
    image: &Tensor,
    mask: &PixelMask,
    c_src: ConditionId,
    weights: &ModelWeights,
    cfg: &EditConfig,
) -> Result<(TokenState, KvCache)> {
    let partition = partition_tokens(mask, &weights.config)?;
    let start = tokenize(image, weights)?;
    invert_tokens_with_cache(start, &partition, c_src, weights, cfg)
}

/// Token-level inversion with caching, for callers that already hold a
/// token state (node 0) and a partition.
pub fn invert_tokens_with_cache(
    start: TokenState,
    partition: &TokenPartition,
    c_src: ConditionId,
    weights: &ModelWeights,
    cfg: &EditConfig,
) -> Result<(TokenState, KvCache)> {
    cfg.validate()?;
    let mut cache = KvCache::new(CacheMode::Retain);
    let mut field = RecordingField {
        weights,
        condition: c_src,
        guidance: cfg.guidance.inversion,
        partition,
        masked: cfg.inversion_attention_mask,
        cache: &mut cache,
    };
    let trajectory = invert_loop(start, &cfg.grid, &mut field, false)?;
    let top = trajectory.into_iter().next_back().expect("non-empty");
    Ok((top, cache))
}

/// Blend a state with fresh Gaussian noise: `noise * t_n + z * (1 - t_n)`.
pub fn reinitialize(state: &TokenState, t_n: f64, rng: &mut Rng) -> Result<TokenState> {
    if !(0.0..=1.0).contains(&t_n) {
        return Err(Error::Config(format!("t_n {t_n} outside [0,1]")));
    }
    let noise = rng.gaussian(state.tokens.shape().to_vec());
    let blended = crate::numerics::add(
        &scale(&noise, t_n),
        &scale(&state.tokens, 1.0 - t_n),
    )?;
    Ok(state.with_tokens(blended, state.t))
}

/// Denoise a foreground subsequence from the grid top down to node 0,
/// injecting cached background K/V at every (timestep, layer).
pub fn denoise_foreground(
    z_fg: TokenState,
    cache: &KvCache,
    c_tgt: ConditionId,
    weights: &ModelWeights,
    cfg: &EditConfig,
) -> Result<(TokenState, Vec<StepLog>)> {
    cfg.validate()?;
    let mut steps = Vec::new();
    let out = {
        let mut field = InjectField {
            weights,
            condition: c_tgt,
            guidance: cfg.guidance.denoise,
            cache,
            attention_scale: cfg.attention_scale,
            log: Some(&mut steps),
        };
        denoise_loop(z_fg, &cfg.grid, &mut field, cfg.grid.steps())?
    };
    Ok((out, steps))
}

/// Pixel-level selection: source pixels where the mask is 0, generated
/// pixels where it is 1. The background is bit-exact by construction.
pub fn composite(generated: &Tensor, original: &Tensor, mask: &PixelMask) -> Result<Tensor> {
    if generated.shape() != original.shape() {
        return Err(Error::shape(
            "composite",
            format!("{:?} vs {:?}", generated.shape(), original.shape()),
        ));
    }
    if generated.shape().len() != 3
        || mask.height() != generated.shape()[1]
        || mask.width() != generated.shape()[2]
    {
        return Err(Error::shape(
            "composite",
            format!(
                "mask {}x{} vs image {:?}",
                mask.height(),
                mask.width(),
                generated.shape()
            ),
        ));
    }
    let (c, h, w) = (
        generated.shape()[0],
        generated.shape()[1],
        generated.shape()[2],
    );
    let mut out = original.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 1 {
                for ch in 0..c {
                    let idx = ch * h * w + y * w + x;
                    out.data_mut()[idx] = generated.data()[idx];
                }
            }
        }
    }
    Ok(out)
}

/// Complete an edit from an existing inversion: seed the foreground from the
/// inverted state, denoise it against the cache, and composite.
pub fn edit_from_cache(
    image: &Tensor,
    mask: &PixelMask,
    c_tgt: ConditionId,
    weights: &ModelWeights,
    cfg: &EditConfig,
    x_top: &TokenState,
    cache: &KvCache,
) -> Result<(Tensor, EditLog)> {
    cfg.validate()?;
    let partition = partition_tokens(mask, &weights.config)?;
    if partition.fg().is_empty() {
        return Ok((image.clone(), EditLog::default()));
    }
    let fg_tokens = x_top.tokens.select_rows(partition.fg())?;
    let mut z_fg = TokenState::foreground(fg_tokens, x_top.t, partition.fg().to_vec())?;
    if cfg.reinit {
        let mut rng = Rng::new(cfg.seed).substream(0x5EED);
        z_fg = reinitialize(&z_fg, cfg.grid.top(), &mut rng)?;
    }
    let (z0_fg, steps) = denoise_foreground(z_fg, cache, c_tgt, weights, cfg)?;

    // Scatter the generated foreground rows into the source tokens, decode,
    // then select generated pixels through the mask.
    let x0_tokens = tokenize(image, weights)?;
    let mut assembled = x0_tokens.tokens.clone();
    for (r, &pos) in partition.fg().iter().enumerate() {
        assembled.row_mut(pos).copy_from_slice(z0_fg.tokens.row(r));
    }
    let generated = detokenize(&TokenState::full(assembled, 0.0)?, weights)?;
    let output = composite(&generated, image, mask)?;
    let log = EditLog {
        steps,
        peak_floats: cache.meter().peak_floats(),
    };
    Ok((output, log))
}

/// The full inversion-based edit: partition, invert with caching, optional
/// reinitialization, foreground-only denoising, pixel compositing.
pub fn edit(
    image: &Tensor,
    mask: &PixelMask,
    c_src: ConditionId,
    c_tgt: ConditionId,
    weights: &ModelWeights,
    cfg: &EditConfig,
) -> Result<(Tensor, EditLog)> {
    cfg.validate()?;
    let partition = partition_tokens(mask, &weights.config)?;
    if partition.fg().is_empty() {
        // Nothing to edit; the model is never queried.
        return Ok((image.clone(), EditLog::default()));
    }
    let (x_top, cache) = invert_with_cache(image, mask, c_src, weights, cfg)?;
    edit_from_cache(image, mask, c_tgt, weights, cfg, &x_top, &cache)
}
