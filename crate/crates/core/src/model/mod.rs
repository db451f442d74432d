//! The small diffusion transformer predicting token-space velocities:
//! patch tokenization, attention blocks with recordable/injectable key-value
//! pairs, time/condition modulation, and classifier-free guidance.

mod checkpoint;
mod forward;

pub use forward::{
    forward_velocity, forward_with_tape, guided_velocity, KvMode, KvPair, KvRecord, KvStep, Tape,
};

use crate::error::{Error, Result};
use crate::numerics::{matmul, quantize, sub, Rng, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Real condition classes; one extra null condition is reserved.
    pub num_conditions: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 16,
            channels: 3,
            patch_size: 4,
            token_dim: 64,
            layers: 4,
            heads: 4,
            num_conditions: 8,
            mlp_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.tokens() == 0 {
            return Err(Error::Config("zero tokens".into()));
        }
        if self.num_conditions == 0 {
            return Err(Error::Config("need at least one condition".into()));
        }
        Ok(())
    }

    /// Token count P.
    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.heads
    }

    /// Id of the reserved null condition.
    pub fn null_condition(&self) -> usize {
        self.num_conditions
    }
}

/// Class condition; `num_conditions` is the reserved null condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConditionId(pub usize);

impl ConditionId {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.0 > config.num_conditions {
            return Err(Error::Config(format!(
                "condition {} out of range 0..={}",
                self.0,
                config.num_conditions
            )));
        }
        Ok(())
    }
}

/// Guidance strengths for the two process directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub inversion: f64,
    pub denoise: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            inversion: 1.5,
            denoise: 5.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inversion < 0.0 || self.denoise < 0.0 {
            return Err(Error::Config("guidance values must be >= 0".into()));
        }
        Ok(())
    }
}

/// A token sequence at a point on the time axis.
///
/// `positions` is present for foreground subsequences and maps rows to their
/// original token indices (strictly increasing).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    pub tokens: Tensor,
    pub t: f64,
    pub positions: Option<Vec<usize>>,
}

impl TokenState {
    pub fn full(tokens: Tensor, t: f64) -> Result<Self> {
        let s = TokenState {
            tokens,
            t,
            positions: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn foreground(tokens: Tensor, t: f64, positions: Vec<usize>) -> Result<Self> {
        let s = TokenState {
            tokens,
            t,
            positions: Some(positions),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Config(format!("time {} outside [0,1]", self.t)));
        }
        if let Some(pos) = &self.positions {
            if pos.len() != self.tokens.rows() {
                return Err(Error::shape(
                    "TokenState",
                    format!("{} positions vs {} rows", pos.len(), self.tokens.rows()),
                ));
            }
            if pos.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(
                    "token positions must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.tokens.rows()
    }

    pub fn with_tokens(&self, tokens: Tensor, t: f64) -> TokenState {
        TokenState {
            tokens,
            t,
            positions: self.positions.clone(),
        }
    }
}

/// Per-layer transformer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub gain_attn: Tensor,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub gain_mlp: Tensor,
    pub w_mlp1: Tensor,
    pub b_mlp1: Tensor,
    pub w_mlp2: Tensor,
    pub b_mlp2: Tensor,
    /// Modulation head: d -> 6d (shift/scale/gate for both sublayers).
    pub w_mod: Tensor,
    pub b_mod: Tensor,
}

/// All model parameters.
///
/// The patch embedding is a fixed isometry (orthonormal rows) when
/// `token_dim >= patch_dim`, so its transpose decodes tokens back to pixels
/// exactly; it is excluded from training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub patch_embed: Tensor,
    pub pos_embed: Tensor,
    pub cond_embed: Tensor,
    pub w_time1: Tensor,
    pub b_time1: Tensor,
    pub w_time2: Tensor,
    pub b_time2: Tensor,
    pub layers: Vec<LayerWeights>,
    pub gain_final: Tensor,
    /// Final modulation head: d -> 2d (shift/scale).
    pub w_mod_final: Tensor,
    pub b_mod_final: Tensor,
    pub w_head: Tensor,
    pub b_head: Tensor,
}

fn gaussian_scaled(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let mut t = rng.gaussian(shape);
    for v in t.data_mut().iter_mut() {
        *v = quantize(*v * std);
    }
    t
}

/// Orthonormalize the rows of a (rows x cols) Gaussian draw, rows <= cols.
fn semi_orthogonal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut m = rng.gaussian(vec![rows, cols]);
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = (0..cols).map(|c| m.at2(i, c) * m.at2(j, c)).sum();
            for c in 0..cols {
                let v = m.at2(i, c) - dot * m.at2(j, c);
                m.set2(i, c, v);
            }
        }
        let norm: f64 = (0..cols).map(|c| m.at2(i, c) * m.at2(i, c)).sum::<f64>().sqrt();
        for c in 0..cols {
            m.set2(i, c, quantize(m.at2(i, c) / norm));
        }
    }
    m
}

impl ModelWeights {
    /// Fresh weights: zero-initialized modulation and output head, unit norm
    /// gains, scaled Gaussian projections.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
        config.validate()?;
        let mut rng = Rng::new(seed).substream(0xA11C);
        let d = config.token_dim;
        let pdim = config.patch_dim();
        let p = config.tokens();
        let proj_std = 1.0 / (d as f64).sqrt();

        let patch_embed = if d >= pdim {
            semi_orthogonal(&mut rng, pdim, d)
        } else {
            gaussian_scaled(&mut rng, vec![pdim, d], 1.0 / (pdim as f64).sqrt())
        };

        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                gain_attn: Tensor::full(vec![d], 1.0),
                w_q: gaussian_scaled(&mut rng, vec![d, d], proj_std),
                b_q: Tensor::zeros(vec![1, d]),
                w_k: gaussian_scaled(&mut rng, vec![d, d], proj_std),
                b_k: Tensor::zeros(vec![1, d]),
                w_v: gaussian_scaled(&mut rng, vec![d, d], proj_std),
                b_v: Tensor::zeros(vec![1, d]),
                w_o: gaussian_scaled(&mut rng, vec![d, d], proj_std),
                b_o: Tensor::zeros(vec![1, d]),
                gain_mlp: Tensor::full(vec![d], 1.0),
                w_mlp1: gaussian_scaled(&mut rng, vec![d, config.mlp_hidden], proj_std),
                b_mlp1: Tensor::zeros(vec![1, config.mlp_hidden]),
                w_mlp2: gaussian_scaled(
                    &mut rng,
                    vec![config.mlp_hidden, d],
                    1.0 / (config.mlp_hidden as f64).sqrt(),
                ),
                b_mlp2: Tensor::zeros(vec![1, d]),
                w_mod: Tensor::zeros(vec![d, 6 * d]),
                b_mod: Tensor::zeros(vec![1, 6 * d]),
            });
        }

        Ok(ModelWeights {
            config: config.clone(),
            patch_embed,
            pos_embed: gaussian_scaled(&mut rng, vec![p, d], 0.02),
            cond_embed: gaussian_scaled(&mut rng, vec![config.num_conditions + 1, d], 0.02),
            w_time1: gaussian_scaled(&mut rng, vec![d, d], proj_std),
            b_time1: Tensor::zeros(vec![1, d]),
            w_time2: gaussian_scaled(&mut rng, vec![d, d], proj_std),
            b_time2: Tensor::zeros(vec![1, d]),
            layers,
            gain_final: Tensor::full(vec![d], 1.0),
            w_mod_final: Tensor::zeros(vec![d, 2 * d]),
            b_mod_final: Tensor::zeros(vec![1, 2 * d]),
            w_head: Tensor::zeros(vec![d, d]),
            b_head: Tensor::zeros(vec![1, d]),
        })
    }

    /// Stub weights realizing a state-independent velocity field: the output
    /// head projection is zero and its bias carries `velocity_row`, so every
    /// token moves with the same velocity regardless of state, time, or
    /// condition. Used by reversibility oracles.
    pub fn constant_velocity(
        config: &ModelConfig,
        seed: u64,
        velocity_row: &[f64],
    ) -> Result<ModelWeights> {
        if velocity_row.len() != config.token_dim {
            return Err(Error::Config(format!(
                "velocity row has {} entries, token dim is {}",
                velocity_row.len(),
                config.token_dim
            )));
        }
        let mut w = ModelWeights::init(config, seed)?;
        w.b_head = Tensor::new(vec![1, config.token_dim], velocity_row.to_vec())?;
        Ok(w)
    }

    /// Weights with every trainable parameter drawn from a scaled Gaussian,
    /// including the normally zero-initialized modulation and head tensors.
    /// Used by equivalence tests that need a non-degenerate forward pass
    /// without training.
    pub fn randomized(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
        let mut w = ModelWeights::init(config, seed)?;
        let mut rng = Rng::new(seed).substream(0x7E57);
        w.visit_params_mut(|_, t| {
            let fresh = gaussian_scaled(&mut rng, t.shape().to_vec(), 0.2);
            *t = fresh;
        });
        Ok(w)
    }

    /// Visit every trainable tensor in a fixed order. The patch embedding is
    /// a frozen buffer and is not visited.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("pos_embed", &self.pos_embed);
        f("cond_embed", &self.cond_embed);
        f("w_time1", &self.w_time1);
        f("b_time1", &self.b_time1);
        f("w_time2", &self.w_time2);
        f("b_time2", &self.b_time2);
        for (j, l) in self.layers.iter().enumerate() {
            let name = |field: &str| format!("layer{j}.{field}");
            f(&name("gain_attn"), &l.gain_attn);
            f(&name("w_q"), &l.w_q);
            f(&name("b_q"), &l.b_q);
            f(&name("w_k"), &l.w_k);
            f(&name("b_k"), &l.b_k);
            f(&name("w_v"), &l.w_v);
            f(&name("b_v"), &l.b_v);
            f(&name("w_o"), &l.w_o);
            f(&name("b_o"), &l.b_o);
            f(&name("gain_mlp"), &l.gain_mlp);
            f(&name("w_mlp1"), &l.w_mlp1);
            f(&name("b_mlp1"), &l.b_mlp1);
            f(&name("w_mlp2"), &l.w_mlp2);
            f(&name("b_mlp2"), &l.b_mlp2);
            f(&name("w_mod"), &l.w_mod);
            f(&name("b_mod"), &l.b_mod);
        }
        f("gain_final", &self.gain_final);
        f("w_mod_final", &self.w_mod_final);
        f("b_mod_final", &self.b_mod_final);
        f("w_head", &self.w_head);
        f("b_head", &self.b_head);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("pos_embed", &mut self.pos_embed);
        f("cond_embed", &mut self.cond_embed);
        f("w_time1", &mut self.w_time1);
        f("b_time1", &mut self.b_time1);
        f("w_time2", &mut self.w_time2);
        f("b_time2", &mut self.b_time2);
        for (j, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layer{j}.gain_attn"), &mut l.gain_attn);
            f(&format!("layer{j}.w_q"), &mut l.w_q);
            f(&format!("layer{j}.b_q"), &mut l.b_q);
            f(&format!("layer{j}.w_k"), &mut l.w_k);
            f(&format!("layer{j}.b_k"), &mut l.b_k);
            f(&format!("layer{j}.w_v"), &mut l.w_v);
            f(&format!("layer{j}.b_v"), &mut l.b_v);
            f(&format!("layer{j}.w_o"), &mut l.w_o);
            f(&format!("layer{j}.b_o"), &mut l.b_o);
            f(&format!("layer{j}.gain_mlp"), &mut l.gain_mlp);
            f(&format!("layer{j}.w_mlp1"), &mut l.w_mlp1);
            f(&format!("layer{j}.b_mlp1"), &mut l.b_mlp1);
            f(&format!("layer{j}.w_mlp2"), &mut l.w_mlp2);
            f(&format!("layer{j}.b_mlp2"), &mut l.b_mlp2);
            f(&format!("layer{j}.w_mod"), &mut l.w_mod);
            f(&format!("layer{j}.b_mod"), &mut l.b_mod);
        }
        f("gain_final", &mut self.gain_final);
        f("w_mod_final", &mut self.w_mod_final);
        f("b_mod_final", &mut self.b_mod_final);
        f("w_head", &mut self.w_head);
        f("b_head", &mut self.b_head);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.len());
        n
    }
}

/// Rearrange an image (C x H x W) into non-overlapping flat patches
/// (P x patch_dim). A pure permutation; `unpatchify` is its exact inverse.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (c, h, w) = (config.channels, config.image_size, config.image_size);
    if image.shape() != [c, h, w] {
        return Err(Error::shape(
            "patchify",
            format!("image {:?} vs expected [{c}, {h}, {w}]", image.shape()),
        ));
    }
    let ps = config.patch_size;
    let grid = h / ps;
    let mut out = Tensor::zeros(vec![config.tokens(), config.patch_dim()]);
    for py in 0..grid {
        for px in 0..grid {
            let token = py * grid + px;
            let mut idx = 0;
            for ch in 0..c {
                for dy in 0..ps {
                    for dx in 0..ps {
                        let v = image.data()[ch * h * w + (py * ps + dy) * w + (px * ps + dx)];
                        out.set2(token, idx, v);
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(patches: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let (c, h, w) = (config.channels, config.image_size, config.image_size);
    if patches.shape() != [config.tokens(), config.patch_dim()] {
        return Err(Error::shape(
            "unpatchify",
            format!(
                "patches {:?} vs expected [{}, {}]",
                patches.shape(),
                config.tokens(),
                config.patch_dim()
            ),
        ));
    }
    let ps = config.patch_size;
    let grid = h / ps;
    let mut out = Tensor::zeros(vec![c, h, w]);
    for py in 0..grid {
        for px in 0..grid {
            let token = py * grid + px;
            let mut idx = 0;
            for ch in 0..c {
                for dy in 0..ps {
                    for dx in 0..ps {
                        out.data_mut()[ch * h * w + (py * ps + dy) * w + (px * ps + dx)] =
                            patches.at2(token, idx);
                        idx += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Embed an image into token space: patchify, linear embed, add positional
/// embedding. The caller sets `t` afterwards (defaults to 0).
pub fn tokenize(image: &Tensor, weights: &ModelWeights) -> Result<TokenState> {
    let patches = patchify(image, &weights.config)?;
    let embedded = matmul(&patches, &weights.patch_embed)?;
    let tokens = crate::numerics::add(&embedded, &weights.pos_embed)?;
    TokenState::full(tokens, 0.0)
}

/// Project tokens back to an image through the output projection (the
/// transpose of the fixed patch embedding, after removing the positional
/// embedding).
pub fn detokenize(state: &TokenState, weights: &ModelWeights) -> Result<Tensor> {
    if state.positions.is_some() {
        return Err(Error::Config(
            "detokenize requires the full token sequence, not a foreground subsequence".into(),
        ));
    }
    if state.rows() != weights.config.tokens() {
        return Err(Error::shape(
            "detokenize",
            format!(
                "{} rows vs {} tokens",
                state.rows(),
                weights.config.tokens()
            ),
        ));
    }
    let centered = sub(&state.tokens, &weights.pos_embed)?;
    let decode = crate::numerics::transpose(&weights.patch_embed)?;
    let patches = matmul(&centered, &decode)?;
    unpatchify(&patches, &weights.config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{with_precision, Precision, Rng};

    #[test]
    fn tokenize_shape() {
        let w = ModelWeights::init(&ModelConfig::default(), 1).unwrap();
        let img = Rng::new(2).gaussian(vec![3, 16, 16]);
        let st = tokenize(&img, &w).unwrap();
        assert_eq!(st.tokens.shape(), &[16, 64]);
    }

    #[test]
    fn tokenize_wrong_size_rejected() {
        let w = ModelWeights::init(&ModelConfig::default(), 1).unwrap();
        let img = Tensor::zeros(vec![3, 8, 8]);
        assert!(tokenize(&img, &w).is_err());
    }

    #[test]
    fn patchify_unpatchify_exact() {
        let cfg = ModelConfig::default();
        let img = Rng::new(3).gaussian(vec![3, 16, 16]);
        let p = patchify(&img, &cfg).unwrap();
        let back = unpatchify(&p, &cfg).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn one_patch_difference_changes_one_row() {
        let w = ModelWeights::init(&ModelConfig::default(), 4).unwrap();
        let img_a = Rng::new(5).gaussian(vec![3, 16, 16]);
        let mut img_b = img_a.clone();
        // Perturb a pixel inside patch (1,2) -> token 6.
        let (h, wd) = (16, 16);
        img_b.data_mut()[0 * h * wd + 5 * wd + 9] += 1.0;
        let ta = tokenize(&img_a, &w).unwrap();
        let tb = tokenize(&img_b, &w).unwrap();
        let mut changed = Vec::new();
        for r in 0..16 {
            let diff: f64 = ta
                .tokens
                .row(r)
                .iter()
                .zip(tb.tokens.row(r))
                .map(|(a, b)| (a - b).abs())
                .sum();
            if diff > 0.0 {
                changed.push(r);
            }
        }
        assert_eq!(changed, vec![6]);
    }

    #[test]
    fn detokenize_inverts_tokenize() {
        with_precision(Precision::F64, || {
            let w = ModelWeights::init(&ModelConfig::default(), 6).unwrap();
            let img = Rng::new(7).gaussian(vec![3, 16, 16]);
            let st = tokenize(&img, &w).unwrap();
            let back = detokenize(&st, &w).unwrap();
            assert!(back.max_abs_diff(&img) < 1e-10);
        });
    }

    #[test]
    fn detokenize_zero_tokens_zero_bias() {
        let mut w = ModelWeights::init(&ModelConfig::default(), 8).unwrap();
        w.pos_embed = Tensor::zeros(vec![16, 64]);
        let st = TokenState::full(Tensor::zeros(vec![16, 64]), 0.0).unwrap();
        let img = detokenize(&st, &w).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        assert_eq!(img.shape(), &[3, 16, 16]);
    }

    #[test]
    fn detokenize_rejects_subsequence() {
        let w = ModelWeights::init(&ModelConfig::default(), 9).unwrap();
        let st = TokenState::foreground(Tensor::zeros(vec![2, 64]), 0.0, vec![1, 3]).unwrap();
        assert!(detokenize(&st, &w).is_err());
    }

    #[test]
    fn detokenize_per_token_independence() {
        let w = ModelWeights::init(&ModelConfig::default(), 10).unwrap();
        let tokens = Rng::new(11).gaussian(vec![16, 64]);
        let st = TokenState::full(tokens.clone(), 0.0).unwrap();
        let img_a = detokenize(&st, &w).unwrap();
        let mut tokens_b = tokens;
        tokens_b.row_mut(6)[0] += 1.0;
        let img_b = detokenize(&TokenState::full(tokens_b, 0.0).unwrap(), &w).unwrap();
        // Only patch 6 (grid position 1,2) may change.
        for ch in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let idx = ch * 256 + y * 16 + x;
                    let inside = (4..8).contains(&y) && (8..12).contains(&x);
                    if !inside {
                        assert_eq!(img_a.data()[idx], img_b.data()[idx]);
                    }
                }
            }
        }
        assert!(img_a.max_abs_diff(&img_b) > 0.0);
    }

    #[test]
    fn patch_embed_rows_orthonormal() {
        let w = ModelWeights::init(&ModelConfig::default(), 12).unwrap();
        let pe = &w.patch_embed;
        for i in 0..48 {
            for j in 0..=i {
                let dot: f64 = (0..64).map(|c| pe.at2(i, c) * pe.at2(j, c)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-5, "rows {i},{j}: {dot}");
            }
        }
    }
}
