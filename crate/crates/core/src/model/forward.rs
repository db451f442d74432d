//! Velocity prediction with recordable and injectable key/value pairs.
//!
//! Attention keys and values can be tapped per layer (recording background
//! rows), or replaced by previously cached background rows while queries run
//! over a foreground subsequence only. Recording never changes the computed
//! velocity; injection reproduces the full-attention rows exactly when the
//! cache was recorded from the same input at the same timestep.

use crate::error::{Error, Result};
use crate::kvedit::{
    apply_attention_scale, apply_inversion_attention_mask, assemble_rows, TokenPartition,
};
use crate::numerics::{
    add, add_row, add_scaled, matmul, modulate, quantize, rms_norm, scale, silu,
    softmax_rows, sub, transpose, Tensor,
};

use super::{ConditionId, ModelWeights, TokenState};

/// Background key/value rows recorded at one layer (packed across heads).
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub k: Tensor,
    pub v: Tensor,
}

/// One recorded forward pass: background K/V per layer, in layer order.
pub type KvRecord = Vec<KvPair>;

/// Cached K/V for a single timestep, ready for injection.
#[derive(Debug, Clone)]
pub struct KvStep<'a> {
    pub layers: Vec<(&'a Tensor, &'a Tensor)>,
    pub bg_positions: &'a [usize],
}

/// Attention behaviour of a forward pass.
#[derive(Debug, Clone)]
pub enum KvMode<'a> {
    /// Full self-attention.
    Plain,
    /// Full self-attention, returning background K/V per layer. With
    /// `masked`, background queries are blocked from foreground keys so the
    /// recorded rows carry no foreground information.
    Record {
        partition: &'a TokenPartition,
        masked: bool,
    },
    /// Foreground-only queries over cached background plus fresh foreground
    /// K/V, scattered back to original token order. `attention_scale`
    /// multiplies (foreground query, background key) logits when > 1.
    Inject {
        step: KvStep<'a>,
        attention_scale: f64,
    },
}

/// Intermediate activations captured for the training backward pass.
#[derive(Debug)]
pub struct Tape {
    pub(crate) x_input: Tensor,
    pub(crate) cond: usize,
    pub(crate) tau: Tensor,
    pub(crate) time_h_pre: Tensor,
    pub(crate) time_h: Tensor,
    pub(crate) m_pre: Tensor,
    pub(crate) m: Tensor,
    pub(crate) layers: Vec<LayerTape>,
    pub(crate) f_x: Tensor,
    pub(crate) f_normed: Tensor,
    pub(crate) f_in: Tensor,
    pub(crate) scale_f: Tensor,
}

#[derive(Debug)]
pub(crate) struct LayerTape {
    pub(crate) x_in: Tensor,
    pub(crate) a_normed: Tensor,
    pub(crate) a_in: Tensor,
    pub(crate) q: Tensor,
    pub(crate) k: Tensor,
    pub(crate) v: Tensor,
    pub(crate) attn_weights: Vec<Tensor>,
    pub(crate) attn_concat: Tensor,
    pub(crate) attn_out: Tensor,
    pub(crate) x_mid: Tensor,
    pub(crate) m_normed: Tensor,
    pub(crate) m_in: Tensor,
    pub(crate) h_pre: Tensor,
    pub(crate) h_post: Tensor,
    pub(crate) mlp_out: Tensor,
    /// shift1, scale1, gate1, shift2, scale2, gate2.
    pub(crate) mods: [Tensor; 6],
}

/// Sinusoidal features of the time coordinate (d even).
pub(crate) fn time_features(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; d];
    for k in 0..half {
        let freq = (-(10000.0f64).ln() * k as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        data[2 * k] = quantize(arg.sin());
        data[2 * k + 1] = quantize(arg.cos());
    }
    Tensor::new(vec![1, d], data).expect("consistent shape")
}

fn split_row(t: &Tensor, parts: usize) -> Vec<Tensor> {
    let d = t.len() / parts;
    (0..parts)
        .map(|i| {
            Tensor::new(vec![1, d], t.data()[i * d..(i + 1) * d].to_vec())
                .expect("consistent shape")
        })
        .collect()
}

fn col_slice(t: &Tensor, start: usize, len: usize) -> Tensor {
    let rows = t.rows();
    let cols = t.cols();
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
    }
    Tensor::new(vec![rows, len], data).expect("consistent shape")
}

fn paste_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    let cols = dst.cols();
    let len = src.cols();
    for r in 0..src.rows() {
        let base = r * cols + start;
        dst.data_mut()[base..base + len].copy_from_slice(src.row(r));
    }
}

/// Conditioning vector: silu(condition embedding + time MLP output).
fn condition_vector(
    c: ConditionId,
    t: f64,
    weights: &ModelWeights,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let d = weights.config.token_dim;
    let tau = time_features(t, d);
    let time_h_pre = add_row(&matmul(&tau, &weights.w_time1)?, &weights.b_time1)?;
    let time_h = silu(&time_h_pre);
    let u = add_row(&matmul(&time_h, &weights.w_time2)?, &weights.b_time2)?;
    let cond_row = Tensor::new(vec![1, d], weights.cond_embed.row(c.0).to_vec())?;
    let m_pre = add(&cond_row, &u)?;
    let m = silu(&m_pre);
    Ok((tau, time_h_pre, time_h, m_pre, m))
}

/// Predict the velocity for `state` under condition `c`.
///
/// Returns one velocity row per input token, plus the recorded background
/// K/V when `mode` records.
pub fn forward_velocity(
    state: &TokenState,
    c: ConditionId,
    weights: &ModelWeights,
    mode: &KvMode<'_>,
) -> Result<(Tensor, Option<KvRecord>)> {
    let (v, rec, _) = run_forward(state, c, weights, mode, false)?;
    Ok((v, rec))
}

/// Plain forward pass capturing every intermediate needed for gradients.
pub fn forward_with_tape(
    state: &TokenState,
    c: ConditionId,
    weights: &ModelWeights,
) -> Result<(Tensor, Tape)> {
    let (v, _, tape) = run_forward(state, c, weights, &KvMode::Plain, true)?;
    Ok((v, tape.expect("tape requested")))
}

fn run_forward(
    state: &TokenState,
    c: ConditionId,
    weights: &ModelWeights,
    mode: &KvMode<'_>,
    want_tape: bool,
) -> Result<(Tensor, Option<KvRecord>, Option<Tape>)> {
    let cfg = &weights.config;
    c.validate(cfg)?;
    state.validate()?;
    let p = cfg.tokens();
    let d = cfg.token_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();

    let full_positions: Vec<usize> = (0..p).collect();
    let row_positions: &[usize] = match (&state.positions, mode) {
        (Some(pos), KvMode::Inject { .. }) => pos,
        (None, _) => {
            if state.rows() != p {
                return Err(Error::shape(
                    "forward_velocity",
                    format!("{} rows vs {p} tokens", state.rows()),
                ));
            }
            &full_positions
        }
        (Some(_), _) => {
            return Err(Error::Config(
                "foreground subsequences require inject mode".into(),
            ));
        }
    };

    if let KvMode::Inject { step, .. } = mode {
        if step.layers.len() != cfg.layers {
            return Err(Error::Config(format!(
                "cache provides {} layers, model has {}",
                step.layers.len(),
                cfg.layers
            )));
        }
    }
    if let KvMode::Record { partition, .. } = mode {
        if partition.total() != p {
            return Err(Error::shape(
                "forward_velocity",
                format!("partition over {} tokens vs {p}", partition.total()),
            ));
        }
    }

    let (tau, time_h_pre, time_h, m_pre, m) = condition_vector(c, state.t, weights)?;

    let mut record: Option<KvRecord> = match mode {
        KvMode::Record { .. } => Some(Vec::with_capacity(cfg.layers)),
        _ => None,
    };
    let mut layer_tapes = Vec::new();

    let mut x = state.tokens.clone();
    for (j, l) in weights.layers.iter().enumerate() {
        let mods = split_row(&add_row(&matmul(&m, &l.w_mod)?, &l.b_mod)?, 6);
        let (shift1, scale1, gate1) = (&mods[0], &mods[1], &mods[2]);
        let (shift2, scale2, gate2) = (&mods[3], &mods[4], &mods[5]);

        let a_normed = rms_norm(&x, &l.gain_attn)?;
        let a_in = modulate(&a_normed, scale1, shift1)?;
        let q = add_row(&matmul(&a_in, &l.w_q)?, &l.b_q)?;
        let k = add_row(&matmul(&a_in, &l.w_k)?, &l.b_k)?;
        let v = add_row(&matmul(&a_in, &l.w_v)?, &l.b_v)?;

        if let (Some(rec), KvMode::Record { partition, .. }) = (record.as_mut(), mode) {
            rec.push(KvPair {
                k: k.select_rows(partition.bg())?,
                v: v.select_rows(partition.bg())?,
            });
        }

        // Keys/values the queries attend over, in original token order.
        let (k_ctx, v_ctx) = match mode {
            KvMode::Inject { step, .. } => {
                let (k_bg, v_bg) = step.layers[j];
                (
                    assemble_rows(step.bg_positions, k_bg, row_positions, &k, p)?,
                    assemble_rows(step.bg_positions, v_bg, row_positions, &v, p)?,
                )
            }
            _ => (k.clone(), v.clone()),
        };

        let mut attn_concat = Tensor::zeros(vec![state.rows(), d]);
        let mut head_weights = Vec::new();
        for h in 0..heads {
            let qh = col_slice(&q, h * dh, dh);
            let kh = col_slice(&k_ctx, h * dh, dh);
            let vh = col_slice(&v_ctx, h * dh, dh);
            let mut logits = scale(&matmul(&qh, &transpose(&kh)?)?, 1.0 / (dh as f64).sqrt());
            match mode {
                KvMode::Record {
                    partition,
                    masked: true,
                } => {
                    logits = apply_inversion_attention_mask(&logits, partition);
                }
                KvMode::Inject {
                    step,
                    attention_scale,
                } if *attention_scale != 1.0 => {
                    logits = apply_attention_scale(&logits, step.bg_positions, *attention_scale);
                }
                _ => {}
            }
            let aw = softmax_rows(&logits)?;
            let oh = matmul(&aw, &vh)?;
            paste_cols(&mut attn_concat, &oh, h * dh);
            if want_tape {
                head_weights.push(aw);
            }
        }
        let attn_out = add_row(&matmul(&attn_concat, &l.w_o)?, &l.b_o)?;
        let x_mid = crate::numerics::add_gated(&x, gate1, &attn_out)?;

        let m_normed = rms_norm(&x_mid, &l.gain_mlp)?;
        let m_in = modulate(&m_normed, scale2, shift2)?;
        let h_pre = add_row(&matmul(&m_in, &l.w_mlp1)?, &l.b_mlp1)?;
        let h_post = silu(&h_pre);
        let mlp_out = add_row(&matmul(&h_post, &l.w_mlp2)?, &l.b_mlp2)?;
        let x_out = crate::numerics::add_gated(&x_mid, gate2, &mlp_out)?;

        if want_tape {
            layer_tapes.push(LayerTape {
                x_in: x.clone(),
                a_normed,
                a_in,
                q,
                k,
                v,
                attn_weights: head_weights,
                attn_concat,
                attn_out,
                x_mid,
                m_normed,
                m_in,
                h_pre,
                h_post,
                mlp_out,
                mods: [
                    mods[0].clone(),
                    mods[1].clone(),
                    mods[2].clone(),
                    mods[3].clone(),
                    mods[4].clone(),
                    mods[5].clone(),
                ],
            });
        }
        x = x_out;
    }

    let mods_f = split_row(
        &add_row(&matmul(&m, &weights.w_mod_final)?, &weights.b_mod_final)?,
        2,
    );
    let (shift_f, scale_f) = (&mods_f[0], &mods_f[1]);
    let f_normed = rms_norm(&x, &weights.gain_final)?;
    let f_in = modulate(&f_normed, scale_f, shift_f)?;
    let velocity = add_row(&matmul(&f_in, &weights.w_head)?, &weights.b_head)?;

    let tape = want_tape.then(|| Tape {
        x_input: state.tokens.clone(),
        cond: c.0,
        tau,
        time_h_pre,
        time_h,
        m_pre,
        m,
        layers: layer_tapes,
        f_x: x,
        f_normed,
        f_in: f_in.clone(),
        scale_f: scale_f.clone(),
    });

    Ok((velocity, record, tape))
}

/// Classifier-free guided velocity `v_null + g (v_c - v_null)`.
///
/// In record modes the returned K/V come from the conditional pass only.
pub fn guided_velocity(
    state: &TokenState,
    c: ConditionId,
    weights: &ModelWeights,
    guidance: f64,
    mode: &KvMode<'_>,
) -> Result<(Tensor, Option<KvRecord>)> {
    if guidance < 0.0 {
        return Err(Error::Config(format!("guidance {guidance} must be >= 0")));
    }
    let (v_c, rec) = forward_velocity(state, c, weights, mode)?;
    if guidance == 1.0 {
        return Ok((v_c, rec));
    }
    let null = ConditionId(weights.config.null_condition());
    let (v_null, _) = forward_velocity(state, null, weights, mode)?;
    let v = add_scaled(&v_null, &sub(&v_c, &v_null)?, guidance)?;
    Ok((v, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvedit::TokenPartition;
    use crate::model::{ModelConfig, ModelWeights};
    use crate::numerics::{with_precision, Precision, Rng};

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            token_dim: 16,
            layers: 2,
            heads: 2,
            num_conditions: 3,
            mlp_hidden: 32,
        }
    }

    fn state(cfg: &ModelConfig, seed: u64, t: f64) -> TokenState {
        TokenState::full(Rng::new(seed).gaussian(vec![cfg.tokens(), cfg.token_dim]), t).unwrap()
    }

    #[test]
    fn record_is_a_pure_tap() {
        let cfg = small_config();
        let w = ModelWeights::randomized(&cfg, 42).unwrap();
        let st = state(&cfg, 1, 0.5);
        let part = TokenPartition::new(vec![1, 2], vec![0, 3], cfg.tokens()).unwrap();
        let (v_plain, r_plain) = forward_velocity(&st, ConditionId(0), &w, &KvMode::Plain).unwrap();
        let (v_rec, r_rec) = forward_velocity(
            &st,
            ConditionId(0),
            &w,
            &KvMode::Record {
                partition: &part,
                masked: false,
            },
        )
        .unwrap();
        assert_eq!(v_plain, v_rec);
        assert!(r_plain.is_none());
        assert_eq!(r_rec.unwrap().len(), cfg.layers);
    }

    #[test]
    fn inject_full_foreground_empty_cache_is_plain() {
        let cfg = small_config();
        let w = ModelWeights::randomized(&cfg, 7).unwrap();
        let st = state(&cfg, 2, 0.25);
        let (v_plain, _) = forward_velocity(&st, ConditionId(1), &w, &KvMode::Plain).unwrap();
        let empty_k: Vec<Tensor> = (0..cfg.layers)
            .map(|_| Tensor::zeros(vec![0, cfg.token_dim]))
            .collect();
        let empty_v = empty_k.clone();
        let step = KvStep {
            layers: empty_k.iter().zip(&empty_v).collect(),
            bg_positions: &[],
        };
        let (v_inj, _) = forward_velocity(
            &st,
            ConditionId(1),
            &w,
            &KvMode::Inject {
                step,
                attention_scale: 1.0,
            },
        )
        .unwrap();
        assert_eq!(v_plain, v_inj);
    }

    fn check_inject_equivalence(tol: f64) {
        let cfg = small_config();
        let mut seed_rng = Rng::new(99);
        for trial in 0..20 {
            let w = ModelWeights::randomized(&cfg, seed_rng.next_u64()).unwrap();
            let st = state(&cfg, 1000 + trial, 0.5);
            let p = cfg.tokens();
            // Random non-empty foreground set.
            let mut fg = Vec::new();
            let mut bg = Vec::new();
            for i in 0..p {
                if seed_rng.uniform() < 0.5 {
                    fg.push(i);
                } else {
                    bg.push(i);
                }
            }
            if fg.is_empty() {
                fg.push(bg.pop().unwrap());
                fg.sort_unstable();
            }
            let part = TokenPartition::new(fg.clone(), bg.clone(), p).unwrap();
            let c = ConditionId(2);
            let (v_plain, rec) = forward_velocity(
                &st,
                c,
                &w,
                &KvMode::Record {
                    partition: &part,
                    masked: false,
                },
            )
            .unwrap();
            let rec = rec.unwrap();
            let fg_state = TokenState::foreground(
                st.tokens.select_rows(&fg).unwrap(),
                st.t,
                fg.clone(),
            )
            .unwrap();
            let step = KvStep {
                layers: rec.iter().map(|p| (&p.k, &p.v)).collect(),
                bg_positions: &bg,
            };
            let (v_inj, _) = forward_velocity(
                &fg_state,
                c,
                &w,
                &KvMode::Inject {
                    step,
                    attention_scale: 1.0,
                },
            )
            .unwrap();
            let want = v_plain.select_rows(&fg).unwrap();
            assert!(
                v_inj.max_abs_diff(&want) < tol,
                "trial {trial}: {}",
                v_inj.max_abs_diff(&want)
            );
        }
    }

    #[test]
    fn inject_rows_match_plain_rows_f32() {
        check_inject_equivalence(1e-5);
    }

    #[test]
    fn inject_rows_match_plain_rows_f64() {
        with_precision(Precision::F64, || check_inject_equivalence(1e-10));
    }

    #[test]
    fn inject_rejects_wrong_layer_count() {
        let cfg = small_config();
        let w = ModelWeights::randomized(&cfg, 5).unwrap();
        let st = state(&cfg, 3, 0.5);
        let k = Tensor::zeros(vec![0, cfg.token_dim]);
        let v = Tensor::zeros(vec![0, cfg.token_dim]);
        let step = KvStep {
            layers: vec![(&k, &v)],
            bg_positions: &[],
        };
        assert!(forward_velocity(
            &st,
            ConditionId(0),
            &w,
            &KvMode::Inject {
                step,
                attention_scale: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn inject_rejects_position_overlap() {
        let cfg = small_config();
        let w = ModelWeights::randomized(&cfg, 6).unwrap();
        let fg = vec![0, 1];
        let fg_state =
            TokenState::foreground(Rng::new(4).gaussian(vec![2, 16]), 0.5, fg).unwrap();
        let k = Rng::new(5).gaussian(vec![3, 16]);
        let v = Rng::new(6).gaussian(vec![3, 16]);
        let layers: Vec<_> = (0..cfg.layers).map(|_| (&k, &v)).collect();
        // Background positions {1,2,3} overlap foreground position 1.
        let step = KvStep {
            layers,
            bg_positions: &[1, 2, 3],
        };
        assert!(forward_velocity(
            &fg_state,
            ConditionId(0),
            &w,
            &KvMode::Inject {
                step,
                attention_scale: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn guidance_formula() {
        let cfg = small_config();
        let w = ModelWeights::randomized(&cfg, 11).unwrap();
        let st = state(&cfg, 12, 0.75);
        let c = ConditionId(1);
        let null = ConditionId(cfg.null_condition());
        let (v_c, _) = forward_velocity(&st, c, &w, &KvMode::Plain).unwrap();
        let (v_null, _) = forward_velocity(&st, null, &w, &KvMode::Plain).unwrap();

        let (g1, _) = guided_velocity(&st, c, &w, 1.0, &KvMode::Plain).unwrap();
        assert_eq!(g1, v_c);

        let (g0, _) = guided_velocity(&st, c, &w, 0.0, &KvMode::Plain).unwrap();
        assert!(g0.max_abs_diff(&v_null) < 1e-9);

        let (g2, _) = guided_velocity(&st, c, &w, 2.0, &KvMode::Plain).unwrap();
        let want = add_scaled(&v_null, &sub(&v_c, &v_null).unwrap(), 2.0).unwrap();
        assert!(g2.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let cfg = small_config();
        let w = ModelWeights::randomized(&cfg, 21).unwrap();
        let st = state(&cfg, 22, 0.3);
        let (v_plain, _) = forward_velocity(&st, ConditionId(0), &w, &KvMode::Plain).unwrap();
        let (v_tape, _) = forward_with_tape(&st, ConditionId(0), &w).unwrap();
        assert_eq!(v_plain, v_tape);
    }

    #[test]
    fn output_finite_for_finite_input() {
        let cfg = small_config();
        let w = ModelWeights::randomized(&cfg, 31).unwrap();
        let st = state(&cfg, 32, 1.0);
        let (v, _) = forward_velocity(&st, ConditionId(0), &w, &KvMode::Plain).unwrap();
        assert!(v.all_finite());
    }
}
