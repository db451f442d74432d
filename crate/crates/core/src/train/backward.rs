//! Hand-derived reverse-mode gradients for the forward pass, keyed off the
//! activations captured in a [`Tape`]. Verified against central finite
//! differences by `grad_check`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{ModelWeights, Tape};
use crate::numerics::{add, matmul, mul, mul_row, scale, transpose, Tensor, RMS_EPS};

/// Accumulated gradients, one tensor per trainable parameter, addressed by
/// the same names `visit_params` reports.
#[derive(Debug, Clone)]
pub struct Gradients {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Gradients {
    pub fn zeros_like(weights: &ModelWeights) -> Gradients {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        weights.visit_params(|name, t| {
            names.push(name.to_string());
            tensors.push(Tensor::zeros(t.shape().to_vec()));
        });
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Gradients {
            names,
            tensors,
            index,
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.index[name]]
    }

    fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.tensors[self.index[name]]
    }

    pub(crate) fn accumulate(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let slot = self.get_mut(name);
        *slot = add(slot, delta)?;
        Ok(())
    }

    /// Tensors in `visit_params` order.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |a, &v| a.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

/// Sum over rows, producing a `1 x d` row.
fn colsum(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (c, v) in t.row(r).iter().enumerate() {
            out[c] += v;
        }
    }
    Tensor::new(vec![1, cols], out).expect("consistent shape")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// d silu(x) / dx = sigmoid(x) (1 + x (1 - sigmoid(x))).
fn silu_deriv(pre: &Tensor) -> Tensor {
    pre.map(|x| {
        let s = sigmoid(x);
        s * (1.0 + x * (1.0 - s))
    })
}

/// Backward through `y = x * gain / rms(x)` per row.
/// Returns the input gradient and accumulates the gain gradient.
fn rms_norm_backward(x: &Tensor, gain: &Tensor, g_y: &Tensor, g_gain: &mut Tensor) -> Tensor {
    let (rows, d) = (x.rows(), x.cols());
    let mut g_x = Tensor::zeros(vec![rows, d]);
    for i in 0..rows {
        let xr = x.row(i);
        let gr = g_y.row(i);
        let mean_sq = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (mean_sq + RMS_EPS).sqrt();
        // inner = sum_j g_y_ij * gain_j * x_ij
        let mut inner = 0.0;
        for j in 0..d {
            inner += gr[j] * gain.data()[j] * xr[j];
        }
        let r3 = r * r * r;
        for j in 0..d {
            let v = gr[j] * gain.data()[j] / r - xr[j] * inner / (d as f64 * r3);
            g_x.set2(i, j, v);
            g_gain.data_mut()[j] += gr[j] * xr[j] / r;
        }
    }
    g_x
}

/// Backward through row softmax: `g_logits = a * (g_a - rowsum(g_a * a))`.
fn softmax_backward(a: &Tensor, g_a: &Tensor) -> Tensor {
    let (rows, cols) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows {
        let dot: f64 = a.row(i).iter().zip(g_a.row(i)).map(|(x, g)| x * g).sum();
        for j in 0..cols {
            out.set2(i, j, a.at2(i, j) * (g_a.at2(i, j) - dot));
        }
    }
    out
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
    for r in 0..src.rows() {
        let base = r * cols + start;
        dst.data_mut()[base..base + src.cols()].copy_from_slice(src.row(r));
    }
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let total: usize = parts.iter().map(|t| t.len()).sum();
    let mut data = Vec::with_capacity(total);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![1, total], data).expect("consistent shape")
}

/// Linear layer backward for `y = x W + b`:
/// accumulates `dW += x^T g`, `db += colsum(g)`, returns `g x = g W^T`.
fn linear_backward(
    grads: &mut Gradients,
    w_name: &str,
    b_name: &str,
    x: &Tensor,
    w: &Tensor,
    g_y: &Tensor,
) -> Result<Tensor> {
    grads.accumulate(w_name, &matmul(&transpose(x)?, g_y)?)?;
    grads.accumulate(b_name, &colsum(g_y))?;
    matmul(g_y, &transpose(w)?)
}

/// Backward through modulation `y = x (1 + scale) + shift`.
/// Returns the gradient wrt `x`; shift/scale gradients (1 x d rows) are
/// returned for the caller to route into the modulation head.
fn modulate_backward(
    x: &Tensor,
    scale_row: &Tensor,
    g_y: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let one_plus: Tensor = scale_row.map(|v| 1.0 + v);
    let g_x = mul_row(g_y, &one_plus)?;
    let g_scale = colsum(&mul(g_y, x)?);
    let g_shift = colsum(g_y);
    Ok((g_x, g_scale, g_shift))
}

/// Reverse pass over one recorded forward. `g_velocity` is dL/d(velocity).
///
/// Accumulates parameter gradients into `grads` and returns dL/d(input
/// tokens), which the loss needs for the positional-embedding path.
pub fn backward(
    tape: &Tape,
    g_velocity: &Tensor,
    weights: &ModelWeights,
    grads: &mut Gradients,
) -> Result<Tensor> {
    let cfg = &weights.config;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    // Accumulated gradient of the shared conditioning vector m.
    let mut g_m = Tensor::zeros(vec![1, cfg.token_dim]);

    // velocity = f_in W_head + b_head
    let g_f_in = linear_backward(
        grads,
        "w_head",
        "b_head",
        &tape.f_in,
        &weights.w_head,
        g_velocity,
    )?;

    // f_in = f_normed (1 + scale_f) + shift_f
    let (g_f_normed, g_scale_f, g_shift_f) =
        modulate_backward(&tape.f_normed, &tape.scale_f, &g_f_in)?;
    let g_modf = concat_rows(&[&g_shift_f, &g_scale_f]);
    g_m = add(
        &g_m,
        &linear_backward(
            grads,
            "w_mod_final",
            "b_mod_final",
            &tape.m,
            &weights.w_mod_final,
            &g_modf,
        )?,
    )?;

    // f_normed = rms(f_x, gain_final)
    let mut g_gain_final = Tensor::zeros(vec![cfg.token_dim]);
    let mut g_x = rms_norm_backward(&tape.f_x, &weights.gain_final, &g_f_normed, &mut g_gain_final);
    grads.accumulate("gain_final", &g_gain_final)?;

    for (j, (lt, lw)) in tape.layers.iter().zip(&weights.layers).enumerate().rev() {
        let name = |field: &str| format!("layer{j}.{field}");
        let [shift1, scale1, gate1, shift2, scale2, gate2] = &lt.mods;
        let _ = (shift1, shift2);

        // x_out = x_mid + gate2 * mlp_out
        let g_gate2 = colsum(&mul(&g_x, &lt.mlp_out)?);
        let g_mlp_out = mul_row(&g_x, gate2)?;
        let mut g_x_mid = g_x; // dL/dx_mid, more terms below

        // mlp_out = h_post W2 + b2 ; h_post = silu(h_pre) ; h_pre = m_in W1 + b1
        let g_h_post = linear_backward(
            grads,
            &name("w_mlp2"),
            &name("b_mlp2"),
            &lt.h_post,
            &lw.w_mlp2,
            &g_mlp_out,
        )?;
        let g_h_pre = mul(&g_h_post, &silu_deriv(&lt.h_pre))?;
        let g_m_in = linear_backward(
            grads,
            &name("w_mlp1"),
            &name("b_mlp1"),
            &lt.m_in,
            &lw.w_mlp1,
            &g_h_pre,
        )?;

        // m_in = m_normed (1 + scale2) + shift2
        let (g_m_normed, g_scale2, g_shift2) = modulate_backward(&lt.m_normed, scale2, &g_m_in)?;

        // m_normed = rms(x_mid, gain_mlp)
        let mut g_gain_mlp = Tensor::zeros(vec![cfg.token_dim]);
        g_x_mid = add(
            &g_x_mid,
            &rms_norm_backward(&lt.x_mid, &lw.gain_mlp, &g_m_normed, &mut g_gain_mlp),
        )?;
        grads.accumulate(&name("gain_mlp"), &g_gain_mlp)?;

        // x_mid = x_in + gate1 * attn_out
        let g_gate1 = colsum(&mul(&g_x_mid, &lt.attn_out)?);
        let g_attn_out = mul_row(&g_x_mid, gate1)?;
        let mut g_x_in = g_x_mid;

        // attn_out = attn_concat W_o + b_o
        let g_attn_concat = linear_backward(
            grads,
            &name("w_o"),
            &name("b_o"),
            &lt.attn_concat,
            &lw.w_o,
            &g_attn_out,
        )?;

        // Per-head attention backward.
        let p = lt.q.rows();
        let mut g_q = Tensor::zeros(vec![p, cfg.token_dim]);
        let mut g_k = Tensor::zeros(vec![p, cfg.token_dim]);
        let mut g_v = Tensor::zeros(vec![p, cfg.token_dim]);
        for h in 0..heads {
            let aw = &lt.attn_weights[h];
            let vh = col_slice(&lt.v, h * dh, dh);
            let qh = col_slice(&lt.q, h * dh, dh);
            let kh = col_slice(&lt.k, h * dh, dh);
            let g_oh = col_slice(&g_attn_concat, h * dh, dh);

            let g_aw = matmul(&g_oh, &transpose(&vh)?)?;
            let g_vh = matmul(&transpose(aw)?, &g_oh)?;
            let g_logits = softmax_backward(aw, &g_aw);
            let g_qh = scale(&matmul(&g_logits, &kh)?, inv_sqrt);
            let g_kh = scale(&matmul(&transpose(&g_logits)?, &qh)?, inv_sqrt);

            paste_cols(&mut g_q, &g_qh, h * dh);
            paste_cols(&mut g_k, &g_kh, h * dh);
            paste_cols(&mut g_v, &g_vh, h * dh);
        }

        // q/k/v = a_in W + b
        let mut g_a_in =
            linear_backward(grads, &name("w_q"), &name("b_q"), &lt.a_in, &lw.w_q, &g_q)?;
        g_a_in = add(
            &g_a_in,
            &linear_backward(grads, &name("w_k"), &name("b_k"), &lt.a_in, &lw.w_k, &g_k)?,
        )?;
        g_a_in = add(
            &g_a_in,
            &linear_backward(grads, &name("w_v"), &name("b_v"), &lt.a_in, &lw.w_v, &g_v)?,
        )?;

        // a_in = a_normed (1 + scale1) + shift1
        let (g_a_normed, g_scale1, g_shift1) = modulate_backward(&lt.a_normed, scale1, &g_a_in)?;

        // a_normed = rms(x_in, gain_attn)
        let mut g_gain_attn = Tensor::zeros(vec![cfg.token_dim]);
        g_x_in = add(
            &g_x_in,
            &rms_norm_backward(&lt.x_in, &lw.gain_attn, &g_a_normed, &mut g_gain_attn),
        )?;
        grads.accumulate(&name("gain_attn"), &g_gain_attn)?;

        // Modulation head of this layer.
        let g_mod = concat_rows(&[
            &g_shift1, &g_scale1, &g_gate1, &g_shift2, &g_scale2, &g_gate2,
        ]);
        g_m = add(
            &g_m,
            &linear_backward(grads, &name("w_mod"), &name("b_mod"), &tape.m, &lw.w_mod, &g_mod)?,
        )?;

        g_x = g_x_in;
    }

    // Conditioning path: m = silu(cond_row + u), u = silu(tau W_t1 + b_t1) W_t2 + b_t2.
    let g_m_pre = mul(&g_m, &silu_deriv(&tape.m_pre))?;
    // cond_row contribution.
    {
        let d = cfg.token_dim;
        let mut delta = Tensor::zeros(vec![cfg.num_conditions + 1, d]);
        delta.row_mut(tape.cond).copy_from_slice(g_m_pre.row(0));
        grads.accumulate("cond_embed", &delta)?;
    }
    let g_time_h = linear_backward(
        grads,
        "w_time2",
        "b_time2",
        &tape.time_h,
        &weights.w_time2,
        &g_m_pre,
    )?;
    let g_time_h_pre = mul(&g_time_h, &silu_deriv(&tape.time_h_pre))?;
    // tau is a function of t only; no input gradient needed.
    let _ = linear_backward(
        grads,
        "w_time1",
        "b_time1",
        &tape.tau,
        &weights.w_time1,
        &g_time_h_pre,
    )?;

    if !g_x.all_finite() {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    Ok(g_x)
}
