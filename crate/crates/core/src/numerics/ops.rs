use crate::error::{Error, Result};
use crate::numerics::{precision, Precision, Real, Tensor};

pub(crate) const RMS_EPS: f64 = 1e-6;

macro_rules! dispatch {
    ($kernel:ident ( $($arg:expr),* )) => {
        match precision() {
            Precision::F32 => $kernel::<f32>($($arg),*),
            Precision::F64 => $kernel::<f64>($($arg),*),
        }
    };
}

/// Matrix product of `a` (m x k) and `b` (k x n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("want matrices, got {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    if a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("inner dims disagree: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(dispatch!(matmul_kernel(a, b)))
}

fn matmul_kernel<T: Real>(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::from_f64(0.0);
            for p in 0..k {
                acc = acc.add(T::from_f64(ad[i * k + p]).mul(T::from_f64(bd[p * n + j])));
            }
            out[i * n + j] = acc.to_f64();
        }
    }
    Tensor::new(vec![m, n], out).expect("consistent shape")
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape(
            "transpose",
            format!("want matrix, got {:?}", a.shape()),
        ));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Row-wise softmax with per-row max subtraction.
///
/// Entries of `-inf` (from attention masking) get exactly zero weight.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape(
            "softmax_rows",
            format!("want matrix, got {:?}", a.shape()),
        ));
    }
    Ok(dispatch!(softmax_kernel(a)))
}

fn softmax_kernel<T: Real>(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0f64; m * n];
    let mut exps = vec![T::from_f64(0.0); n];
    for i in 0..m {
        let row = &a.data()[i * n..(i + 1) * n];
        let mut mx = T::from_f64(f64::NEG_INFINITY);
        for &x in row {
            mx = mx.max(T::from_f64(x));
        }
        let mut sum = T::from_f64(0.0);
        for (j, &x) in row.iter().enumerate() {
            let e = T::from_f64(x).sub(mx).exp();
            exps[j] = e;
            sum = sum.add(e);
        }
        for j in 0..n {
            out[i * n + j] = exps[j].div(sum).to_f64();
        }
    }
    Tensor::new(vec![m, n], out).expect("consistent shape")
}

/// RMS-normalize each length-d slice along the last axis and scale by `gain`.
pub fn rms_norm(a: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let d = *a.shape().last().expect("non-empty shape");
    if gain.shape() != [d] {
        return Err(Error::shape(
            "rms_norm",
            format!("gain {:?} does not match last dim {d}", gain.shape()),
        ));
    }
    Ok(dispatch!(rms_kernel(a, gain, d)))
}

fn rms_kernel<T: Real>(a: &Tensor, gain: &Tensor, d: usize) -> Tensor {
    let mut out = vec![0.0f64; a.len()];
    for (s, slice) in a.data().chunks(d).enumerate() {
        let mut ss = T::from_f64(0.0);
        for &x in slice {
            let v = T::from_f64(x);
            ss = ss.add(v.mul(v));
        }
        let inv = T::from_f64(1.0).div(
            ss.div(T::from_f64(d as f64))
                .add(T::from_f64(RMS_EPS))
                .sqrt(),
        );
        for (j, &x) in slice.iter().enumerate() {
            out[s * d + j] = T::from_f64(x)
                .mul(inv)
                .mul(T::from_f64(gain.data()[j]))
                .to_f64();
        }
    }
    Tensor::new(a.shape().to_vec(), out).expect("consistent shape")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("add", a, b)?;
    Ok(dispatch!(add_kernel(a, b)))
}

fn add_kernel<T: Real>(a: &Tensor, b: &Tensor) -> Tensor {
    binary::<T>(a, b, |x, y| x.add(y))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("sub", a, b)?;
    Ok(dispatch!(sub_kernel(a, b)))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same("mul", a, b)?;
    Ok(dispatch!(mul_kernel(a, b)))
}

fn mul_kernel<T: Real>(a: &Tensor, b: &Tensor) -> Tensor {
    binary::<T>(a, b, |x, y| x.mul(y))
}

fn sub_kernel<T: Real>(a: &Tensor, b: &Tensor) -> Tensor {
    binary::<T>(a, b, |x, y| x.sub(y))
}

/// `a + c * b`, the Euler-step shape.
pub fn add_scaled(a: &Tensor, b: &Tensor, c: f64) -> Result<Tensor> {
    check_same("add_scaled", a, b)?;
    Ok(dispatch!(add_scaled_kernel(a, b, c)))
}

fn add_scaled_kernel<T: Real>(a: &Tensor, b: &Tensor, c: f64) -> Tensor {
    let cc = T::from_f64(c);
    binary::<T>(a, b, move |x, y| x.add(cc.mul(y)))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    dispatch!(scale_kernel(a, c))
}

fn scale_kernel<T: Real>(a: &Tensor, c: f64) -> Tensor {
    let cc = T::from_f64(c);
    let data = a
        .data()
        .iter()
        .map(|&x| T::from_f64(x).mul(cc).to_f64())
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Add a `1 x d` row vector to every row of `a`.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    check_row("add_row", a, row)?;
    Ok(dispatch!(add_row_kernel(a, row)))
}

fn add_row_kernel<T: Real>(a: &Tensor, row: &Tensor) -> Tensor {
    row_broadcast::<T>(a, row, |x, r| x.add(r))
}

/// Multiply every row of `a` elementwise by a `1 x d` row vector.
pub fn mul_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    check_row("mul_row", a, row)?;
    Ok(dispatch!(mul_row_kernel(a, row)))
}

fn mul_row_kernel<T: Real>(a: &Tensor, row: &Tensor) -> Tensor {
    row_broadcast::<T>(a, row, |x, r| x.mul(r))
}

/// Adaptive modulation `a * (1 + scale) + shift`, broadcast per row.
pub fn modulate(a: &Tensor, scale_row: &Tensor, shift_row: &Tensor) -> Result<Tensor> {
    check_row("modulate", a, scale_row)?;
    check_row("modulate", a, shift_row)?;
    Ok(dispatch!(modulate_kernel(a, scale_row, shift_row)))
}

fn modulate_kernel<T: Real>(a: &Tensor, scale_row: &Tensor, shift_row: &Tensor) -> Tensor {
    let d = a.cols();
    let one = T::from_f64(1.0);
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let j = i % d;
            T::from_f64(x)
                .mul(one.add(T::from_f64(scale_row.data()[j])))
                .add(T::from_f64(shift_row.data()[j]))
                .to_f64()
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Gated residual `a + gate ⊙ delta`, gate broadcast per row.
pub fn add_gated(a: &Tensor, gate_row: &Tensor, delta: &Tensor) -> Result<Tensor> {
    check_same("add_gated", a, delta)?;
    check_row("add_gated", a, gate_row)?;
    Ok(dispatch!(add_gated_kernel(a, gate_row, delta)))
}

fn add_gated_kernel<T: Real>(a: &Tensor, gate_row: &Tensor, delta: &Tensor) -> Tensor {
    let d = a.cols();
    let data = a
        .data()
        .iter()
        .zip(delta.data())
        .enumerate()
        .map(|(i, (&x, &dl))| {
            let g = T::from_f64(gate_row.data()[i % d]);
            T::from_f64(x).add(g.mul(T::from_f64(dl))).to_f64()
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `x * sigmoid(x)` elementwise.
pub fn silu(a: &Tensor) -> Tensor {
    dispatch!(silu_kernel(a))
}

fn silu_kernel<T: Real>(a: &Tensor) -> Tensor {
    let one = T::from_f64(1.0);
    let zero = T::from_f64(0.0);
    let data = a
        .data()
        .iter()
        .map(|&x| {
            let v = T::from_f64(x);
            v.mul(one.div(one.add(zero.sub(v).exp()))).to_f64()
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn row_broadcast<T: Real>(a: &Tensor, row: &Tensor, f: impl Fn(T, T) -> T) -> Tensor {
    let d = a.cols();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(T::from_f64(x), T::from_f64(row.data()[i % d])).to_f64())
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn check_row(op: &'static str, a: &Tensor, row: &Tensor) -> Result<()> {
    if row.len() != a.cols() {
        return Err(Error::shape(
            op,
            format!("row {:?} vs columns {}", row.shape(), a.cols()),
        ));
    }
    Ok(())
}

fn binary<T: Real>(a: &Tensor, b: &Tensor, f: impl Fn(T, T) -> T) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(T::from_f64(x), T::from_f64(y)).to_f64())
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}
