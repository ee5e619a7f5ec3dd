// Slice-level forward kernels shared by the free functions and the tape.

use super::{shape_err, Tensor, TensorError};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    x * super::normal_cdf(x)
}

/// d/dx [x Phi(x)] = Phi(x) + x phi(x)
pub(crate) fn gelu_grad(x: f64) -> f64 {
    super::normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T · b` for `a: [m × k]`, `b: [m × n]`, giving `[k × n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · b^T` for `a: [m × n]`, `b: [k × n]`, giving `[m × k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

pub(crate) fn check_rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<(), TensorError> {
    if gain.ndim() != 1 || gain.numel() != x.cols() || x.ndim() == 0 {
        return Err(shape_err(
            "rms_norm",
            format!("gain {:?} vs input {:?}", gain.shape(), x.shape()),
        ));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(TensorError::Invalid {
            op: "rms_norm",
            detail: format!("eps must be non-negative, got {eps}"),
        });
    }
    Ok(())
}

/// Returns the normalized rows and the per-row inverse RMS.
pub(crate) fn rms_norm(x: &[f64], gain: &[f64], cols: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len().checked_div(cols).unwrap_or(0);
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let v = &x[r * cols..(r + 1) * cols];
        let mut ss = 0.0;
        for &e in v {
            ss += e * e;
        }
        let denom = (ss / cols as f64 + eps).sqrt();
        // All-zero row with eps = 0: output is zero, not NaN.
        let ir = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for ((o, &e), &g) in out[r * cols..(r + 1) * cols].iter_mut().zip(v).zip(gain) {
            *o = g * (e * ir);
        }
        inv.push(ir);
    }
    (out, inv)
}

/// Row softmax; with `causal`, entry `(i, j)` is kept only for `j <= i` and
/// masked entries are exactly zero.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let limit = if causal { (r + 1).min(cols) } else { cols };
        let row = &x[r * cols..r * cols + limit];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..r * cols + limit];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

/// Rotary position embedding applied per head to adjacent pairs.
/// `sign = -1.0` applies the inverse rotation.
pub(crate) fn rope(x: &[f64], seq: usize, hidden: usize, n_heads: usize, base: f64, sign: f64) -> Vec<f64> {
    let head_dim = hidden / n_heads;
    let mut out = x.to_vec();
    for pos in 0..seq {
        for h in 0..n_heads {
            for i in 0..head_dim / 2 {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = (sign * theta).sin_cos();
                let j = pos * hidden + h * head_dim + 2 * i;
                let (a, b) = (x[j], x[j + 1]);
                out[j] = a * c - b * s;
                out[j + 1] = a * s + b * c;
            }
        }
    }
    out
}
