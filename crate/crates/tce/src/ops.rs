//! Numeric kernels shared by the graph's forward and backward passes.
//!
//! Everything here is a pure function over flat row-major slices; the graph
//! layer owns shape checking and gradient bookkeeping.

use crate::error::{Result, TceError};

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Masked softmax over a single vector. Masked positions come out exactly 0.
pub fn softmax_masked(logits: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if live(i) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(TceError::AllMasked);
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (i, &v) in logits.iter().enumerate() {
        if live(i) {
            let e = (v - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// dL/dlogits given softmax output `y` and upstream gradient `g`.
pub fn softmax_backward(y: &[f64], g: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let live = |i: usize| mask.is_none_or(|m| m[i]);
    let dot: f64 = y
        .iter()
        .zip(g)
        .enumerate()
        .filter(|(i, _)| live(*i))
        .map(|(_, (yi, gi))| yi * gi)
        .sum();
    y.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (yi, gi))| if live(i) { yi * (gi - dot) } else { 0.0 })
        .collect()
}

/// Row-wise layer normalization without learned affine: (x - mean) / sqrt(var + eps).
pub fn layernorm_rows(x: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mean) * inv;
        }
    }
    out
}

pub fn layernorm_rows_backward(x: &[f64], g: &[f64], rows: usize, cols: usize, eps: f64) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    let n = cols as f64;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let grow = &g[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let g_mean = grow.iter().sum::<f64>() / n;
        let gx_mean = grow.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for c in 0..cols {
            dx[r * cols + c] = inv * (grow[c] - g_mean - xhat[c] * gx_mean);
        }
    }
    dx
}

/// Column-wise batch statistics of an `[rows, cols]` matrix (biased variance).
pub fn batch_stats(x: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows as f64;
    let mut mean = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += x[r * cols + c];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for r in 0..rows {
        for c in 0..cols {
            let d = x[r * cols + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

/// y = gamma * (x - mean)/sqrt(var + eps) + beta, column-wise.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_apply(
    x: &[f64],
    rows: usize,
    cols: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..cols {
        let inv = 1.0 / (var[c] + eps).sqrt();
        for r in 0..rows {
            out[r * cols + c] = gamma[c] * (x[r * cols + c] - mean[c]) * inv + beta[c];
        }
    }
    out
}

/// Backward through train-mode batch norm (gradients flow through the batch
/// statistics as well). Returns (dx, dgamma, dbeta).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train_backward(
    x: &[f64],
    g: &[f64],
    rows: usize,
    cols: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = rows as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    for c in 0..cols {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let mut g_sum = 0.0;
        let mut gx_sum = 0.0;
        for r in 0..rows {
            let xhat = (x[r * cols + c] - mean[c]) * inv;
            g_sum += g[r * cols + c];
            gx_sum += g[r * cols + c] * xhat;
        }
        dgamma[c] = gx_sum;
        dbeta[c] = g_sum;
        for r in 0..rows {
            let xhat = (x[r * cols + c] - mean[c]) * inv;
            dx[r * cols + c] = gamma[c] * inv / n * (n * g[r * cols + c] - g_sum - xhat * gx_sum);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
