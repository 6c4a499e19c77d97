//! Forward kernels shared by the differentiable graph and the streaming
//! inference path.
//!
//! Every kernel computes each output element with a summation order that
//! depends only on the kernel shape, never on how many rows are processed in
//! one call. This is what makes chunked streaming bit-identical to batch
//! processing.

#[inline]
pub fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `x [rows x inner] . w [inner x out]`.
pub fn matmul(x: &[f32], rows: usize, inner: usize, w: &[f32], out: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), rows * inner);
    debug_assert_eq!(w.len(), inner * out);
    let mut y = vec![0.0f32; rows * out];
    for r in 0..rows {
        let yr = &mut y[r * out..(r + 1) * out];
        let xr = &x[r * inner..(r + 1) * inner];
        for (i, &xv) in xr.iter().enumerate() {
            axpy(yr, xv, &w[i * out..(i + 1) * out]);
        }
    }
    y
}

/// Adds `bias` to every row of `y`.
pub fn add_row_bias(y: &mut [f32], bias: &[f32]) {
    let c = bias.len();
    if c == 0 {
        return;
    }
    for row in y.chunks_exact_mut(c) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Number of outputs of an unpadded strided convolution.
pub fn conv_out_len(t_in: usize, kernel: usize, stride: usize) -> usize {
    if t_in < kernel {
        0
    } else {
        (t_in - kernel) / stride + 1
    }
}

/// Unpadded 1-D convolution over time-major rows.
///
/// `x` is `[t_in x cin]`, `w` is `[kernel x cin x cout]`, output is
/// `[t_out x cout]`. Each output row starts from the bias and accumulates
/// taps in `(k, ci)` order.
pub fn conv1d_valid(
    x: &[f32],
    t_in: usize,
    cin: usize,
    w: &[f32],
    bias: &[f32],
    kernel: usize,
    stride: usize,
) -> Vec<f32> {
    let cout = bias.len();
    let t_out = conv_out_len(t_in, kernel, stride);
    let mut y = vec![0.0f32; t_out * cout];
    for t in 0..t_out {
        let yr = &mut y[t * cout..(t + 1) * cout];
        yr.copy_from_slice(bias);
        for k in 0..kernel {
            let xr = &x[(t * stride + k) * cin..(t * stride + k + 1) * cin];
            for (ci, &xv) in xr.iter().enumerate() {
                let off = (k * cin + ci) * cout;
                axpy(yr, xv, &w[off..off + cout]);
            }
        }
    }
    y
}

/// Scatter step of a transposed convolution: input row `t` adds
/// `x[t] . w[k]` into accumulator row `t * stride + k`. Rows are visited in
/// increasing `t`, so partial sums carried between streaming calls end up in
/// the same order as a single batch call.
pub fn conv_tr1d_scatter(
    acc: &mut [f32],
    x: &[f32],
    t_in: usize,
    cin: usize,
    w: &[f32],
    kernel: usize,
    stride: usize,
    cout: usize,
) {
    for t in 0..t_in {
        let xr = &x[t * cin..(t + 1) * cin];
        for k in 0..kernel {
            let row = t * stride + k;
            let ar = &mut acc[row * cout..(row + 1) * cout];
            for (ci, &xv) in xr.iter().enumerate() {
                let off = (k * cin + ci) * cout;
                axpy(ar, xv, &w[off..off + cout]);
            }
        }
    }
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Row-wise layer norm. Returns normalized output plus per-row mean and
/// reciprocal standard deviation.
pub fn layer_norm(
    x: &[f32],
    cols: usize,
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut y = vec![0.0f32; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f32>() / cols as f32;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for c in 0..cols {
            y[r * cols + c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Rotates consecutive pairs within each head by `pos * base^(-2i/head_dim)`.
/// `sign = -1.0` applies the inverse rotation.
pub fn rope_row(row: &mut [f32], pos: usize, heads: usize, sign: f32) {
    let dh = row.len() / heads;
    for h in 0..heads {
        let hr = &mut row[h * dh..(h + 1) * dh];
        for i in 0..dh / 2 {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
            let angle = pos as f64 * freq;
            let (s, c) = angle.sin_cos();
            let (s, c) = (sign * s as f32, c as f32);
            let a = hr[2 * i];
            let b = hr[2 * i + 1];
            hr[2 * i] = a * c - b * s;
            hr[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Causal attention for one query row against `n_keys` cached key/value rows.
///
/// Writes the attention output into `out` and, when given, the per-head
/// probabilities into `probs` (`heads x n_keys`).
pub fn attend_row(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    n_keys: usize,
    heads: usize,
    out: &mut [f32],
    mut probs: Option<&mut [f32]>,
) {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut scores = vec![0.0f32; n_keys];
    out.fill(0.0);
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let mut max = f32::NEG_INFINITY;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            max = max.max(*s);
        }
        let mut sum = 0.0f32;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let oh = &mut out[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            *s /= sum;
            axpy(oh, *s, &values[j * d + h * dh..j * d + (h + 1) * dh]);
        }
        if let Some(p) = probs.as_deref_mut() {
            p[h * n_keys..(h + 1) * n_keys].copy_from_slice(&scores);
        }
    }
}

#[inline]
pub fn elu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
