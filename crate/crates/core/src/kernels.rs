//! Raw numeric kernels: plain loops over slices, no shape checking.
//!
//! The tape (`crate::tape`) owns validation and gradient bookkeeping; these
//! functions implement the arithmetic. All are deterministic sequential
//! loops so a fixed seed reproduces bit-identical results.

/// x[B x n] * w[m x n]^T -> [B x m].
pub fn mat_bt(x: &[f64], w: &[f64], b: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * m];
    for bi in 0..b {
        let xr = &x[bi * n..(bi + 1) * n];
        for i in 0..m {
            let wr = &w[i * n..(i + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += xr[j] * wr[j];
            }
            out[bi * m + i] = s;
        }
    }
    out
}

/// x[B x m] * w[m x n] -> [B x n].
pub fn mat_bb(x: &[f64], w: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * n];
    for bi in 0..b {
        let xr = &x[bi * m..(bi + 1) * m];
        let or = &mut out[bi * n..(bi + 1) * n];
        for i in 0..m {
            let xv = xr[i];
            if xv == 0.0 {
                continue;
            }
            let wr = &w[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += xv * wr[j];
            }
        }
    }
    out
}

/// a[B x m]^T * b[B x n] -> [m x n] (sum over the batch axis).
pub fn outer_acc(a: &[f64], bb: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for bi in 0..b {
        let ar = &a[bi * m..(bi + 1) * m];
        let br = &bb[bi * n..(bi + 1) * n];
        for i in 0..m {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// 3x3 cross-correlation with zero padding 1, stride 1.
/// x: [B, CI, H, W], k: [CO, CI, 3, 3], bias: [CO] -> [B, CO, H, W].
pub fn conv3x3_forward(
    x: &[f64],
    k: &[f64],
    bias: &[f64],
    (b, ci, h, w): (usize, usize, usize, usize),
    co: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * co * h * w];
    let hw = h * w;
    for bi in 0..b {
        for o in 0..co {
            let obase = (bi * co + o) * hw;
            for e in out[obase..obase + hw].iter_mut() {
                *e = bias[o];
            }
            for c in 0..ci {
                let xbase = (bi * ci + c) * hw;
                let kbase = (o * ci + c) * 9;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let kv = k[kbase + u * 3 + v];
                        if kv == 0.0 {
                            continue;
                        }
                        // output (i,j) reads input (i+u-1, j+v-1)
                        let (i0, i1) = row_range(h, u);
                        let (j0, j1) = row_range(w, v);
                        for i in i0..i1 {
                            let xrow = xbase + (i + u - 1) * w;
                            let orow = obase + i * w;
                            for j in j0..j1 {
                                out[orow + j] += kv * x[xrow + j + v - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Valid output index range for a kernel tap offset (tap - 1 in [-1, 0, 1]).
fn row_range(extent: usize, tap: usize) -> (usize, usize) {
    match tap {
        0 => (1, extent),
        1 => (0, extent),
        _ => (0, extent.saturating_sub(1)),
    }
}

/// Gradient of conv3x3 w.r.t. the input.
pub fn conv3x3_backward_x(
    g: &[f64],
    k: &[f64],
    (b, ci, h, w): (usize, usize, usize, usize),
    co: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; b * ci * h * w];
    let hw = h * w;
    for bi in 0..b {
        for o in 0..co {
            let gbase = (bi * co + o) * hw;
            for c in 0..ci {
                let xbase = (bi * ci + c) * hw;
                let kbase = (o * ci + c) * 9;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let kv = k[kbase + u * 3 + v];
                        if kv == 0.0 {
                            continue;
                        }
                        let (i0, i1) = row_range(h, u);
                        let (j0, j1) = row_range(w, v);
                        for i in i0..i1 {
                            let xrow = xbase + (i + u - 1) * w;
                            let grow = gbase + i * w;
                            for j in j0..j1 {
                                gx[xrow + j + v - 1] += kv * g[grow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of conv3x3 w.r.t. the kernel.
pub fn conv3x3_backward_k(
    g: &[f64],
    x: &[f64],
    (b, ci, h, w): (usize, usize, usize, usize),
    co: usize,
) -> Vec<f64> {
    let mut gk = vec![0.0; co * ci * 9];
    let hw = h * w;
    for bi in 0..b {
        for o in 0..co {
            let gbase = (bi * co + o) * hw;
            for c in 0..ci {
                let xbase = (bi * ci + c) * hw;
                let kbase = (o * ci + c) * 9;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let (i0, i1) = row_range(h, u);
                        let (j0, j1) = row_range(w, v);
                        let mut s = 0.0;
                        for i in i0..i1 {
                            let xrow = xbase + (i + u - 1) * w;
                            let grow = gbase + i * w;
                            for j in j0..j1 {
                                s += g[grow + j] * x[xrow + j + v - 1];
                            }
                        }
                        gk[kbase + u * 3 + v] += s;
                    }
                }
            }
        }
    }
    gk
}

/// Gradient of conv3x3 w.r.t. the bias: sum of g over batch and space.
pub fn conv3x3_backward_bias(g: &[f64], (b, co, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let mut gb = vec![0.0; co];
    let hw = h * w;
    for bi in 0..b {
        for o in 0..co {
            let base = (bi * co + o) * hw;
            gb[o] += g[base..base + hw].iter().sum::<f64>();
        }
    }
    gb
}

/// Per-channel mean and biased variance over (B, H, W) of an NCHW tensor.
pub fn channel_stats(x: &[f64], (b, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            mean[ch] += x[base..base + hw].iter().sum::<f64>();
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let m = mean[ch];
            var[ch] += x[base..base + hw].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

/// Normalize NCHW input with per-channel statistics: gamma*(x-mean)*inv+beta,
/// inv[c] = 1/sqrt(var[c]+eps).
pub fn bn_normalize(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let inv = 1.0 / (var[ch] + eps).sqrt();
            let (g, m, bt) = (gamma[ch], mean[ch], beta[ch]);
            for idx in base..base + hw {
                out[idx] = g * (x[idx] - m) * inv + bt;
            }
        }
    }
    out
}

/// Batch-statistics batchnorm backward. Returns (gx, ggamma, gbeta).
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_train(
    g: &[f64],
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let m = mean[ch];
        // accumulate sums over the channel
        let mut sum_g = 0.0;
        let mut sum_g_xhat = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for idx in base..base + hw {
                let xhat = (x[idx] - m) * inv;
                sum_g += g[idx];
                sum_g_xhat += g[idx] * xhat;
            }
        }
        ggamma[ch] = sum_g_xhat;
        gbeta[ch] = sum_g;
        let gm = gamma[ch];
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for idx in base..base + hw {
                let xhat = (x[idx] - m) * inv;
                gx[idx] = gm * inv / n * (n * g[idx] - sum_g - xhat * sum_g_xhat);
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Running-statistics batchnorm backward (statistics are constants).
pub fn bn_backward_eval(
    g: &[f64],
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        let m = mean[ch];
        let gm = gamma[ch];
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for idx in base..base + hw {
                gx[idx] = g[idx] * gm * inv;
                ggamma[ch] += g[idx] * (x[idx] - m) * inv;
                gbeta[ch] += g[idx];
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Row-wise softmax over the last axis, numerically stabilized.
pub fn softmax_rows(x: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let or = &mut out[r * n..(r + 1) * n];
        let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Softmax backward: dx_i = y_i * (g_i - sum_j g_j y_j) per row.
pub fn softmax_backward(g: &[f64], y: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut gx = vec![0.0; g.len()];
    for r in 0..rows {
        let gr = &g[r * n..(r + 1) * n];
        let yr = &y[r * n..(r + 1) * n];
        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            gx[r * n + j] = yr[j] * (gr[j] - dot);
        }
    }
    gx
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mat_bt_matches_naive_triple_loop() {
        // 2x3 times (4x3)^T
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let out = mat_bt(&x, &w, 2, 3, 4);
        for bi in 0..2 {
            for i in 0..4 {
                let mut s = 0.0;
                for j in 0..3 {
                    s += x[bi * 3 + j] * w[i * 3 + j];
                }
                assert!((out[bi * 4 + i] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // center tap
        let out = conv3x3_forward(&x, &k, &[0.0], (1, 1, 3, 3), 1);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_ones_counts_overlaps() {
        let x = vec![1.0; 9];
        let k = vec![1.0; 9];
        let out = conv3x3_forward(&x, &k, &[0.0], (1, 1, 3, 3), 1);
        assert_eq!(out[4], 9.0); // center sees all taps
        assert_eq!(out[0], 4.0); // corner sees a 2x2 patch
        assert_eq!(out[2], 4.0);
        assert_eq!(out[6], 4.0);
        assert_eq!(out[8], 4.0);
        assert_eq!(out[1], 6.0); // edge sees a 2x3 patch
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0, 2.0, 3.0, -5.0, 0.0, 5.0];
        let y = softmax_rows(&x, 2, 3);
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_channel_has_zero_variance() {
        let x = vec![3.5; 2 * 2 * 4];
        let (mean, var) = channel_stats(&x, (2, 2, 2, 2));
        assert_eq!(mean, vec![3.5, 3.5]);
        assert_eq!(var, vec![0.0, 0.0]);
    }
}
