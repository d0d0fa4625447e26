//! Naive double-precision reference implementations.
//!
//! These are deliberately simple loop-based versions of every operation in
//! the engine, kept independent of the optimized `kernels` path. They back
//! differential tests and the finite-difference gradient oracle, and are not
//! meant to be fast.

/// Output spatial side for `same`/`valid` convolution.
pub fn conv_out_side(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Plain cross-correlation with optional symmetric zero padding.
/// `x` is `[b, c, h, w]`, `w` is `[o, c, kh, kw]`, output `[b, o, ho, wo]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    weights: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, (usize, usize)) {
    let ho = conv_out_side(h, kh, stride, pad);
    let wo = conv_out_side(w, kw, stride, pad);
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((bi * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weights[((oi * c + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, (ho, wo))
}

/// Max pooling with ceil-mode output size and edge-truncated windows.
pub fn maxpool_out_side(input: usize, k: usize, stride: usize) -> usize {
    // ceil((input - k) / stride) + 1
    (input - k).div_ceil(stride) + 1
}

pub fn maxpool2d(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f64>, (usize, usize)) {
    let ho = maxpool_out_side(h, k, stride);
    let wo = maxpool_out_side(w, k, stride);
    let mut out = vec![0.0; b * c * ho * wo];
    for p in 0..b * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let y0 = oy * stride;
                let x0 = ox * stride;
                let y1 = (y0 + k).min(h);
                let x1 = (x0 + k).min(w);
                let mut best = f64::NEG_INFINITY;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        best = best.max(plane[iy * w + ix]);
                    }
                }
                out[(p * ho + oy) * wo + ox] = best;
            }
        }
    }
    (out, (ho, wo))
}

/// Affine map `y = x W^T + b` with `x: [b, din]`, `w: [dout, din]`.
pub fn linear(x: &[f64], (b, din): (usize, usize), w: &[f64], dout: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; b * dout];
    for bi in 0..b {
        for oi in 0..dout {
            let mut acc = bias[oi];
            for ki in 0..din {
                acc += x[bi * din + ki] * w[oi * din + ki];
            }
            out[bi * dout + oi] = acc;
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn softplus(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
        .collect()
}

pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..cols {
            let e = (row[c] - m).exp();
            out[r * cols + c] = e;
            denom += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= denom;
        }
    }
    out
}

/// Batch normalization over the channel axis of `[b, c, s]` using batch
/// statistics (biased variance), as in training mode.
pub fn batchnorm_train(
    x: &[f64],
    (b, c, s): (usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let n = (b * s) as f64;
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            for si in 0..s {
                sum += x[(bi * c + ci) * s + si];
            }
        }
        let mean = sum / n;
        let mut var = 0.0;
        for bi in 0..b {
            for si in 0..s {
                let d = x[(bi * c + ci) * s + si] - mean;
                var += d * d;
            }
        }
        var /= n;
        let inv = 1.0 / (var + eps).sqrt();
        for bi in 0..b {
            for si in 0..s {
                let idx = (bi * c + ci) * s + si;
                out[idx] = gamma[ci] * (x[idx] - mean) * inv + beta[ci];
            }
        }
    }
    out
}

pub fn batchnorm_eval(
    x: &[f64],
    (b, c, s): (usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let inv = 1.0 / (running_var[ci] + eps).sqrt();
        for bi in 0..b {
            for si in 0..s {
                let idx = (bi * c + ci) * s + si;
                out[idx] = gamma[ci] * (x[idx] - running_mean[ci]) * inv + beta[ci];
            }
        }
    }
    out
}

/// Mean negative log-likelihood of the labelled class under row-wise softmax.
pub fn cross_entropy_mean(logits: &[f64], rows: usize, cols: usize, labels: &[usize]) -> f64 {
    let probs = softmax_rows(logits, rows, cols);
    let mut loss = 0.0;
    for r in 0..rows {
        loss -= probs[r * cols + labels[r]].ln();
    }
    loss / rows as f64
}

/// All sliding windows of side `win` with the given stride, in row-major scan
/// order. Input `[b, c, n, n]`, output `[b * r, c, win, win]`.
pub fn extract_windows(
    x: &[f64],
    (b, c, n): (usize, usize, usize),
    win: usize,
    stride: usize,
) -> (Vec<f64>, usize) {
    let g = (n - win) / stride + 1;
    let r = g * g;
    let mut out = vec![0.0; b * r * c * win * win];
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let ri = gy * g + gx;
                for ci in 0..c {
                    for wy in 0..win {
                        for wx in 0..win {
                            let src = ((bi * c + ci) * n + gy * stride + wy) * n + gx * stride + wx;
                            let dst = (((bi * r + ri) * c + ci) * win + wy) * win + wx;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
    (out, r)
}

/// Appends a per-sample feature vector to every pixel's channel stack of every
/// region belonging to that sample. Regions `[b * r, c, w, w]`, features
/// `[b, d]`, output `[b * r, c + d, w, w]`.
pub fn append_broadcast(
    regions: &[f64],
    (br, c, w): (usize, usize, usize),
    feat: &[f64],
    (b, d): (usize, usize),
) -> Vec<f64> {
    let r = br / b;
    let spatial = w * w;
    let mut out = vec![0.0; br * (c + d) * spatial];
    for i in 0..br {
        let bi = i / r;
        for ci in 0..c {
            for si in 0..spatial {
                out[(i * (c + d) + ci) * spatial + si] = regions[(i * c + ci) * spatial + si];
            }
        }
        for di in 0..d {
            for si in 0..spatial {
                out[(i * (c + d) + c + di) * spatial + si] = feat[bi * d + di];
            }
        }
    }
    out
}

/// Weighted sum of per-region feature vectors. Features `[b * r, d]`,
/// weights `[b, r]`, output `[b, d]`.
pub fn attention_pool(feats: &[f64], (b, r, d): (usize, usize, usize)) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |weights: &[f64]| {
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ri in 0..r {
                let w = weights[bi * r + ri];
                for di in 0..d {
                    out[bi * d + di] += w * feats[(bi * r + ri) * d + di];
                }
            }
        }
        out
    }
}

pub fn attention_pool_eval(feats: &[f64], weights: &[f64], (b, r, d): (usize, usize, usize)) -> Vec<f64> {
    attention_pool(feats, (b, r, d))(weights)
}

pub fn concat_cols(parts: &[(&[f64], usize)], rows: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|(_, w)| w).sum();
    let mut out = vec![0.0; rows * total];
    for bi in 0..rows {
        let mut off = 0;
        for (data, width) in parts {
            out[bi * total + off..bi * total + off + width]
                .copy_from_slice(&data[bi * width..(bi + 1) * width]);
            off += width;
        }
    }
    out
}

/// Central finite difference of a scalar function at `x[i]`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Relative error with an absolute floor, the comparison rule used by all
/// gradient checks.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}
