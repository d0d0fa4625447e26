//! Optimized single-precision compute kernels.
//!
//! Convolutions and fully connected layers lower to `matrixmultiply::sgemm`
//! via im2col. Work is split into chunks of fixed size (independent of the
//! thread count) so multi-threaded runs are bit-identical to single-threaded
//! ones: chunks write disjoint output slabs, and reductions over chunk
//! partials happen sequentially in chunk order. Statistics and loss
//! reductions accumulate in f64.

use rayon::prelude::*;

/// Target number of gemm columns per chunk. Fixed so results do not depend
/// on the machine's core count.
const GEMM_COLS_TARGET: usize = 4096;
/// Row chunk for fully connected layers.
const LINEAR_ROWS_CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn ckk(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.h_out * self.w_out
    }
    fn items_per_chunk(&self) -> usize {
        let howo = self.h_out * self.w_out;
        (GEMM_COLS_TARGET / howo).clamp(1, self.batch.max(1))
    }
}

#[inline]
unsafe fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: *const f32,
    rsa: isize,
    csa: isize,
    b: *const f32,
    rsb: isize,
    csb: isize,
    beta: f32,
    c: *mut f32,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Fills `cols` (`[ckk, nb * howo]` row-major) with the im2col expansion of
/// `nb` consecutive batch items starting at `first`. Out-of-bounds (padded)
/// entries must be pre-zeroed by the caller.
fn im2col(x: &[f32], g: &ConvGeom, first: usize, nb: usize, cols: &mut [f32]) {
    let howo = g.h_out * g.w_out;
    let ncols = nb * howo;
    for item in 0..nb {
        let xb = &x[(first + item) * g.c_in * g.h * g.w..];
        for c in 0..g.c_in {
            let plane = &xb[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let dst_base = row * ncols + item * howo;
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = iy as usize * g.w;
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            cols[dst_base + oy * g.w_out + ox] = plane[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of im2col-layout gradients back into the input gradient.
fn col2im_add(dcols: &[f32], g: &ConvGeom, nb: usize, dx: &mut [f32]) {
    let howo = g.h_out * g.w_out;
    let ncols = nb * howo;
    for item in 0..nb {
        let xb = &mut dx[item * g.c_in * g.h * g.w..(item + 1) * g.c_in * g.h * g.w];
        for c in 0..g.c_in {
            let plane = &mut xb[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let src_base = row * ncols + item * howo;
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = iy as usize * g.w;
                        for ox in 0..g.w_out {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            plane[dst_row + ix as usize] += dcols[src_base + oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f32], weights: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let howo = g.h_out * g.w_out;
    let chunk = g.items_per_chunk();
    let ckk = g.ckk();
    let mut out = vec![0.0f32; g.out_len()];
    out.par_chunks_mut(chunk * g.c_out * howo)
        .enumerate()
        .for_each(|(ci, out_slab)| {
            let nb = out_slab.len() / (g.c_out * howo);
            let first = ci * chunk;
            let ncols = nb * howo;
            let mut cols = vec![0.0f32; ckk * ncols];
            im2col(x, g, first, nb, &mut cols);
            let mut slab = vec![0.0f32; g.c_out * ncols];
            unsafe {
                sgemm(
                    g.c_out,
                    ckk,
                    ncols,
                    1.0,
                    weights.as_ptr(),
                    ckk as isize,
                    1,
                    cols.as_ptr(),
                    ncols as isize,
                    1,
                    0.0,
                    slab.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
            for item in 0..nb {
                for o in 0..g.c_out {
                    let src = &slab[o * ncols + item * howo..o * ncols + (item + 1) * howo];
                    let dst = &mut out_slab[(item * g.c_out + o) * howo..(item * g.c_out + o + 1) * howo];
                    let b = bias[o];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
        });
    out
}

pub struct ConvGrads {
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
    pub dx: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &[f32],
    weights: &[f32],
    d_out: &[f32],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let howo = g.h_out * g.w_out;
    let chunk = g.items_per_chunk();
    let ckk = g.ckk();
    let n_chunks = g.batch.div_ceil(chunk);
    let in_len = g.batch * g.c_in * g.h * g.w;

    let mut dx = if need_dx { Some(vec![0.0f32; in_len]) } else { None };
    let mut dx_slabs: Vec<Option<&mut [f32]>> = match dx.as_mut() {
        Some(buf) => buf.chunks_mut(chunk * g.c_in * g.h * g.w).map(Some).collect(),
        None => (0..n_chunks).map(|_| None).collect(),
    };

    let partials: Vec<(Vec<f32>, Vec<f64>)> = dx_slabs
        .par_iter_mut()
        .enumerate()
        .map(|(ci, dx_slab)| {
            let first = ci * chunk;
            let nb = chunk.min(g.batch - first);
            let ncols = nb * howo;
            let mut cols = vec![0.0f32; ckk * ncols];
            im2col(x, g, first, nb, &mut cols);

            // Gather this chunk's upstream gradient into gemm layout [c_out, ncols].
            let mut dslab = vec![0.0f32; g.c_out * ncols];
            for item in 0..nb {
                let src_base = (first + item) * g.c_out * howo;
                for o in 0..g.c_out {
                    dslab[o * ncols + item * howo..o * ncols + (item + 1) * howo]
                        .copy_from_slice(&d_out[src_base + o * howo..src_base + (o + 1) * howo]);
                }
            }

            // dW partial = dslab · colsᵀ
            let mut dw = vec![0.0f32; g.c_out * ckk];
            unsafe {
                sgemm(
                    g.c_out,
                    ncols,
                    ckk,
                    1.0,
                    dslab.as_ptr(),
                    ncols as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    ncols as isize,
                    0.0,
                    dw.as_mut_ptr(),
                    ckk as isize,
                    1,
                );
            }
            let mut db = vec![0.0f64; g.c_out];
            for o in 0..g.c_out {
                let mut acc = 0.0f64;
                for v in &dslab[o * ncols..(o + 1) * ncols] {
                    acc += *v as f64;
                }
                db[o] = acc;
            }

            if let Some(slab) = dx_slab {
                // dcols = Wᵀ · dslab, then scatter back to input positions.
                let mut dcols = vec![0.0f32; ckk * ncols];
                unsafe {
                    sgemm(
                        ckk,
                        g.c_out,
                        ncols,
                        1.0,
                        weights.as_ptr(),
                        1,
                        ckk as isize,
                        dslab.as_ptr(),
                        ncols as isize,
                        1,
                        0.0,
                        dcols.as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
                col2im_add(&dcols, g, nb, slab);
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![0.0f32; g.c_out * ckk];
    let mut db64 = vec![0.0f64; g.c_out];
    for (pdw, pdb) in &partials {
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a += *b;
        }
        for (a, b) in db64.iter_mut().zip(pdb) {
            *a += *b;
        }
    }
    let db = db64.iter().map(|&v| v as f32).collect();
    ConvGrads { dw, db, dx }
}

pub fn maxpool_out_side(input: usize, k: usize, stride: usize) -> usize {
    (input - k).div_ceil(stride) + 1
}

/// Ceil-mode max pooling; windows at the edge are truncated to the input.
/// Returns the pooled tensor and, per output element, the flat index of the
/// (first) maximum inside its input plane.
pub fn maxpool2d_forward(
    x: &[f32],
    (planes, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
) -> (Vec<f32>, Vec<u32>, (usize, usize)) {
    let ho = maxpool_out_side(h, k, stride);
    let wo = maxpool_out_side(w, k, stride);
    let mut out = vec![0.0f32; planes * ho * wo];
    let mut arg = vec![0u32; planes * ho * wo];
    out.par_chunks_mut(ho * wo)
        .zip(arg.par_chunks_mut(ho * wo))
        .enumerate()
        .for_each(|(p, (op, ap))| {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let y1 = (y0 + k).min(h);
                    let x1 = (x0 + k).min(w);
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = y0 * w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = plane[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    op[oy * wo + ox] = best;
                    ap[oy * wo + ox] = best_idx as u32;
                }
            }
        });
    (out, arg, (ho, wo))
}

pub fn maxpool2d_backward(
    d_out: &[f32],
    arg: &[u32],
    (planes, h, w): (usize, usize, usize),
    out_plane_len: usize,
) -> Vec<f32> {
    let mut dx = vec![0.0f32; planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, plane)| {
        let dop = &d_out[p * out_plane_len..(p + 1) * out_plane_len];
        let ap = &arg[p * out_plane_len..(p + 1) * out_plane_len];
        for (g, &idx) in dop.iter().zip(ap) {
            plane[idx as usize] += g;
        }
    });
    dx
}

/// `y = x Wᵀ + b` with `x: [rows, din]`, `w: [dout, din]`.
pub fn linear_forward(x: &[f32], (rows, din): (usize, usize), w: &[f32], dout: usize, bias: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * dout];
    out.par_chunks_mut(LINEAR_ROWS_CHUNK * dout)
        .enumerate()
        .for_each(|(ci, slab)| {
            let r = slab.len() / dout;
            let first = ci * LINEAR_ROWS_CHUNK;
            unsafe {
                sgemm(
                    r,
                    din,
                    dout,
                    1.0,
                    x.as_ptr().add(first * din),
                    din as isize,
                    1,
                    w.as_ptr(),
                    1,
                    din as isize,
                    0.0,
                    slab.as_mut_ptr(),
                    dout as isize,
                    1,
                );
            }
            for row in slab.chunks_mut(dout) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
            }
        });
    out
}

pub struct LinearGrads {
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
    pub dx: Option<Vec<f32>>,
}

pub fn linear_backward(
    x: &[f32],
    (rows, din): (usize, usize),
    w: &[f32],
    dout: usize,
    d_out: &[f32],
    need_dx: bool,
) -> LinearGrads {
    let n_chunks = rows.div_ceil(LINEAR_ROWS_CHUNK);
    let mut dx = if need_dx { Some(vec![0.0f32; rows * din]) } else { None };
    let mut dx_slabs: Vec<Option<&mut [f32]>> = match dx.as_mut() {
        Some(buf) => buf.chunks_mut(LINEAR_ROWS_CHUNK * din).map(Some).collect(),
        None => (0..n_chunks).map(|_| None).collect(),
    };

    let partials: Vec<(Vec<f32>, Vec<f64>)> = dx_slabs
        .par_iter_mut()
        .enumerate()
        .map(|(ci, dx_slab)| {
            let first = ci * LINEAR_ROWS_CHUNK;
            let r = LINEAR_ROWS_CHUNK.min(rows - first);
            let dy = &d_out[first * dout..(first + r) * dout];
            let xc = &x[first * din..(first + r) * din];

            // dW partial = dyᵀ · x
            let mut dw = vec![0.0f32; dout * din];
            unsafe {
                sgemm(
                    dout,
                    r,
                    din,
                    1.0,
                    dy.as_ptr(),
                    1,
                    dout as isize,
                    xc.as_ptr(),
                    din as isize,
                    1,
                    0.0,
                    dw.as_mut_ptr(),
                    din as isize,
                    1,
                );
            }
            let mut db = vec![0.0f64; dout];
            for row in dy.chunks(dout) {
                for (a, v) in db.iter_mut().zip(row) {
                    *a += *v as f64;
                }
            }
            if let Some(slab) = dx_slab {
                // dx = dy · W
                unsafe {
                    sgemm(
                        r,
                        dout,
                        din,
                        1.0,
                        dy.as_ptr(),
                        dout as isize,
                        1,
                        w.as_ptr(),
                        din as isize,
                        1,
                        0.0,
                        slab.as_mut_ptr(),
                        din as isize,
                        1,
                    );
                }
            }
            (dw, db)
        })
        .collect();

    let mut dw = vec![0.0f32; dout * din];
    let mut db64 = vec![0.0f64; dout];
    for (pdw, pdb) in &partials {
        for (a, b) in dw.iter_mut().zip(pdw) {
            *a += *b;
        }
        for (a, b) in db64.iter_mut().zip(pdb) {
            *a += *b;
        }
    }
    LinearGrads {
        dw,
        db: db64.iter().map(|&v| v as f32).collect(),
        dx,
    }
}

/// Per-channel mean and biased variance over `[b, c, s]`, f64 accumulation.
pub fn channel_stats(x: &[f32], (b, c, s): (usize, usize, usize)) -> (Vec<f32>, Vec<f32>) {
    let n = (b * s) as f64;
    let stats: Vec<(f32, f32)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                for v in &x[base..base + s] {
                    sum += *v as f64;
                }
            }
            let mean = sum / n;
            let mut var = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                for v in &x[base..base + s] {
                    let d = *v as f64 - mean;
                    var += d * d;
                }
            }
            (mean as f32, (var / n) as f32)
        })
        .collect();
    (
        stats.iter().map(|s| s.0).collect(),
        stats.iter().map(|s| s.1).collect(),
    )
}

pub fn bn_apply(
    x: &[f32],
    (b, c, s): (usize, usize, usize),
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    inv_std: &[f32],
) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    out.par_chunks_mut(s).enumerate().for_each(|(p, op)| {
        let ci = p % c;
        let (scale, m, bt) = (gamma[ci] * inv_std[ci], mean[ci], beta[ci]);
        for (o, v) in op.iter_mut().zip(&x[p * s..(p + 1) * s]) {
            *o = (v - m) * scale + bt;
        }
    });
    let _ = b;
    out
}

pub struct BnGrads {
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
    pub dx: Vec<f32>,
}

/// Training-mode batch-norm backward using saved batch statistics.
pub fn bn_backward_train(
    x: &[f32],
    (b, c, s): (usize, usize, usize),
    gamma: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    d_out: &[f32],
) -> BnGrads {
    let n = (b * s) as f64;
    let per_channel: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut s1 = 0.0f64; // Σ dy
            let mut s2 = 0.0f64; // Σ dy · x̂
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                for i in 0..s {
                    let dy = d_out[base + i] as f64;
                    let xh = ((x[base + i] - mean[ci]) * inv_std[ci]) as f64;
                    s1 += dy;
                    s2 += dy * xh;
                }
            }
            (s1, s2)
        })
        .collect();

    let mut dx = vec![0.0f32; x.len()];
    dx.par_chunks_mut(s).enumerate().for_each(|(p, dxp)| {
        let ci = p % c;
        let (s1, s2) = per_channel[ci];
        let g = gamma[ci] as f64;
        let inv = inv_std[ci] as f64;
        let m = mean[ci] as f64;
        let coef = g * inv / n;
        let base = p * s;
        for i in 0..s {
            let dy = d_out[base + i] as f64;
            let xh = (x[base + i] as f64 - m) * inv;
            dxp[i] = (coef * (n * dy - s1 - xh * s2)) as f32;
        }
    });
    BnGrads {
        dgamma: per_channel.iter().map(|p| p.1 as f32).collect(),
        dbeta: per_channel.iter().map(|p| p.0 as f32).collect(),
        dx,
    }
}

/// Eval-mode batch-norm backward (running statistics are constants).
pub fn bn_backward_eval(
    x: &[f32],
    (b, c, s): (usize, usize, usize),
    gamma: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    d_out: &[f32],
) -> BnGrads {
    let per_channel: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for bi in 0..b {
                let base = (bi * c + ci) * s;
                for i in 0..s {
                    let dy = d_out[base + i] as f64;
                    let xh = ((x[base + i] - mean[ci]) * inv_std[ci]) as f64;
                    s1 += dy;
                    s2 += dy * xh;
                }
            }
            (s1, s2)
        })
        .collect();
    let mut dx = vec![0.0f32; x.len()];
    dx.par_chunks_mut(s).enumerate().for_each(|(p, dxp)| {
        let ci = p % c;
        let scale = gamma[ci] * inv_std[ci];
        let base = p * s;
        for i in 0..s {
            dxp[i] = d_out[base + i] * scale;
        }
    });
    BnGrads {
        dgamma: per_channel.iter().map(|p| p.1 as f32).collect(),
        dbeta: per_channel.iter().map(|p| p.0 as f32).collect(),
        dx,
    }
}

pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(out: &[f32], d_out: &[f32]) -> Vec<f32> {
    out.iter()
        .zip(d_out)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn softplus_forward(x: &[f32]) -> Vec<f32> {
    x.iter()
        .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
        .collect()
}

pub fn softplus_backward(x: &[f32], d_out: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(d_out)
        .map(|(&v, &g)| g / (1.0 + (-v).exp()))
        .collect()
}

pub fn softmax_rows_forward(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    out.par_chunks_mut(cols).enumerate().for_each(|(r, op)| {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for (o, &v) in op.iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            denom += e as f64;
        }
        let inv = (1.0 / denom) as f32;
        for o in op.iter_mut() {
            *o *= inv;
        }
    });
    out
}

pub fn softmax_rows_backward(out: &[f32], rows: usize, cols: usize, d_out: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; rows * cols];
    dx.par_chunks_mut(cols).enumerate().for_each(|(r, dxp)| {
        let y = &out[r * cols..(r + 1) * cols];
        let dy = &d_out[r * cols..(r + 1) * cols];
        let mut dot = 0.0f64;
        for (a, b) in y.iter().zip(dy) {
            dot += (*a as f64) * (*b as f64);
        }
        for i in 0..cols {
            dxp[i] = y[i] * (dy[i] - dot as f32);
        }
    });
    dx
}

/// Mean cross-entropy over rows; returns (loss, softmax probabilities).
pub fn cross_entropy_forward(logits: &[f32], rows: usize, cols: usize, labels: &[u32]) -> (f32, Vec<f32>) {
    let probs = softmax_rows_forward(logits, rows, cols);
    let mut loss = 0.0f64;
    for (r, &lbl) in labels.iter().enumerate() {
        loss -= (probs[r * cols + lbl as usize].max(f32::MIN_POSITIVE) as f64).ln();
    }
    ((loss / rows as f64) as f32, probs)
}

pub fn cross_entropy_backward(
    probs: &[f32],
    rows: usize,
    cols: usize,
    labels: &[u32],
    upstream: f32,
) -> Vec<f32> {
    let scale = upstream / rows as f32;
    let mut d = vec![0.0f32; rows * cols];
    for (r, &lbl) in labels.iter().enumerate() {
        for k in 0..cols {
            let p = probs[r * cols + k];
            let t = if k == lbl as usize { 1.0 } else { 0.0 };
            d[r * cols + k] = (p - t) * scale;
        }
    }
    d
}

/// Sliding-window extraction `[b, c, n, n] -> [b * r, c, win, win]` in
/// row-major scan order of the window grid.
pub fn extract_windows_forward(
    x: &[f32],
    (b, c, n): (usize, usize, usize),
    win: usize,
    stride: usize,
) -> (Vec<f32>, usize) {
    let g = (n - win) / stride + 1;
    let r = g * g;
    let mut out = vec![0.0f32; b * r * c * win * win];
    out.par_chunks_mut(r * c * win * win)
        .enumerate()
        .for_each(|(bi, ob)| {
            for gy in 0..g {
                for gx in 0..g {
                    let ri = gy * g + gx;
                    for ci in 0..c {
                        for wy in 0..win {
                            let src = ((bi * c + ci) * n + gy * stride + wy) * n + gx * stride;
                            let dst = ((ri * c + ci) * win + wy) * win;
                            ob[dst..dst + win].copy_from_slice(&x[src..src + win]);
                        }
                    }
                }
            }
        });
    (out, r)
}

pub fn extract_windows_backward(
    d_out: &[f32],
    (b, c, n): (usize, usize, usize),
    win: usize,
    stride: usize,
) -> Vec<f32> {
    let g = (n - win) / stride + 1;
    let r = g * g;
    let mut dx = vec![0.0f32; b * c * n * n];
    dx.par_chunks_mut(c * n * n).enumerate().for_each(|(bi, dxb)| {
        let db = &d_out[bi * r * c * win * win..(bi + 1) * r * c * win * win];
        for gy in 0..g {
            for gx in 0..g {
                let ri = gy * g + gx;
                for ci in 0..c {
                    for wy in 0..win {
                        let dst = (ci * n + gy * stride + wy) * n + gx * stride;
                        let src = ((ri * c + ci) * win + wy) * win;
                        for wx in 0..win {
                            dxb[dst + wx] += db[src + wx];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// `[b*r, c, w, w] + [b, d] -> [b*r, c+d, w, w]`, the reference feature
/// replicated across every pixel of every region of its sample.
pub fn append_broadcast_forward(
    regions: &[f32],
    (br, c, w): (usize, usize, usize),
    feat: &[f32],
    (b, d): (usize, usize),
) -> Vec<f32> {
    let r = br / b;
    let spatial = w * w;
    let mut out = vec![0.0f32; br * (c + d) * spatial];
    out.par_chunks_mut((c + d) * spatial)
        .enumerate()
        .for_each(|(i, ob)| {
            let bi = i / r;
            ob[..c * spatial].copy_from_slice(&regions[i * c * spatial..(i + 1) * c * spatial]);
            for di in 0..d {
                let v = feat[bi * d + di];
                for o in &mut ob[(c + di) * spatial..(c + di + 1) * spatial] {
                    *o = v;
                }
            }
        });
    out
}

pub fn append_broadcast_backward(
    d_out: &[f32],
    (br, c, w): (usize, usize, usize),
    (b, d): (usize, usize),
) -> (Vec<f32>, Vec<f32>) {
    let r = br / b;
    let spatial = w * w;
    let mut d_regions = vec![0.0f32; br * c * spatial];
    d_regions
        .par_chunks_mut(c * spatial)
        .enumerate()
        .for_each(|(i, dr)| {
            dr.copy_from_slice(&d_out[i * (c + d) * spatial..i * (c + d) * spatial + c * spatial]);
        });
    let mut d_feat = vec![0.0f32; b * d];
    d_feat.par_chunks_mut(d).enumerate().for_each(|(bi, df)| {
        for ri in 0..r {
            let base = ((bi * r + ri) * (c + d) + c) * spatial;
            for (di, dfv) in df.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for s in 0..spatial {
                    acc += d_out[base + di * spatial + s];
                }
                *dfv += acc;
            }
        }
    });
    (d_regions, d_feat)
}

/// `out[b] = Σ_r weights[b, r] · feats[b * r + r]`.
pub fn attention_pool_forward(
    feats: &[f32],
    weights: &[f32],
    (b, r, d): (usize, usize, usize),
) -> Vec<f32> {
    let mut out = vec![0.0f32; b * d];
    out.par_chunks_mut(d).enumerate().for_each(|(bi, ob)| {
        for ri in 0..r {
            let wgt = weights[bi * r + ri];
            let f = &feats[(bi * r + ri) * d..(bi * r + ri + 1) * d];
            for (o, v) in ob.iter_mut().zip(f) {
                *o += wgt * v;
            }
        }
    });
    out
}

pub fn attention_pool_backward(
    feats: &[f32],
    weights: &[f32],
    (b, r, d): (usize, usize, usize),
    d_out: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut d_feats = vec![0.0f32; b * r * d];
    let mut d_weights = vec![0.0f32; b * r];
    d_feats
        .par_chunks_mut(r * d)
        .zip(d_weights.par_chunks_mut(r))
        .enumerate()
        .for_each(|(bi, (dfb, dwb))| {
            let go = &d_out[bi * d..(bi + 1) * d];
            for ri in 0..r {
                let wgt = weights[bi * r + ri];
                let f = &feats[(bi * r + ri) * d..(bi * r + ri + 1) * d];
                let df = &mut dfb[ri * d..(ri + 1) * d];
                let mut dot = 0.0f64;
                for i in 0..d {
                    df[i] = wgt * go[i];
                    dot += (f[i] as f64) * (go[i] as f64);
                }
                dwb[ri] = dot as f32;
            }
        });
    (d_feats, d_weights)
}
