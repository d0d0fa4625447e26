//! Reverse-mode gradient tape.
//!
//! Operations execute eagerly through the optimized kernels and append a
//! node describing how to back-propagate. Nodes are created in topological
//! order, so replaying them in reverse visits every consumer before its
//! producer. Parameters register as leaves carrying their `ParamId`, and
//! their gradients are exported back to the `ParamStore` after `backward`.

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{Mode, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding chosen so stride-1 convolution preserves spatial size.
    Same,
    /// No padding.
    Valid,
}

enum Op {
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: kernels::ConvGeom,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<u32>,
        in_hw: (usize, usize),
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        /// Whether the saved statistics were computed from this batch (train
        /// mode) or taken from running buffers (eval mode); the backward
        /// formulas differ.
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<u8>,
        scale: f32,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u32>,
        probs: Vec<f32>,
    },
    Reshape {
        x: Var,
    },
    ConcatCols {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    ExtractWindows {
        x: Var,
        win: usize,
        stride: usize,
    },
    PermuteBlocks {
        x: Var,
        perm: Vec<usize>,
    },
    AppendBroadcast {
        regions: Var,
        feat: Var,
    },
    AttentionPool {
        feats: Var,
        weights: Var,
    },
    SumAll {
        x: Var,
    },
    WeightedSum {
        x: Var,
        coeffs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    param: Option<ParamId>,
    op: Option<Op>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, param: Option<ParamId>, op: Option<Op>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            param,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input (data).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, None, None)
    }

    /// Differentiable leaf without parameter identity (tests, probes).
    pub fn leaf_grad(&mut self, value: Tensor) -> Var {
        self.push(value, true, None, None)
    }

    /// Registers a parameter value on the tape. Gradients flow back to the
    /// store via [`Tape::export_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), true, Some(id), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn out_needs(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].needs_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: Padding) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", "rank-4 input and kernels", format!("{xs:?} / {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("{} input channels", ws[1]),
                format!("{}", xs[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", format!("bias [{}]", ws[0]), format!("{bs:?}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (kh, kw) = (ws[2], ws[3]);
        let pad_px = match pad {
            Padding::Valid => 0,
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return Err(Error::Config(format!(
                        "same padding requires square odd kernels, got {kh}x{kw}"
                    )));
                }
                (kh - 1) / 2
            }
        };
        if kh > xs[2] + 2 * pad_px || kw > xs[3] + 2 * pad_px {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} within padded input"),
                format!("input {}x{}", xs[2], xs[3]),
            ));
        }
        let geom = kernels::ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh,
            kw,
            stride,
            pad: pad_px,
            h_out: (xs[2] + 2 * pad_px - kh) / stride + 1,
            w_out: (xs[3] + 2 * pad_px - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::new(vec![geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        let needs = self.out_needs(&[x, w, b]);
        Ok(self.push(t, needs, None, Some(Op::Conv2d { x, w, b, geom })))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("maxpool2d", "rank-4 input", format!("{xs:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(Error::Config("maxpool2d k and stride must be >= 1".into()));
        }
        if k > xs[2] || k > xs[3] {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {k} within input"),
                format!("{}x{}", xs[2], xs[3]),
            ));
        }
        let planes = xs[0] * xs[1];
        let (out, argmax, (ho, wo)) =
            kernels::maxpool2d_forward(self.value(x).data(), (planes, xs[2], xs[3]), k, stride);
        let t = Tensor::new(vec![xs[0], xs[1], ho, wo], out)?;
        let needs = self.out_needs(&[x]);
        Ok(self.push(
            t,
            needs,
            None,
            Some(Op::MaxPool2d {
                x,
                argmax,
                in_hw: (xs[2], xs[3]),
            }),
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("linear", "rank-2 input and weights", format!("{xs:?} / {ws:?}")));
        }
        if xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("input [*, {}], bias [{}]", ws[1], ws[0]),
                format!("input {xs:?}, bias {bs:?}"),
            ));
        }
        let out = kernels::linear_forward(
            self.value(x).data(),
            (xs[0], xs[1]),
            self.value(w).data(),
            ws[0],
            self.value(b).data(),
        );
        let t = Tensor::new(vec![xs[0], ws[0]], out)?;
        let needs = self.out_needs(&[x, w, b]);
        Ok(self.push(t, needs, None, Some(Op::Linear { x, w, b })))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu_forward(self.value(x).data());
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let needs = self.out_needs(&[x]);
        self.push(t, needs, None, Some(Op::Relu { x }))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = kernels::softplus_forward(self.value(x).data());
        let t = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let needs = self.out_needs(&[x]);
        self.push(t, needs, None, Some(Op::Softplus { x }))
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] == 0 {
            return Err(Error::shape("softmax", "rank-2 [rows, n>=1]", format!("{xs:?}")));
        }
        let out = kernels::softmax_rows_forward(self.value(x).data(), xs[0], xs[1]);
        let t = Tensor::new(xs, out)?;
        let needs = self.out_needs(&[x]);
        Ok(self.push(t, needs, None, Some(Op::SoftmaxRows { x })))
    }

    /// Batch normalization. In train mode normalizes with batch statistics and
    /// returns them so the caller can maintain running estimates; in eval mode
    /// the provided running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<f32>, Vec<f32>)>)> {
        let xs = self.value(x).shape().to_vec();
        let (b, c, s) = match xs.len() {
            4 => (xs[0], xs[1], xs[2] * xs[3]),
            2 => (xs[0], xs[1], 1),
            _ => return Err(Error::shape("batchnorm", "rank-2 or rank-4 input", format!("{xs:?}"))),
        };
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("gamma/beta [{c}]"),
                format!(
                    "[{}]/[{}]",
                    self.value(gamma).numel(),
                    self.value(beta).numel()
                ),
            ));
        }
        match mode {
            Mode::Train => {
                if b < 2 {
                    return Err(Error::Config(
                        "batchnorm in train mode requires batch size >= 2".into(),
                    ));
                }
                let (mean, var) = kernels::channel_stats(self.value(x).data(), (b, c, s));
                let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                let out = kernels::bn_apply(
                    self.value(x).data(),
                    (b, c, s),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    &mean,
                    &inv_std,
                );
                let t = Tensor::new(xs, out)?;
                let needs = self.out_needs(&[x, gamma, beta]);
                let stats = (mean.clone(), var);
                let v = self.push(
                    t,
                    needs,
                    None,
                    Some(Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        mean,
                        inv_std,
                        batch_stats: true,
                    }),
                );
                Ok((v, Some(stats)))
            }
            Mode::Eval => {
                let inv_std: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                let out = kernels::bn_apply(
                    self.value(x).data(),
                    (b, c, s),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    running_mean,
                    &inv_std,
                );
                let t = Tensor::new(xs, out)?;
                let needs = self.out_needs(&[x, gamma, beta]);
                let v = self.push(
                    t,
                    needs,
                    None,
                    Some(Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        mean: running_mean.to_vec(),
                        inv_std,
                        batch_stats: false,
                    }),
                );
                Ok((v, None))
            }
        }
    }

    /// Inverted dropout; eval mode and rate 0 are exact identities.
    pub fn dropout(&mut self, x: Var, rate: f32, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f32>() >= rate)).collect();
        let out: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m == 1 { v * scale } else { 0.0 })
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.out_needs(&[x]);
        Ok(self.push(t, needs, None, Some(Op::Dropout { x, mask, scale })))
    }

    /// Mean softmax cross-entropy over a `[batch, classes]` logit matrix.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let xs = self.value(logits).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("cross_entropy", "rank-2 logits", format!("{xs:?}")));
        }
        if labels.len() != xs[0] {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels", xs[0]),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= xs[1]) {
            return Err(Error::Usage(format!(
                "label {bad} out of range for {} classes",
                xs[1]
            )));
        }
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits).data(), xs[0], xs[1], labels);
        let needs = self.out_needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            None,
            Some(Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.out_needs(&[x]);
        Ok(self.push(t, needs, None, Some(Op::Reshape { x })))
    }

    /// Flattens all trailing axes: `[b, ...] -> [b, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let rows = xs[0];
        let cols = self.value(x).numel() / rows;
        self.reshape(x, vec![rows, cols])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let rows = self.value(xs[0]).shape()[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", format!("rank-2 with {rows} rows"), format!("{s:?}")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        for bi in 0..rows {
            let mut off = 0;
            for (i, &v) in xs.iter().enumerate() {
                let w = widths[i];
                out[bi * total + off..bi * total + off + w]
                    .copy_from_slice(&self.value(v).data()[bi * w..(bi + 1) * w]);
                off += w;
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let needs = self.out_needs(xs);
        Ok(self.push(
            t,
            needs,
            None,
            Some(Op::ConcatCols {
                xs: xs.to_vec(),
                widths,
            }),
        ))
    }

    /// All sliding windows over a `[b, c, n, n]` tensor, row-major scan order,
    /// as `[b * r, c, win, win]`.
    pub fn extract_windows(&mut self, x: Var, win: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || xs[2] != xs[3] {
            return Err(Error::shape("extract_windows", "rank-4 square input", format!("{xs:?}")));
        }
        let n = xs[2];
        if win > n {
            return Err(Error::Geometry(format!(
                "window {win} larger than neighborhood {n}"
            )));
        }
        if stride == 0 || (n - win) % stride != 0 {
            return Err(Error::Geometry(format!(
                "neighborhood {n} minus window {win} must be divisible by stride {stride}"
            )));
        }
        let (out, r) = kernels::extract_windows_forward(self.value(x).data(), (xs[0], xs[1], n), win, stride);
        let t = Tensor::new(vec![xs[0] * r, xs[1], win, win], out)?;
        let needs = self.out_needs(&[x]);
        Ok(self.push(t, needs, None, Some(Op::ExtractWindows { x, win, stride })))
    }

    /// Permutes the `r` blocks belonging to each sample of a `[b * r, ...]`
    /// tensor: block `i` of the output is block `perm[i]` of the input.
    pub fn permute_blocks(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let r = perm.len();
        if r == 0 || xs[0] % r != 0 {
            return Err(Error::shape(
                "permute_blocks",
                format!("leading axis divisible by {r}"),
                format!("{xs:?}"),
            ));
        }
        let mut seen = vec![false; r];
        for &p in perm {
            if p >= r || seen[p] {
                return Err(Error::Usage(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let block = self.value(x).numel() / xs[0];
        let b = xs[0] / r;
        let src = self.value(x).data();
        let mut out = vec![0.0f32; src.len()];
        for bi in 0..b {
            for (i, &p) in perm.iter().enumerate() {
                let dst = ((bi * r) + i) * block;
                let s = ((bi * r) + p) * block;
                out[dst..dst + block].copy_from_slice(&src[s..s + block]);
            }
        }
        let t = Tensor::new(xs, out)?;
        let needs = self.out_needs(&[x]);
        Ok(self.push(
            t,
            needs,
            None,
            Some(Op::PermuteBlocks {
                x,
                perm: perm.to_vec(),
            }),
        ))
    }

    /// Appends a `[b, d]` feature vector to the channels of every pixel of the
    /// `[b * r, c, w, w]` regions of the matching sample.
    pub fn append_broadcast(&mut self, regions: Var, feat: Var) -> Result<Var> {
        let rs = self.value(regions).shape().to_vec();
        let fs = self.value(feat).shape().to_vec();
        if rs.len() != 4 || rs[2] != rs[3] || fs.len() != 2 {
            return Err(Error::shape(
                "append_broadcast",
                "rank-4 square regions and rank-2 features",
                format!("{rs:?} / {fs:?}"),
            ));
        }
        if rs[0] % fs[0] != 0 {
            return Err(Error::shape(
                "append_broadcast",
                format!("regions divisible into {} samples", fs[0]),
                format!("{} regions", rs[0]),
            ));
        }
        let out = kernels::append_broadcast_forward(
            self.value(regions).data(),
            (rs[0], rs[1], rs[2]),
            self.value(feat).data(),
            (fs[0], fs[1]),
        );
        let t = Tensor::new(vec![rs[0], rs[1] + fs[1], rs[2], rs[3]], out)?;
        let needs = self.out_needs(&[regions, feat]);
        Ok(self.push(t, needs, None, Some(Op::AppendBroadcast { regions, feat })))
    }

    /// Attention-weighted sum of region features: `[b*r, d]` with weights
    /// `[b, r]` pools to `[b, d]`.
    pub fn attention_pool(&mut self, feats: Var, weights: Var) -> Result<Var> {
        let fs = self.value(feats).shape().to_vec();
        let ws = self.value(weights).shape().to_vec();
        if fs.len() != 2 || ws.len() != 2 || fs[0] != ws[0] * ws[1] {
            return Err(Error::shape(
                "attention_pool",
                format!("features [{}*{}, d]", ws.first().unwrap_or(&0), ws.get(1).unwrap_or(&0)),
                format!("{fs:?} with weights {ws:?}"),
            ));
        }
        let (b, r, d) = (ws[0], ws[1], fs[1]);
        let out = kernels::attention_pool_forward(self.value(feats).data(), self.value(weights).data(), (b, r, d));
        let t = Tensor::new(vec![b, d], out)?;
        let needs = self.out_needs(&[feats, weights]);
        Ok(self.push(t, needs, None, Some(Op::AttentionPool { feats, weights })))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0f64;
        for v in self.value(x).data() {
            acc += *v as f64;
        }
        let needs = self.out_needs(&[x]);
        self.push(Tensor::scalar(acc as f32), needs, None, Some(Op::SumAll { x }))
    }

    /// Fixed-coefficient scalar projection, used to probe gradients.
    pub fn weighted_sum(&mut self, x: Var, coeffs: &[f32]) -> Result<Var> {
        if coeffs.len() != self.value(x).numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} coefficients", self.value(x).numel()),
                format!("{}", coeffs.len()),
            ));
        }
        let mut acc = 0.0f64;
        for (v, c) in self.value(x).data().iter().zip(coeffs) {
            acc += (*v as f64) * (*c as f64);
        }
        let needs = self.out_needs(&[x]);
        Ok(self.push(
            Tensor::scalar(acc as f32),
            needs,
            None,
            Some(Op::WeightedSum {
                x,
                coeffs: coeffs.to_vec(),
            }),
        ))
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar loss. Fills gradients of every reachable
    /// node that requires them; parameter gradients stay resident for
    /// [`Tape::export_grads`], intermediate gradients are freed as the sweep
    /// passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || self.nodes[i].op.is_none() {
                continue;
            }
            let contribs = self.backward_op(i);
            for (v, g) in contribs {
                self.accumulate(v, g);
            }
            if self.nodes[i].param.is_none() {
                self.nodes[i].grad = None;
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn backward_op(&self, i: usize) -> Vec<(Var, Vec<f32>)> {
        let d_out = self.nodes[i].grad.as_deref().expect("grad present");
        let mut contribs = Vec::new();
        match self.nodes[i].op.as_ref().expect("op present") {
            Op::Conv2d { x, w, b, geom } => {
                let grads =
                    kernels::conv2d_backward(self.val(*x), self.val(*w), d_out, geom, self.needs(*x));
                if self.needs(*w) {
                    contribs.push((*w, grads.dw));
                }
                if self.needs(*b) {
                    contribs.push((*b, grads.db));
                }
                if let Some(dx) = grads.dx {
                    contribs.push((*x, dx));
                }
            }
            Op::MaxPool2d { x, argmax, in_hw } => {
                if self.needs(*x) {
                    let os = self.nodes[i].value.shape();
                    let planes = os[0] * os[1];
                    let dx = kernels::maxpool2d_backward(d_out, argmax, (planes, in_hw.0, in_hw.1), os[2] * os[3]);
                    contribs.push((*x, dx));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let grads = kernels::linear_backward(
                    self.val(*x),
                    (xs[0], xs[1]),
                    self.val(*w),
                    ws[0],
                    d_out,
                    self.needs(*x),
                );
                if self.needs(*w) {
                    contribs.push((*w, grads.dw));
                }
                if self.needs(*b) {
                    contribs.push((*b, grads.db));
                }
                if let Some(dx) = grads.dx {
                    contribs.push((*x, dx));
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    contribs.push((*x, kernels::relu_backward(self.nodes[i].value.data(), d_out)));
                }
            }
            Op::Softplus { x } => {
                if self.needs(*x) {
                    contribs.push((*x, kernels::softplus_backward(self.val(*x), d_out)));
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(*x) {
                    let s = self.nodes[i].value.shape();
                    contribs.push((
                        *x,
                        kernels::softmax_rows_backward(self.nodes[i].value.data(), s[0], s[1], d_out),
                    ));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (b, c, s) = if xs.len() == 4 {
                    (xs[0], xs[1], xs[2] * xs[3])
                } else {
                    (xs[0], xs[1], 1)
                };
                let grads = if *batch_stats {
                    kernels::bn_backward_train(self.val(*x), (b, c, s), self.val(*gamma), mean, inv_std, d_out)
                } else {
                    kernels::bn_backward_eval(self.val(*x), (b, c, s), self.val(*gamma), mean, inv_std, d_out)
                };
                if self.needs(*gamma) {
                    contribs.push((*gamma, grads.dgamma));
                }
                if self.needs(*beta) {
                    contribs.push((*beta, grads.dbeta));
                }
                if self.needs(*x) {
                    contribs.push((*x, grads.dx));
                }
            }
            Op::Dropout { x, mask, scale } => {
                if self.needs(*x) {
                    let dx: Vec<f32> = d_out
                        .iter()
                        .zip(mask)
                        .map(|(&g, &m)| if m == 1 { g * scale } else { 0.0 })
                        .collect();
                    contribs.push((*x, dx));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.needs(*logits) {
                    let s = self.nodes[logits.0].value.shape();
                    contribs.push((
                        *logits,
                        kernels::cross_entropy_backward(probs, s[0], s[1], labels, d_out[0]),
                    ));
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    contribs.push((*x, d_out.to_vec()));
                }
            }
            Op::ConcatCols { xs, widths } => {
                let rows = self.nodes[i].value.shape()[0];
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    if self.needs(v) {
                        let mut dx = vec![0.0f32; rows * w];
                        for bi in 0..rows {
                            dx[bi * w..(bi + 1) * w]
                                .copy_from_slice(&d_out[bi * total + off..bi * total + off + w]);
                        }
                        contribs.push((v, dx));
                    }
                    off += w;
                }
            }
            Op::ExtractWindows { x, win, stride } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    contribs.push((
                        *x,
                        kernels::extract_windows_backward(d_out, (xs[0], xs[1], xs[2]), *win, *stride),
                    ));
                }
            }
            Op::PermuteBlocks { x, perm } => {
                if self.needs(*x) {
                    let xs = self.nodes[x.0].value.shape();
                    let r = perm.len();
                    let block = self.nodes[x.0].value.numel() / xs[0];
                    let b = xs[0] / r;
                    let mut dx = vec![0.0f32; self.nodes[x.0].value.numel()];
                    for bi in 0..b {
                        for (idx, &p) in perm.iter().enumerate() {
                            let dst = ((bi * r) + p) * block;
                            let src = ((bi * r) + idx) * block;
                            dx[dst..dst + block].copy_from_slice(&d_out[src..src + block]);
                        }
                    }
                    contribs.push((*x, dx));
                }
            }
            Op::AppendBroadcast { regions, feat } => {
                let rs = self.nodes[regions.0].value.shape();
                let fs = self.nodes[feat.0].value.shape();
                let (dr, df) = kernels::append_broadcast_backward(
                    d_out,
                    (rs[0], rs[1], rs[2]),
                    (fs[0], fs[1]),
                );
                if self.needs(*regions) {
                    contribs.push((*regions, dr));
                }
                if self.needs(*feat) {
                    contribs.push((*feat, df));
                }
            }
            Op::AttentionPool { feats, weights } => {
                let ws = self.nodes[weights.0].value.shape();
                let fs = self.nodes[feats.0].value.shape();
                let (df, dw) = kernels::attention_pool_backward(
                    self.val(*feats),
                    self.val(*weights),
                    (ws[0], ws[1], fs[1]),
                    d_out,
                );
                if self.needs(*feats) {
                    contribs.push((*feats, df));
                }
                if self.needs(*weights) {
                    contribs.push((*weights, dw));
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    contribs.push((*x, vec![d_out[0]; self.nodes[x.0].value.numel()]));
                }
            }
            Op::WeightedSum { x, coeffs } => {
                if self.needs(*x) {
                    contribs.push((*x, coeffs.iter().map(|&c| c * d_out[0]).collect()));
                }
            }
        }
        contribs
    }

    /// Adds every parameter gradient on this tape into the store.
    pub fn export_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(grad)) = (node.param, node.grad.as_ref()) {
                store.add_grad(id, grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::reference as rf;
    use crate::rng::stream;
    use rand::Rng;

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = stream(seed, "tape-test", 0);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Engine gradients vs central finite differences of an f64 oracle.
    /// `build` assembles a scalar loss on the tape from differentiable leaves;
    /// `oracle` computes the same scalar in f64 from the same inputs.
    fn check_grads(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        oracle: impl Fn(&[Vec<f64>]) -> f64,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();

        let base: Vec<Vec<f64>> = inputs.iter().map(|t| rf::widen(t.data())).collect();
        for (ii, input) in inputs.iter().enumerate() {
            let grad = tape.grad(vars[ii]).expect("grad populated").to_vec();
            for j in 0..input.numel() {
                let mut f = |x: &[f64]| {
                    let mut station = base.clone();
                    station[ii] = x.to_vec();
                    oracle(&station)
                };
                let fd = rf::central_diff(&mut f, &base[ii], j, 1e-3);
                let err = rf::rel_err(grad[j] as f64, fd, 1e-6);
                assert!(
                    err < tol,
                    "input {ii} elem {j}: analytic {} vs fd {fd}, rel err {err}",
                    grad[j]
                );
            }
        }
    }

    fn proj_coeffs(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = stream(seed, "proj", 1);
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    // ---- conv2d ----

    #[test]
    fn conv_identity_kernel() {
        let x = randn(vec![1, 1, 3, 3], 3);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let w = tape.leaf(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        let y = tape.conv2d(xv, w, b, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn conv_ones_same_padding_counts_neighbors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let w = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        let d = tape.value(y).data();
        // corners see 4 in-bounds neighbors, edges 6, interior 9
        assert_eq!(d[0], 4.0);
        assert_eq!(d[1], 6.0);
        assert_eq!(d[5], 9.0);
        assert_eq!(d[15], 4.0);
    }

    #[test]
    fn conv_fig3_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(vec![1, 8, 12, 12], 4));
        let w = tape.leaf(randn(vec![64, 8, 3, 3], 5));
        let b = tape.leaf(Tensor::zeros(vec![64]));
        let y = tape.conv2d(x, w, b, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 64, 12, 12]);
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(vec![1, 3, 5, 5], 6));
        let w = tape.leaf(randn(vec![4, 2, 3, 3], 7));
        let b = tape.leaf(Tensor::zeros(vec![4]));
        assert!(matches!(
            tape.conv2d(x, w, b, 1, Padding::Same),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_matches_reference_forward() {
        for &(stride, pad, pad_px) in &[(1usize, Padding::Same, 1usize), (1, Padding::Valid, 0), (2, Padding::Valid, 0)] {
            let x = randn(vec![2, 3, 6, 6], 8);
            let w = randn(vec![4, 3, 3, 3], 9);
            let bias = randn(vec![4], 10);
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(bias.clone());
            let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
            let (want, _) = rf::conv2d(
                &rf::widen(x.data()),
                (2, 3, 6, 6),
                &rf::widen(w.data()),
                (4, 3, 3),
                &rf::widen(bias.data()),
                stride,
                pad_px,
            );
            for (a, b) in tape.value(y).data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradcheck() {
        let x = randn(vec![2, 2, 5, 5], 11);
        let w = randn(vec![3, 2, 3, 3], 12);
        let bias = randn(vec![3], 13);
        let coeffs = proj_coeffs(2 * 3 * 5 * 5, 14);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[x, w, bias],
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 1, Padding::Same).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                let (y, _) = rf::conv2d(&ins[0], (2, 2, 5, 5), &ins[1], (3, 3, 3), &ins[2], 1, 1);
                y.iter().zip(&c64).map(|(a, b)| a * b).sum()
            },
            1e-4,
        );
    }

    #[test]
    fn conv_stride2_valid_gradcheck() {
        let x = randn(vec![2, 2, 7, 7], 15);
        let w = randn(vec![3, 2, 3, 3], 16);
        let bias = randn(vec![3], 17);
        let coeffs = proj_coeffs(2 * 3 * 3 * 3, 18);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[x, w, bias],
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], vars[2], 2, Padding::Valid).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                let (y, _) = rf::conv2d(&ins[0], (2, 2, 7, 7), &ins[1], (3, 3, 3), &ins[2], 2, 0);
                y.iter().zip(&c64).map(|(a, b)| a * b).sum()
            },
            1e-4,
        );
    }

    // ---- maxpool ----

    #[test]
    fn maxpool_two_by_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 2, 5, 5], 0.7));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_ceil_mode_sizes() {
        // independent oracle: number of window start positions <= side-1
        let expect = |side: usize, stride: usize| (side - 1) / stride + 1;
        for &side in &[25usize, 13, 8, 24, 12, 7] {
            let mut tape = Tape::new();
            let x = tape.leaf(randn(vec![1, 1, side, side], side as u64));
            let y = tape.maxpool2d(x, 2, 2).unwrap();
            let got = tape.value(y).shape()[2];
            assert_eq!(got, expect(side, 2), "side {side}");
        }
        // the documented chain for the reference branch
        let mut tape = Tape::new();
        let x = tape.leaf(randn(vec![1, 64, 25, 25], 99));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 64, 13, 13]);
    }

    #[test]
    fn maxpool_window_too_large_is_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(vec![1, 1, 3, 3], 20));
        assert!(tape.maxpool2d(x, 4, 1).is_err());
    }

    #[test]
    fn maxpool_gradcheck() {
        let x = randn(vec![2, 2, 5, 5], 21);
        let coeffs = proj_coeffs(2 * 2 * 3 * 3, 22);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[x],
            |tape, vars| {
                let y = tape.maxpool2d(vars[0], 2, 2).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                let (y, _) = rf::maxpool2d(&ins[0], (2, 2, 5, 5), 2, 2);
                y.iter().zip(&c64).map(|(a, b)| a * b).sum()
            },
            1e-4,
        );
    }

    // ---- linear ----

    #[test]
    fn linear_identity_and_zero() {
        let x = randn(vec![1, 4], 23);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let w = tape.leaf(eye);
        let b0 = tape.leaf(Tensor::zeros(vec![4]));
        let y = tape.linear(xv, w, b0).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        let wz = tape.leaf(Tensor::zeros(vec![3, 4]));
        let bb = tape.leaf(Tensor::new(vec![3], vec![5.0, -1.0, 2.0]).unwrap());
        let y2 = tape.linear(xv, wz, bb).unwrap();
        assert_eq!(tape.value(y2).data(), &[5.0, -1.0, 2.0]);
    }

    #[test]
    fn linear_matches_double_precision_oracle() {
        let x = randn(vec![1, 128], 24);
        let w = randn(vec![40, 128], 25);
        let b = randn(vec![40], 26);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let y = tape.linear(xv, wv, bv).unwrap();
        let want = rf::linear(&rf::widen(x.data()), (1, 128), &rf::widen(w.data()), 40, &rf::widen(b.data()));
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_gradcheck() {
        let x = randn(vec![3, 6], 27);
        let w = randn(vec![4, 6], 28);
        let b = randn(vec![4], 29);
        let coeffs = proj_coeffs(12, 30);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[x, w, b],
            |tape, vars| {
                let y = tape.linear(vars[0], vars[1], vars[2]).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                let y = rf::linear(&ins[0], (3, 6), &ins[1], 4, &ins[2]);
                y.iter().zip(&c64).map(|(a, b)| a * b).sum()
            },
            1e-4,
        );
    }

    // ---- activations / softmax ----

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::full(vec![1, 5], 0.42));
        let y = tape.softmax_rows(c).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 3.0f32.ln()]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-6 && (d[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance_and_simplex() {
        let x = randn(vec![4, 9], 31);
        let shifted = Tensor::new(
            vec![4, 9],
            x.data().iter().map(|v| v + 7.5).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(x);
        let b = tape.leaf(shifted);
        let ya = tape.softmax_rows(a).unwrap();
        let yb = tape.softmax_rows(b).unwrap();
        for (p, q) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            assert!((p - q).abs() < 1e-6);
        }
        for row in tape.value(ya).data().chunks(9) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softplus_and_softmax_gradcheck() {
        let x = randn(vec![2, 7], 32);
        let coeffs = proj_coeffs(14, 33);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[x.clone()],
            |tape, vars| {
                let y = tape.softplus(vars[0]);
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| rf::softplus(&ins[0]).iter().zip(&c64).map(|(a, b)| a * b).sum(),
            1e-4,
        );
        check_grads(
            &[x],
            |tape, vars| {
                let y = tape.softmax_rows(vars[0]).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                rf::softmax_rows(&ins[0], 2, 7)
                    .iter()
                    .zip(&c64)
                    .map(|(a, b)| a * b)
                    .sum()
            },
            1e-4,
        );
        let x2 = randn(vec![2, 4, 3, 3], 34);
        let coeffs2 = proj_coeffs(72, 35);
        let c642 = rf::widen(&coeffs2);
        check_grads(
            &[x2],
            |tape, vars| {
                let y = tape.relu(vars[0]);
                tape.weighted_sum(y, &coeffs2).unwrap()
            },
            |ins| rf::relu(&ins[0]).iter().zip(&c642).map(|(a, b)| a * b).sum(),
            1e-4,
        );
    }

    // ---- batchnorm ----

    #[test]
    fn batchnorm_passthrough_on_standardized_batch() {
        // already zero-mean unit-variance per channel
        let data = vec![-1.0f32, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let x = Tensor::new(vec![4, 2], {
            let mut v = vec![0.0; 8];
            for b in 0..4 {
                for c in 0..2 {
                    v[b * 2 + c] = data[c * 4 + b];
                }
            }
            v
        })
        .unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let g = tape.leaf(Tensor::full(vec![2], 1.0));
        let bt = tape.leaf(Tensor::zeros(vec![2]));
        let (y, _) = tape
            .batchnorm(xv, g, bt, &[0.0; 2], &[1.0; 2], 1e-5, Mode::Train)
            .unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_gamma_zero_gives_constant_beta() {
        let x = randn(vec![3, 2, 2, 2], 36);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let g = tape.leaf(Tensor::zeros(vec![2]));
        let bt = tape.leaf(Tensor::full(vec![2], 2.5));
        let (y, _) = tape
            .batchnorm(xv, g, bt, &[0.0; 2], &[1.0; 2], 1e-5, Mode::Train)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn batchnorm_output_moments() {
        let x = randn(vec![16, 3, 4, 4], 37);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let g = tape.leaf(Tensor::full(vec![3], 1.0));
        let bt = tape.leaf(Tensor::zeros(vec![3]));
        let (y, _) = tape
            .batchnorm(xv, g, bt, &[0.0; 3], &[1.0; 3], 1e-5, Mode::Train)
            .unwrap();
        let out = tape.value(y).data();
        let n = 16.0 * 16.0;
        for c in 0..3 {
            let mut mean = 0.0f64;
            let mut var = 0.0f64;
            for b in 0..16 {
                for s in 0..16 {
                    mean += out[(b * 3 + c) * 16 + s] as f64;
                }
            }
            mean /= n;
            for b in 0..16 {
                for s in 0..16 {
                    let d = out[(b * 3 + c) * 16 + s] as f64 - mean;
                    var += d * d;
                }
            }
            var /= n;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_batch_of_one_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(vec![1, 2, 3, 3], 38));
        let g = tape.leaf(Tensor::full(vec![2], 1.0));
        let b = tape.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(
            tape.batchnorm(x, g, b, &[0.0; 2], &[1.0; 2], 1e-5, Mode::Train),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batchnorm_gradcheck() {
        let x = randn(vec![4, 3, 2, 2], 39);
        let gamma = randn(vec![3], 40);
        let beta = randn(vec![3], 41);
        let coeffs = proj_coeffs(48, 42);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[x, gamma, beta],
            |tape, vars| {
                let (y, _) = tape
                    .batchnorm(vars[0], vars[1], vars[2], &[0.0; 3], &[1.0; 3], 1e-5, Mode::Train)
                    .unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                let y = rf::batchnorm_train(&ins[0], (4, 3, 4), &ins[1], &ins[2], 1e-5 as f64);
                y.iter().zip(&c64).map(|(a, b)| a * b).sum()
            },
            2e-4,
        );
    }

    // ---- dropout ----

    #[test]
    fn dropout_identities() {
        let x = randn(vec![10], 43);
        let mut tape = Tape::new();
        let xv = tape.leaf_grad(x.clone());
        let mut rng = stream(1, "drop", 0);
        let y0 = tape.dropout(xv, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y0, xv);
        let ye = tape.dropout(xv, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(ye, xv);
        assert_eq!(tape.value(ye).data(), x.data());
        assert!(tape.dropout(xv, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let x = Tensor::full(vec![n], 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let mut rng = stream(7, "drop", 1);
        let y = tape.dropout(xv, 0.5, Mode::Train, &mut rng).unwrap();
        let out = tape.value(y).data();
        let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "survivor fraction {survivors}");
        let mean: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "rescaled mean {mean}");
    }

    // ---- cross entropy ----

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 40]));
        let l = tape.softmax_cross_entropy(x, &[17]).unwrap();
        assert!((tape.value(l).data()[0] - (40.0f32).ln()).abs() < 1e-4);

        let mut conf = Tensor::zeros(vec![1, 5]);
        conf.data_mut()[2] = 20.0;
        let xv = tape.leaf(conf);
        let l2 = tape.softmax_cross_entropy(xv, &[2]).unwrap();
        assert!(tape.value(l2).data()[0] < 1e-8);

        let bad = tape.leaf(Tensor::zeros(vec![1, 5]));
        assert!(matches!(
            tape.softmax_cross_entropy(bad, &[5]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn cross_entropy_gradcheck() {
        let x = randn(vec![3, 6], 44);
        let labels = [1u32, 5, 0];
        check_grads(
            &[x],
            |tape, vars| tape.softmax_cross_entropy(vars[0], &labels).unwrap(),
            |ins| rf::cross_entropy_mean(&ins[0], 3, 6, &[1, 5, 0]),
            1e-4,
        );
    }

    // ---- structural ops ----

    #[test]
    fn extract_windows_counts() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(vec![1, 8, 12, 12], 45));
        let y = tape.extract_windows(x, 4, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[81, 8, 4, 4]);

        let x2 = tape.leaf(randn(vec![1, 1, 24, 24], 46));
        let y2 = tape.extract_windows(x2, 8, 2).unwrap();
        assert_eq!(tape.value(y2).shape(), &[81, 1, 8, 8]);

        let x3 = randn(vec![1, 2, 5, 5], 47);
        let x3v = tape.leaf(x3.clone());
        let y3 = tape.extract_windows(x3v, 5, 1).unwrap();
        assert_eq!(tape.value(y3).shape(), &[1, 2, 5, 5]);
        assert_eq!(tape.value(y3).data(), x3.data());

        let x4 = tape.leaf(randn(vec![1, 1, 4, 4], 48));
        assert!(matches!(tape.extract_windows(x4, 6, 1), Err(Error::Geometry(_))));
    }

    #[test]
    fn extract_windows_gradcheck() {
        let x = randn(vec![2, 2, 5, 5], 49);
        let coeffs = proj_coeffs(2 * 4 * 2 * 3 * 3, 50);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[x],
            |tape, vars| {
                let y = tape.extract_windows(vars[0], 3, 2).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                let (y, _) = rf::extract_windows(&ins[0], (2, 2, 5), 3, 2);
                y.iter().zip(&c64).map(|(a, b)| a * b).sum()
            },
            1e-4,
        );
    }

    #[test]
    fn append_broadcast_layout_and_gradcheck() {
        let regions = randn(vec![4, 2, 3, 3], 51);
        let feat = randn(vec![2, 5], 52);
        let mut tape = Tape::new();
        let rv = tape.leaf(regions.clone());
        let fv = tape.leaf(feat.clone());
        let y = tape.append_broadcast(rv, fv).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 7, 3, 3]);
        // region 3 belongs to sample 1; its appended channel 2 is feat[1, 2]
        let out = tape.value(y).data();
        let idx = ((3 * 7) + 2 + 2) * 9 + 4;
        assert_eq!(out[idx], feat.data()[1 * 5 + 2]);

        let coeffs = proj_coeffs(4 * 7 * 9, 53);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[regions, feat],
            |tape, vars| {
                let y = tape.append_broadcast(vars[0], vars[1]).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                let y = rf::append_broadcast(&ins[0], (4, 2, 3), &ins[1], (2, 5));
                y.iter().zip(&c64).map(|(a, b)| a * b).sum()
            },
            1e-4,
        );
    }

    #[test]
    fn attention_pool_basics() {
        let mut tape = Tape::new();
        let single = randn(vec![1, 4], 54);
        let fv = tape.leaf(single.clone());
        let wv = tape.leaf(Tensor::full(vec![1, 1], 1.0));
        let y = tape.attention_pool(fv, wv).unwrap();
        assert_eq!(tape.value(y).data(), single.data());

        // uniform weights give the arithmetic mean
        let feats = randn(vec![3, 2], 55);
        let fv = tape.leaf(feats.clone());
        let wv = tape.leaf(Tensor::full(vec![1, 3], 1.0 / 3.0));
        let y = tape.attention_pool(fv, wv).unwrap();
        for d in 0..2 {
            let mean = (feats.data()[d] + feats.data()[2 + d] + feats.data()[4 + d]) / 3.0;
            assert!((tape.value(y).data()[d] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_pool_matches_oracle_and_gradcheck() {
        let feats = randn(vec![6, 4], 56);
        let weights = randn(vec![2, 3], 57);
        let mut tape = Tape::new();
        let fv = tape.leaf(feats.clone());
        let wv = tape.leaf(weights.clone());
        let y = tape.attention_pool(fv, wv).unwrap();
        let want = rf::attention_pool_eval(&rf::widen(feats.data()), &rf::widen(weights.data()), (2, 3, 4));
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!(rf::rel_err(*a as f64, *b, 1e-9) < 1e-6);
        }

        let coeffs = proj_coeffs(8, 58);
        let c64 = rf::widen(&coeffs);
        check_grads(
            &[feats, weights],
            |tape, vars| {
                let y = tape.attention_pool(vars[0], vars[1]).unwrap();
                tape.weighted_sum(y, &coeffs).unwrap()
            },
            |ins| {
                let y = rf::attention_pool_eval(&ins[0], &ins[1], (2, 3, 4));
                y.iter().zip(&c64).map(|(a, b)| a * b).sum()
            },
            1e-4,
        );
    }

    #[test]
    fn concat_segments_round_trip() {
        let parts: Vec<Tensor> = (0..3).map(|i| randn(vec![2, 128], 60 + i)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = parts.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = tape.concat_cols(&vars).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 384]);
        let out = tape.value(y).data();
        for (m, part) in parts.iter().enumerate() {
            for b in 0..2 {
                let seg = &out[b * 384 + m * 128..b * 384 + (m + 1) * 128];
                assert_eq!(seg, &part.data()[b * 128..(b + 1) * 128]);
            }
        }
    }

    #[test]
    fn permute_blocks_inverse_round_trip() {
        let x = randn(vec![6, 3], 63);
        let perm = vec![2usize, 0, 1];
        let mut inv = vec![0usize; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let p = tape.permute_blocks(xv, &perm).unwrap();
        let back = tape.permute_blocks(p, &inv).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }

    // ---- backward bookkeeping ----

    #[test]
    fn backward_sum_of_params_gives_unit_grads() {
        let mut store = ParamStore::new();
        let a = store.add("a", randn(vec![3], 64));
        let b = store.add("b", randn(vec![2, 2], 65));
        let mut tape = Tape::new();
        let av = tape.param(&store, a);
        let bv = tape.param(&store, b);
        let sa = tape.sum_all(av);
        let sb = tape.sum_all(bv);
        let lv = tape.reshape(sa, vec![1, 1]).unwrap();
        let rv = tape.reshape(sb, vec![1, 1]).unwrap();
        let cat = tape.concat_cols(&[lv, rv]).unwrap();
        let loss = tape.sum_all(cat);
        tape.backward(loss).unwrap();
        store.zero_grads();
        tape.export_grads(&mut store);
        assert!(store.grad(a).iter().all(|&g| g == 1.0));
        assert!(store.grad(b).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_leaves_unreachable_params_at_zero() {
        let mut store = ParamStore::new();
        let used = store.add("used", randn(vec![4], 66));
        let frozen = store.add("frozen", randn(vec![4], 67));
        let mut tape = Tape::new();
        let uv = tape.param(&store, used);
        let _fv = tape.param(&store, frozen);
        let loss = tape.sum_all(uv);
        tape.backward(loss).unwrap();
        store.zero_grads();
        tape.export_grads(&mut store);
        assert!(store.grad(used).iter().all(|&g| g == 1.0));
        assert!(store.grad(frozen).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf_grad(randn(vec![3], 68));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let x = randn(vec![2, 3, 6, 6], 69);
        let w = randn(vec![4, 3, 3, 3], 70);
        let b = randn(vec![4], 71);
        let run = || {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = tape.conv2d(xv, wv, bv, 1, Padding::Same).unwrap();
            let p = tape.maxpool2d(y, 2, 2).unwrap();
            let r = tape.relu(p);
            tape.value(r).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
