//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward evaluation. Nodes are
//! addressed by [`Var`] handles; [`Graph::backward`] walks the tape in
//! reverse and returns the gradient of a scalar output with respect to every
//! node that requires one. Constant leaves (data, frozen weights, detached
//! tensors) never receive gradients, and no parent gradient is computed for
//! them.

use std::collections::BTreeMap;

use crate::kernels;
use crate::params::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Batch statistics recorded by a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub key: String,
    pub mean: Vec<f64>,
    /// Biased variance over `count` elements per channel.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    PRelu { x: Var, slope: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    ConcatChannels { a: Var, b: Var },
    Upsample { x: Var },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
    PixelNorm { pred: Var, target: Var, squared: bool },
    AbsDiffMean { a: Var, b: Var },
    SoftplusMean { z: Var, sign: f64 },
    Sum { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    batch_stats: Vec<BatchStats>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Parameters of one model bound into a graph as leaves.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    /// Gradient for every bound parameter; parameters the loss does not
    /// depend on get zeros.
    pub fn grads(&self, graph: &Graph, grads: &Gradients) -> Params {
        let mut out = Params::new();
        for (name, &v) in &self.vars {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            batch_stats: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies of `v`'s value as a new constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn bind(&mut self, params: &Params, trainable: bool) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.variable(t.clone())
                } else {
                    self.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let out = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            out_pad,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, rg)
    }

    /// Batch normalization with the current batch's per-channel statistics.
    /// The statistics are recorded under `key` for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, key: &str) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let count = n * h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        {
            let xv = self.value(x);
            for ch in 0..c {
                let s: f64 = (0..n).map(|s| xv.plane(s, ch).iter().sum::<f64>()).sum();
                mean[ch] = s / count as f64;
                let ss: f64 = (0..n)
                    .map(|s| xv.plane(s, ch).iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
                    .sum();
                var[ch] = ss / count as f64;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_stats.push(BatchStats {
            key: key.to_string(),
            mean: mean.clone(),
            var,
            count,
        });
        self.normalize(x, gamma, beta, mean, inv_std, true)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Var {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean.to_vec(), inv_std, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let mut out = self.value(x).clone();
        {
            let g = self.value(gamma).data().to_vec();
            let b = self.value(beta).data().to_vec();
            let d = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * plane;
                    for v in &mut d[off..off + plane] {
                        *v = g[ch] * ((*v - mean[ch]) * inv_std[ch]) + b[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Parametric rectifier with one learned slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let a = self.value(slope).data().to_vec();
        let mut out = self.value(x).clone();
        let plane = h * w;
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * plane;
                for v in &mut out.data_mut()[off..off + plane] {
                    if *v < 0.0 {
                        *v *= a[ch];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(slope);
        self.push(out, Op::PRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels spatial mismatch");
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            data.extend_from_slice(self.value(a).sample(s));
            data.extend_from_slice(self.value(b).sample(s));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], data), Op::ConcatChannels { a, b }, rg)
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Var {
        let (_, _, h, w) = self.value(x).dims4();
        let out = kernels::resample_bilinear(self.value(x), h * factor, w * factor);
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x }, rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let out = kernels::avg_pool2(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2 { x }, rg)
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = Vec::with_capacity(n * c);
        for s in 0..n {
            for ch in 0..c {
                out.push(self.value(x).plane(s, ch).iter().sum::<f64>() / (h * w) as f64);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool { x }, rg)
    }

    /// `[N, F] · [K, F]ᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, f) = (self.value(x).shape()[0], self.value(x).shape()[1]);
        let k = self.value(w).shape()[0];
        let mut out = vec![0.0; n * k];
        kernels::gemm(n, f, k, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        let bias = self.value(b).data();
        for row in out.chunks_mut(k) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![n, k], out), Op::Linear { x, w, b }, rg)
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n);
        let mut total = 0.0;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            total += log_sum_exp(row) - row[y];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Mean over batch and pixels of the channel-vector 2-norm of
    /// `pred - target` (or its square when `squared`).
    pub fn pixel_norm_loss(&mut self, pred: Var, target: Var, squared: bool) -> Var {
        let (n, c, h, w) = self.value(pred).dims4();
        assert_eq!(self.value(pred).shape(), self.value(target).shape(), "pixel_norm_loss shape mismatch");
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let plane = h * w;
        let mut total = 0.0;
        for s in 0..n {
            for i in 0..plane {
                let mut sq = 0.0;
                for ch in 0..c {
                    let idx = (s * c + ch) * plane + i;
                    sq += (p[idx] - t[idx]).powi(2);
                }
                total += if squared { sq } else { sq.sqrt() };
            }
        }
        let rg = self.rg(pred) || self.rg(target);
        self.push(
            Tensor::scalar(total / (n * plane) as f64),
            Op::PixelNorm { pred, target, squared },
            rg,
        )
    }

    /// Mean absolute elementwise difference.
    pub fn abs_diff_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "abs_diff_mean shape mismatch");
        let n = self.value(a).len();
        let total: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(total / n as f64), Op::AbsDiffMean { a, b }, rg)
    }

    /// `mean(softplus(sign · z))`. With `sign = -1` this is `mean(-ln σ(z))`;
    /// with `sign = +1` it is `mean(-ln(1 - σ(z)))`.
    pub fn softplus_mean(&mut self, z: Var, sign: f64) -> Var {
        let n = self.value(z).len();
        let total: f64 = self.value(z).data().iter().map(|&v| softplus(sign * v)).sum();
        let rg = self.rg(z);
        self.push(Tensor::scalar(total / n as f64), Op::SoftplusMean { z, sign }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum { x }, rg)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.value(v).item()).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(out) {
            return Gradients { grads };
        }
        grads[out.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, kernels::channel_sums(dy));
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (dx, dw) = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *stride,
                    *pad,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, kernels::channel_sums(dy));
                    }
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
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let plane = h * w;
                let count = (n * plane) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for i in off..off + plane {
                            let xhat = (xv.data()[i] - mean[ch]) * inv_std[ch];
                            dgamma[ch] += dy.data()[i] * xhat;
                            dbeta[ch] += dy.data()[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * plane;
                            for i in off..off + plane {
                                let gi = g[ch] * inv_std[ch];
                                dx.data_mut()[i] = if *batch_stats {
                                    let xhat = (xv.data()[i] - mean[ch]) * inv_std[ch];
                                    gi * (dy.data()[i] - dbeta[ch] / count - xhat * dgamma[ch] / count)
                                } else {
                                    gi * dy.data()[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::new(vec![c], dgamma));
                self.accumulate(grads, *beta, Tensor::new(vec![c], dbeta));
            }
            Op::PRelu { x, slope } => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4();
                let a = self.value(*slope).data();
                let plane = h * w;
                let mut dx = Tensor::zeros(xv.shape());
                let mut da = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * plane;
                        for i in off..off + plane {
                            let v = xv.data()[i];
                            if v < 0.0 {
                                dx.data_mut()[i] = a[ch] * dy.data()[i];
                                da[ch] += v * dy.data()[i];
                            } else {
                                dx.data_mut()[i] = dy.data()[i];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *slope, Tensor::new(vec![c], da));
            }
            Op::Relu { x } => {
                let dx = self.value(*x).zip_map(dy, |v, g| if v > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh { x } => {
                let dx = node.value.zip_map(dy, |y, g| g * (1.0 - y * y));
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node.value.zip_map(dy, |y, g| g * y * (1.0 - y));
                self.accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * pa);
                let mut db = Vec::with_capacity(n * pb);
                for s in 0..n {
                    let row = dy.sample(s);
                    da.extend_from_slice(&row[..pa]);
                    db.extend_from_slice(&row[pa..]);
                }
                self.accumulate(grads, *a, Tensor::new(vec![n, ca, h, w], da));
                self.accumulate(grads, *b, Tensor::new(vec![n, cb, h, w], db));
            }
            Op::Upsample { x } => {
                let (_, _, h, w) = self.value(*x).dims4();
                self.accumulate(grads, *x, kernels::resample_bilinear_backward(dy, h, w));
            }
            Op::AvgPool2 { x } => {
                let (_, _, h, w) = self.value(*x).dims4();
                self.accumulate(grads, *x, kernels::avg_pool2_backward(dy, h, w));
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let g = dy.data()[s * c + ch] / plane as f64;
                        let off = (s * c + ch) * plane;
                        dx.data_mut()[off..off + plane].fill(g);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let k = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * f];
                    kernels::gemm(n, k, f, dy.data(), false, self.value(*w).data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(vec![n, f], dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * f];
                    kernels::gemm(k, n, f, dy.data(), true, self.value(*x).data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(vec![k, f], dw));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k];
                    for row in dy.data().chunks(k) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![k], db));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (n, k) = (lv.shape()[0], lv.shape()[1]);
                let scale = dy.item() / n as f64;
                let mut dl = Vec::with_capacity(n * k);
                for (row, &y) in lv.data().chunks(k).zip(labels) {
                    let lse = log_sum_exp(row);
                    for (j, &z) in row.iter().enumerate() {
                        let p = (z - lse).exp();
                        dl.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, k], dl));
            }
            Op::PixelNorm { pred, target, squared } => {
                let pv = self.value(*pred);
                let tv = self.value(*target);
                let (n, c, h, w) = pv.dims4();
                let plane = h * w;
                let scale = dy.item() / (n * plane) as f64;
                let mut dp = Tensor::zeros(pv.shape());
                for s in 0..n {
                    for i in 0..plane {
                        let idx = |ch: usize| (s * c + ch) * plane + i;
                        if *squared {
                            for ch in 0..c {
                                let j = idx(ch);
                                dp.data_mut()[j] = scale * 2.0 * (pv.data()[j] - tv.data()[j]);
                            }
                        } else {
                            let norm = (0..c)
                                .map(|ch| (pv.data()[idx(ch)] - tv.data()[idx(ch)]).powi(2))
                                .sum::<f64>()
                                .sqrt();
                            // subgradient 0 at a zero residual
                            if norm > 0.0 {
                                for ch in 0..c {
                                    let j = idx(ch);
                                    dp.data_mut()[j] = scale * (pv.data()[j] - tv.data()[j]) / norm;
                                }
                            }
                        }
                    }
                }
                if self.rg(*target) {
                    self.accumulate(grads, *target, dp.map(|v| -v));
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::AbsDiffMean { a, b } => {
                let scale = dy.item() / self.value(*a).len() as f64;
                let da = self.value(*a).zip_map(self.value(*b), |x, y| {
                    if x > y {
                        scale
                    } else if x < y {
                        -scale
                    } else {
                        0.0
                    }
                });
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftplusMean { z, sign } => {
                let scale = dy.item() / self.value(*z).len() as f64;
                let dz = self.value(*z).map(|v| scale * sign * sigmoid(sign * v));
                self.accumulate(grads, *z, dz);
            }
            Op::Sum { x } => {
                let g = dy.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(w * dy.item()));
                }
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::randn(shape, 1.0, &mut rng);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.get(x).unwrap().clone();
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let x = g.variable(t);
            let out = build(&mut g, x);
            g.value(out).item()
        };
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let num = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (num - a).abs() <= 1e-6 * (1.0 + a.abs()),
                "coord {i}: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn batch_norm_train_gradient() {
        check(&[2, 3, 3, 3], 1, |g, x| {
            let gamma = g.constant(Tensor::new(vec![3], vec![1.5, -0.5, 2.0]));
            let beta = g.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]));
            let y = g.batch_norm_train(x, gamma, beta, 1e-5, "bn");
            let t = g.tanh(y);
            let s = g.sigmoid(t);
            g.sum(s)
        });
    }

    #[test]
    fn conv_transpose_and_upsample_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut rng);
        let k = Tensor::randn(&[1, 3, 3, 3], 0.5, &mut rng);
        check(&[1, 2, 3, 3], 2, move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.conv_transpose2d(x, wv, None, 2, 1, 1);
            let u = g.upsample_bilinear(y, 2);
            let kv = g.constant(k.clone());
            let z = g.conv2d(u, kv, None, 1, 1);
            let t = g.tanh(z);
            g.sum(t)
        });
    }

    #[test]
    fn linear_softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        check(&[2, 3, 2, 2], 3, move |g, x| {
            let p = g.global_avg_pool(x);
            let wv = g.constant(w.clone());
            let b = g.constant(Tensor::zeros(&[4]));
            let l = g.linear(p, wv, b);
            g.softmax_cross_entropy(l, &[1, 3])
        });
    }

    #[test]
    fn loss_ops_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        check(&[2, 2, 3, 3], 4, move |g, x| {
            let tv = g.constant(t.clone());
            let a = g.pixel_norm_loss(x, tv, false);
            let b = g.pixel_norm_loss(x, tv, true);
            let c = g.abs_diff_mean(x, tv);
            let d = g.softplus_mean(x, -1.0);
            let e = g.softplus_mean(x, 1.0);
            let pooled = g.avg_pool2(x);
            let f = g.sum(pooled);
            let cat = g.concat_channels(x, tv);
            let cs = g.sum(cat);
            g.weighted_sum(&[(a, 1.0), (b, 0.5), (c, 2.0), (d, 0.3), (e, 0.7), (f, 0.1), (cs, 0.2)])
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.variable(Tensor::full(&[1, 1, 2, 2], 2.0));
        let s = g.add(x, y);
        let out = g.sum(s);
        let grads = g.backward(out);
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
