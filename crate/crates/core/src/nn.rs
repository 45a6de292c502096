//! Layer helpers shared by the generator, discriminator and feature
//! extractors.

use rand::Rng;

use crate::graph::{BatchStats, Bound, Graph, Var};
use crate::params::Params;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;
pub const PRELU_INIT: f64 = 0.25;

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Current batch statistics (recorded for running averages).
    Train,
    /// Tracked running statistics.
    Eval,
}

/// Forward-pass context: one model's bound parameters inside a graph.
pub(crate) struct Layers<'a> {
    pub graph: &'a mut Graph,
    pub bound: &'a Bound,
    pub buffers: &'a Params,
    pub mode: NormMode,
    pub scope: &'a str,
}

impl Layers<'_> {
    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize, bias: bool) -> Var {
        let w = self.bound.var(&format!("{name}.w"));
        let b = bias.then(|| self.bound.var(&format!("{name}.b")));
        self.graph.conv2d(x, w, b, stride, pad)
    }

    pub fn deconv(&mut self, name: &str, x: Var, stride: usize, pad: usize, out_pad: usize) -> Var {
        let w = self.bound.var(&format!("{name}.w"));
        self.graph.conv_transpose2d(x, w, None, stride, pad, out_pad)
    }

    pub fn bn(&mut self, name: &str, x: Var) -> Var {
        let gamma = self.bound.var(&format!("{name}.gamma"));
        let beta = self.bound.var(&format!("{name}.beta"));
        match self.mode {
            NormMode::Train => {
                let key = format!("{}{}", self.scope, name);
                self.graph.batch_norm_train(x, gamma, beta, BN_EPS, &key)
            }
            NormMode::Eval => {
                let mean = self.buffers.get(&format!("{name}.running_mean")).expect("running mean");
                let var = self.buffers.get(&format!("{name}.running_var")).expect("running var");
                self.graph.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), BN_EPS)
            }
        }
    }

    pub fn prelu(&mut self, name: &str, x: Var) -> Var {
        let slope = self.bound.var(&format!("{name}.slope"));
        self.graph.prelu(x, slope)
    }
}

/// Parameter/buffer initialisation helpers.
pub(crate) struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
    pub params: Params,
    pub buffers: Params,
}

impl<R: Rng> Init<'_, R> {
    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool, std: f64) {
        self.params
            .insert(format!("{name}.w"), Tensor::randn(&[c_out, c_in, k, k], std, self.rng));
        if bias {
            self.params.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
        }
    }

    /// Transposed-convolution kernel `[c_in, c_out, k, k]`.
    pub fn deconv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        self.params
            .insert(format!("{name}.w"), Tensor::randn(&[c_in, c_out, k, k], INIT_STD, self.rng));
    }

    pub fn bn(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    }

    pub fn prelu(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.slope"), Tensor::full(&[c], PRELU_INIT));
    }
}

/// Exponential running-average update from batch statistics recorded under
/// `scope`. Running variance uses the unbiased estimate.
pub(crate) fn update_running_stats(buffers: &mut Params, stats: &[BatchStats], scope: &str) {
    for s in stats {
        let Some(layer) = s.key.strip_prefix(scope) else {
            continue;
        };
        let correction = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        if let Some(m) = buffers.get_mut(&format!("{layer}.running_mean")) {
            for (r, b) in m.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
        if let Some(v) = buffers.get_mut(&format!("{layer}.running_var")) {
            for (r, b) in v.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * correction;
            }
        }
    }
}
