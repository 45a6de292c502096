//! Conditional patch discriminator `CB(32)-CBP(64)-CBP(128)-CBP(256)-CBP(256)-C(1)-Sigmoid`.
//!
//! The condition image and the candidate are concatenated along channels.
//! The two ends are 3×3 stride-1 convolutions; the four middle blocks are
//! 4×4 stride-2, so an `H×W` input gives an `H/16 × W/16` probability map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Bound, Graph, Var};
use crate::nn::{update_running_stats, Init, Layers, NormMode, INIT_STD};
use crate::params::Params;
use crate::tensor::{ImageTensor, Tensor};

const SCOPE: &str = "disc/";

pub const LAYER_WIDTHS: [usize; 6] = [32, 64, 128, 256, 256, 1];

/// `(kernel, stride, pad)` for each convolution, in order.
pub const LAYER_GEOMETRY: [(usize, usize, usize); 6] =
    [(3, 1, 1), (4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 2, 1), (3, 1, 1)];

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    pub in_channels: usize,
    pub params: Params,
    pub buffers: Params,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorVars {
    pub logits: Var,
    pub probs: Var,
}

impl DiscriminatorModel {
    pub fn build(in_channels: usize, seed: u64) -> Result<Self> {
        if in_channels < 2 {
            return Err(Error::Parameter(format!(
                "discriminator needs at least 2 input channels (condition + candidate), got {in_channels}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            params: Params::new(),
            buffers: Params::new(),
        };
        let mut c_in = in_channels;
        for (i, (&width, &(k, _, _))) in LAYER_WIDTHS.iter().zip(&LAYER_GEOMETRY).enumerate() {
            let last = i == LAYER_WIDTHS.len() - 1;
            init.conv(&format!("l{i}.conv"), width, c_in, k, last, INIT_STD);
            if !last {
                init.bn(&format!("l{i}.bn"), width);
            }
            if (1..5).contains(&i) {
                init.prelu(&format!("l{i}.act"), width);
            }
            c_in = width;
        }
        Ok(DiscriminatorModel {
            in_channels,
            params: init.params,
            buffers: init.buffers,
        })
    }

    /// Output widths of the convolutions in forward order.
    pub fn conv_widths(&self) -> Vec<usize> {
        (0..LAYER_WIDTHS.len())
            .map(|i| self.params.get(&format!("l{i}.conv.w")).map_or(0, |t| t.shape()[0]))
            .collect()
    }

    pub fn shape_audit(&self) -> Result<()> {
        let mut expected = std::collections::BTreeMap::new();
        let mut c_in = self.in_channels;
        for (i, (&width, &(k, _, _))) in LAYER_WIDTHS.iter().zip(&LAYER_GEOMETRY).enumerate() {
            expected.insert(format!("l{i}.conv.w"), vec![width, c_in, k, k]);
            if i == 5 {
                expected.insert(format!("l{i}.conv.b"), vec![width]);
            } else {
                expected.insert(format!("l{i}.bn.gamma"), vec![width]);
                expected.insert(format!("l{i}.bn.beta"), vec![width]);
            }
            if (1..5).contains(&i) {
                expected.insert(format!("l{i}.act.slope"), vec![width]);
            }
            c_in = width;
        }
        let bad = self.params.shape_mismatches(&expected);
        if !bad.is_empty() {
            return Err(Error::Shape(format!("discriminator parameters: {}", bad.join("; "))));
        }
        if !self.params.all_finite() {
            return Err(Error::Domain("discriminator has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Checks condition/candidate compatibility and returns the patch-map size.
    pub fn check_inputs(&self, cond: &Tensor, cand: &Tensor) -> Result<(usize, usize)> {
        let (n, cc, h, w) = cond.dims4();
        let (n2, ck, h2, w2) = cand.dims4();
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::Shape(format!(
                "condition {n}×{h}×{w} and candidate {n2}×{h2}×{w2} disagree"
            )));
        }
        if cc + ck != self.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {cc} + {ck}",
                self.in_channels
            )));
        }
        let mut size = (h, w);
        for &(k, s, p) in &LAYER_GEOMETRY {
            let ho = crate::kernels::conv_out_len(size.0, k, s, p);
            let wo = crate::kernels::conv_out_len(size.1, k, s, p);
            match (ho, wo) {
                (Some(a), Some(b)) if a > 0 && b > 0 => size = (a, b),
                _ => return Err(Error::Shape(format!("input {h}×{w} is too small for the discriminator"))),
            }
        }
        Ok(size)
    }

    pub fn forward_graph(&self, graph: &mut Graph, bound: &Bound, cond: Var, cand: Var, mode: NormMode) -> DiscriminatorVars {
        let x = graph.concat_channels(cond, cand);
        let mut l = Layers {
            graph,
            bound,
            buffers: &self.buffers,
            mode,
            scope: SCOPE,
        };
        let mut h = x;
        for (i, &(_, stride, pad)) in LAYER_GEOMETRY.iter().enumerate() {
            let last = i == LAYER_GEOMETRY.len() - 1;
            h = l.conv(&format!("l{i}.conv"), h, stride, pad, last);
            if !last {
                h = l.bn(&format!("l{i}.bn"), h);
            }
            if (1..5).contains(&i) {
                h = l.prelu(&format!("l{i}.act"), h);
            }
        }
        let probs = l.graph.sigmoid(h);
        DiscriminatorVars { logits: h, probs }
    }

    /// Patch probability map `N×1×(H/16)×(W/16)` for a condition/candidate pair.
    pub fn forward(&self, condition: &ImageTensor, candidate: &ImageTensor, mode: NormMode) -> Result<Tensor> {
        let cond = condition.to_signed().into_tensor();
        let cand = candidate.to_signed().into_tensor();
        self.check_inputs(&cond, &cand)?;
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let (c, k) = (g.constant(cond), g.constant(cand));
        let vars = self.forward_graph(&mut g, &bound, c, k, mode);
        Ok(g.value(vars.probs).clone())
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        update_running_stats(&mut self.buffers, stats, SCOPE);
    }

    /// Range of patch indices (inclusive) along one axis whose receptive
    /// field contains input index `i`, from the layer arithmetic alone.
    pub fn affected_patches(len: usize, i: usize) -> Option<(usize, usize)> {
        let (mut lo, mut hi, mut n) = (i as isize, i as isize, len as isize);
        for &(k, s, p) in &LAYER_GEOMETRY {
            let (k, s, p) = (k as isize, s as isize, p as isize);
            let n_out = (n + 2 * p - k) / s + 1;
            // output o reads inputs o·s − p ..= o·s − p + k − 1
            let new_lo = (lo + p - k + 1 + s - 1).div_euclid(s).max(0);
            let new_hi = (hi + p).div_euclid(s).min(n_out - 1);
            if new_lo > new_hi {
                return None;
            }
            lo = new_lo;
            hi = new_hi;
            n = n_out;
        }
        Some((lo as usize, hi as usize))
    }
}

pub fn build_discriminator(in_channels: usize, seed: u64) -> Result<DiscriminatorModel> {
    DiscriminatorModel::build(in_channels, seed)
}

pub fn discriminator_forward(
    model: &DiscriminatorModel,
    condition: &ImageTensor,
    candidate: &ImageTensor,
) -> Result<Tensor> {
    model.forward(condition, candidate, NormMode::Eval)
}
