//! Frozen feature extractors for the perceptual and identity losses.
//!
//! The stand-in network is a stack of 3×3 convolution + ReLU stages of
//! widths 16, 32, 64 with a 2×2 average pool between stages. The identity
//! extractor taps the second stage (`relu2`), the perceptual extractor the
//! third (`relu3`). Any weights with the same naming (`s{i}.conv.w`,
//! `s{i}.conv.b`) can be loaded instead of the seeded stand-in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::optim::Adam;
use crate::params::Params;
use crate::tensor::{ImageTensor, Tensor};

pub const STAND_IN_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractorKind {
    Perceptual,
    Identity,
}

impl ExtractorKind {
    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::Perceptual => "perceptual",
            ExtractorKind::Identity => "identity",
        }
    }

    /// Number of stages evaluated by the stand-in network.
    pub fn tap_depth(self) -> usize {
        match self {
            ExtractorKind::Perceptual => 3,
            ExtractorKind::Identity => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub kind: ExtractorKind,
    pub in_channels: usize,
    /// Output width of each stage.
    pub widths: Vec<usize>,
    params: Params,
    /// Number of stages evaluated; activations of the last are returned.
    depth: usize,
}

impl FeatureExtractor {
    /// Seeded stand-in network (He-normal weights, zero biases).
    pub fn stand_in(kind: ExtractorKind, in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut c_in = in_channels;
        for (i, &w) in STAND_IN_WIDTHS.iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            params.insert(format!("s{i}.conv.w"), Tensor::randn(&[w, c_in, 3, 3], std, &mut rng));
            params.insert(format!("s{i}.conv.b"), Tensor::zeros(&[w]));
            c_in = w;
        }
        FeatureExtractor {
            kind,
            in_channels,
            widths: STAND_IN_WIDTHS.to_vec(),
            params,
            depth: kind.tap_depth(),
        }
    }

    /// Extractor from externally supplied stage weights, tapping after
    /// `depth` stages.
    pub fn from_params(kind: ExtractorKind, params: Params, depth: usize) -> Result<Self> {
        let mut widths = Vec::new();
        let mut c_prev = None;
        let mut in_channels = 0;
        for i in 0.. {
            let Some(w) = params.get(&format!("s{i}.conv.w")) else {
                break;
            };
            let s = w.shape();
            if s.len() != 4 || s[2] != 3 || s[3] != 3 {
                return Err(Error::Shape(format!("s{i}.conv.w must be [out, in, 3, 3], got {s:?}")));
            }
            match c_prev {
                None => in_channels = s[1],
                Some(c) if c != s[1] => {
                    return Err(Error::Shape(format!("s{i}.conv.w expects {} inputs, previous stage gives {c}", s[1])))
                }
                _ => {}
            }
            match params.get(&format!("s{i}.conv.b")) {
                Some(b) if b.shape() == [s[0]] => {}
                _ => return Err(Error::Shape(format!("s{i}.conv.b missing or not [{}]", s[0]))),
            }
            widths.push(s[0]);
            c_prev = Some(s[0]);
        }
        if depth == 0 || depth > widths.len() {
            return Err(Error::Parameter(format!(
                "tap after {depth} stages does not exist ({} stages)",
                widths.len()
            )));
        }
        if params.len() != 2 * widths.len() {
            return Err(Error::Shape("unexpected extra extractor parameters".into()));
        }
        if !params.all_finite() {
            return Err(Error::Domain("extractor has non-finite parameters".into()));
        }
        Ok(FeatureExtractor {
            kind,
            in_channels,
            widths,
            params,
            depth,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn tap_name(&self) -> String {
        format!("relu{}", self.depth)
    }

    /// Feature tensor shape `[C, H, W]` for an `h×w` input.
    pub fn output_shape(&self, h: usize, w: usize) -> [usize; 3] {
        let pools = self.depth - 1;
        [self.widths[self.depth - 1], h >> pools, w >> pools]
    }

    /// Activations at the tap. Weights enter the graph as constants, so
    /// gradients reach `x` but never the extractor.
    pub fn extract_graph(&self, graph: &mut Graph, x: Var) -> Var {
        let bound = graph.bind(&self.params, false);
        self.extract_bound(graph, &bound, x)
    }

    fn extract_bound(&self, graph: &mut Graph, bound: &Bound, x: Var) -> Var {
        let mut h = x;
        for i in 0..self.depth {
            if i > 0 {
                h = graph.avg_pool2(h);
            }
            let w = bound.var(&format!("s{i}.conv.w"));
            let b = bound.var(&format!("s{i}.conv.b"));
            h = graph.conv2d(h, w, Some(b), 1, 1);
            h = graph.relu(h);
        }
        h
    }

    pub fn extract(&self, image: &ImageTensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims();
        if c != self.in_channels {
            return Err(Error::Shape(format!("extractor expects {} channels, got {c}", self.in_channels)));
        }
        if (h >> (self.depth - 1)) == 0 || (w >> (self.depth - 1)) == 0 {
            return Err(Error::Shape(format!("{h}×{w} image too small for the extractor")));
        }
        let mut g = Graph::new();
        let x = g.constant(image.to_signed().into_tensor());
        let f = self.extract_graph(&mut g, x);
        Ok(g.value(f).clone())
    }
}

pub fn build_stand_in_extractor(kind: ExtractorKind, in_channels: usize, seed: u64) -> FeatureExtractor {
    FeatureExtractor::stand_in(kind, in_channels, seed)
}

/// Fine-tunes an extractor's stages as a subject classifier (global-average
/// pooled tap features → linear head, softmax cross-entropy), then discards
/// the head and returns the frozen extractor.
///
/// `images` are `[C, H, W]` tensors in `[-1, 1]` with their subject labels.
pub fn train_identity_head(
    extractor: &FeatureExtractor,
    images: &[(usize, Tensor)],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<FeatureExtractor> {
    if images.is_empty() || batch_size == 0 {
        return Err(Error::Parameter("identity head training needs images and batch_size >= 1".into()));
    }
    let mut classes: Vec<usize> = images.iter().map(|(s, _)| *s).collect();
    classes.sort_unstable();
    classes.dedup();
    let label_of = |s: usize| classes.binary_search(&s).unwrap();
    let feat = extractor.widths[extractor.depth - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = extractor.params.clone();
    params.insert("head.w", Tensor::randn(&[classes.len(), feat], 0.01, &mut rng));
    params.insert("head.b", Tensor::zeros(&[classes.len()]));
    let mut opt = Adam::new(&params, lr, 0.9, 0.999);
    let order = crate::dataio::permutation(images.len(), seed, 0);
    for step in 0..steps {
        let batch: Vec<&(usize, Tensor)> = (0..batch_size.min(images.len()))
            .map(|j| &images[order[(step * batch_size + j) % images.len()]])
            .collect();
        let x = Tensor::stack(&batch.iter().map(|(_, t)| t).collect::<Vec<_>>());
        let labels: Vec<usize> = batch.iter().map(|(s, _)| label_of(*s)).collect();
        let mut g = Graph::new();
        let bound = g.bind(&params, true);
        let xv = g.constant(x);
        let f = extractor.extract_bound(&mut g, &bound, xv);
        let pooled = g.global_avg_pool(f);
        let logits = g.linear(pooled, bound.var("head.w"), bound.var("head.b"));
        let loss = g.softmax_cross_entropy(logits, &labels);
        let grads = g.backward(loss);
        opt.step(&mut params, &bound.grads(&g, &grads));
    }
    let mut stages = Params::new();
    for (k, v) in params.iter() {
        if k.starts_with('s') {
            stages.insert(k.clone(), v.clone());
        }
    }
    FeatureExtractor::from_params(extractor.kind, stages, extractor.depth)
}
