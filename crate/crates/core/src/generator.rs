//! Encoder / residual bottleneck / decoder synthesis network with an
//! auxiliary guidance head on the bottleneck features.
//!
//! Layout for `base_width = w`, `n_down = d`:
//!
//! ```text
//! enc0   7×7 s1 conv  in  -> w        BN PReLU
//! enc1.. 3×3 s2 conv  w·2^(i-1) -> w·2^i  BN PReLU      (i = 1..=d)
//! res*   [3×3 conv BN PReLU 3×3 conv BN] + skip   at w·2^d
//! dec*   3×3 s2 transposed conv, halving width, BN PReLU
//! out    7×7 s1 conv -> out_channels, tanh
//! guide  bilinear ×2^d upsample of the bottleneck, 3×3 conv -> out_channels, tanh
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Bound, Graph, Var};
use crate::nn::{update_running_stats, Init, Layers, NormMode, INIT_STD};
use crate::params::Params;
use crate::tensor::{ImageTensor, Tensor, ValueRange};

const SCOPE: &str = "gen/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub n_down: usize,
    pub n_res_blocks: usize,
    pub use_guidance: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3,
            out_channels: 1,
            base_width: 16,
            n_down: 2,
            n_res_blocks: 4,
            use_guidance: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_down < 1 || self.n_res_blocks < 1 || self.base_width < 8 {
            return Err(Error::Parameter(format!(
                "generator needs n_down >= 1, n_res_blocks >= 1, base_width >= 8 (got {}, {}, {})",
                self.n_down, self.n_res_blocks, self.base_width
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Parameter("generator channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Channel count of the bottleneck (residual-block width).
    pub fn bottleneck_channels(&self) -> usize {
        self.base_width << self.n_down
    }

    /// Name → shape of every trainable parameter.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut s = BTreeMap::new();
        let conv = |s: &mut BTreeMap<String, Vec<usize>>, n: &str, shape: [usize; 4]| {
            s.insert(format!("{n}.w"), shape.to_vec());
        };
        let w = self.base_width;
        conv(&mut s, "enc0.conv", [w, self.in_channels, 7, 7]);
        norm_act_shapes(&mut s, "enc0", w);
        for i in 1..=self.n_down {
            conv(&mut s, &format!("enc{i}.conv"), [w << i, w << (i - 1), 3, 3]);
            norm_act_shapes(&mut s, &format!("enc{i}"), w << i);
        }
        let c = self.bottleneck_channels();
        for j in 0..self.n_res_blocks {
            conv(&mut s, &format!("res{j}.conv1"), [c, c, 3, 3]);
            conv(&mut s, &format!("res{j}.conv2"), [c, c, 3, 3]);
            s.insert(format!("res{j}.bn1.gamma"), vec![c]);
            s.insert(format!("res{j}.bn1.beta"), vec![c]);
            s.insert(format!("res{j}.bn2.gamma"), vec![c]);
            s.insert(format!("res{j}.bn2.beta"), vec![c]);
            s.insert(format!("res{j}.act.slope"), vec![c]);
        }
        for i in 0..self.n_down {
            let cin = c >> i;
            conv(&mut s, &format!("dec{i}.deconv"), [cin, cin / 2, 3, 3]);
            norm_act_shapes(&mut s, &format!("dec{i}"), cin / 2);
        }
        conv(&mut s, "out.conv", [self.out_channels, w, 7, 7]);
        s.insert("out.conv.b".into(), vec![self.out_channels]);
        if self.use_guidance {
            conv(&mut s, "guide.conv", [self.out_channels, c, 3, 3]);
            s.insert("guide.conv.b".into(), vec![self.out_channels]);
        }
        s
    }
}

fn norm_act_shapes(s: &mut BTreeMap<String, Vec<usize>>, layer: &str, c: usize) {
    s.insert(format!("{layer}.bn.gamma"), vec![c]);
    s.insert(format!("{layer}.bn.beta"), vec![c]);
    s.insert(format!("{layer}.act.slope"), vec![c]);
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: Params,
    /// Batch-normalization running statistics.
    pub buffers: Params,
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub main: ImageTensor,
    pub guidance: Option<ImageTensor>,
}

/// Graph handles produced by [`GeneratorModel::forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub main: Var,
    pub guidance: Option<Var>,
    pub features: Var,
}

impl GeneratorModel {
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            rng: &mut rng,
            params: Params::new(),
            buffers: Params::new(),
        };
        let w = config.base_width;
        init.conv("enc0.conv", w, config.in_channels, 7, false, INIT_STD);
        init.bn("enc0.bn", w);
        init.prelu("enc0.act", w);
        for i in 1..=config.n_down {
            init.conv(&format!("enc{i}.conv"), w << i, w << (i - 1), 3, false, INIT_STD);
            init.bn(&format!("enc{i}.bn"), w << i);
            init.prelu(&format!("enc{i}.act"), w << i);
        }
        let c = config.bottleneck_channels();
        for j in 0..config.n_res_blocks {
            init.conv(&format!("res{j}.conv1"), c, c, 3, false, INIT_STD);
            init.bn(&format!("res{j}.bn1"), c);
            init.prelu(&format!("res{j}.act"), c);
            init.conv(&format!("res{j}.conv2"), c, c, 3, false, INIT_STD);
            init.bn(&format!("res{j}.bn2"), c);
        }
        for i in 0..config.n_down {
            let cin = c >> i;
            init.deconv(&format!("dec{i}.deconv"), cin, cin / 2, 3);
            init.bn(&format!("dec{i}.bn"), cin / 2);
            init.prelu(&format!("dec{i}.act"), cin / 2);
        }
        init.conv("out.conv", config.out_channels, w, 7, true, INIT_STD);
        if config.use_guidance {
            init.conv("guide.conv", config.out_channels, c, 3, true, INIT_STD);
        }
        let (params, buffers) = (init.params, init.buffers);
        Ok(GeneratorModel {
            config,
            params,
            buffers,
        })
    }

    /// Verifies every parameter array against the configured layer shapes.
    pub fn shape_audit(&self) -> Result<()> {
        let bad = self.params.shape_mismatches(&self.config.param_shapes());
        if bad.is_empty() && self.params.all_finite() {
            Ok(())
        } else if !bad.is_empty() {
            Err(Error::Shape(format!("generator parameters: {}", bad.join("; "))))
        } else {
            Err(Error::Domain("generator has non-finite parameters".into()))
        }
    }

    pub fn check_input(&self, dims: (usize, usize, usize, usize)) -> Result<()> {
        let (n, c, h, w) = dims;
        let m = 1usize << self.config.n_down;
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input size {h}×{w} is not divisible by {m}")));
        }
        Ok(())
    }

    fn layers<'a>(&'a self, graph: &'a mut Graph, bound: &'a Bound, mode: NormMode) -> Layers<'a> {
        Layers {
            graph,
            bound,
            buffers: &self.buffers,
            mode,
            scope: SCOPE,
        }
    }

    /// Encoder plus residual blocks; returns the bottleneck features.
    pub fn encode_graph(&self, graph: &mut Graph, bound: &Bound, x: Var, mode: NormMode) -> Var {
        let mut l = self.layers(graph, bound, mode);
        let mut h = l.conv("enc0.conv", x, 1, 3, false);
        h = l.bn("enc0.bn", h);
        h = l.prelu("enc0.act", h);
        for i in 1..=self.config.n_down {
            h = l.conv(&format!("enc{i}.conv"), h, 2, 1, false);
            h = l.bn(&format!("enc{i}.bn"), h);
            h = l.prelu(&format!("enc{i}.act"), h);
        }
        for j in 0..self.config.n_res_blocks {
            let r = l.conv(&format!("res{j}.conv1"), h, 1, 1, false);
            let r = l.bn(&format!("res{j}.bn1"), r);
            let r = l.prelu(&format!("res{j}.act"), r);
            let r = l.conv(&format!("res{j}.conv2"), r, 1, 1, false);
            let r = l.bn(&format!("res{j}.bn2"), r);
            h = l.graph.add(h, r);
        }
        h
    }

    /// Decoder from bottleneck features to the `[-1, 1]` output image.
    pub fn decode_graph(&self, graph: &mut Graph, bound: &Bound, features: Var, mode: NormMode) -> Var {
        let mut l = self.layers(graph, bound, mode);
        let mut h = features;
        for i in 0..self.config.n_down {
            h = l.deconv(&format!("dec{i}.deconv"), h, 2, 1, 1);
            h = l.bn(&format!("dec{i}.bn"), h);
            h = l.prelu(&format!("dec{i}.act"), h);
        }
        let h = l.conv("out.conv", h, 1, 3, true);
        l.graph.tanh(h)
    }

    /// Guidance head: full-resolution reconstruction from the bottleneck.
    pub fn guidance_graph(&self, graph: &mut Graph, bound: &Bound, features: Var) -> Var {
        let up = graph.upsample_bilinear(features, 1 << self.config.n_down);
        let w = bound.var("guide.conv.w");
        let b = bound.var("guide.conv.b");
        let h = graph.conv2d(up, w, Some(b), 1, 1);
        graph.tanh(h)
    }

    /// Full forward pass. The guidance head runs only when `with_guidance`
    /// is set and the model has one.
    pub fn forward_graph(
        &self,
        graph: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: NormMode,
        with_guidance: bool,
    ) -> GeneratorVars {
        let features = self.encode_graph(graph, bound, x, mode);
        let guidance = (with_guidance && self.config.use_guidance).then(|| self.guidance_graph(graph, bound, features));
        let main = self.decode_graph(graph, bound, features, mode);
        GeneratorVars {
            main,
            guidance,
            features,
        }
    }

    pub fn forward(&self, input: &ImageTensor, mode: NormMode) -> Result<GeneratorOutput> {
        self.check_input(input.dims())?;
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let x = g.constant(input.to_signed().into_tensor());
        let vars = self.forward_graph(&mut g, &bound, x, mode, true);
        let main = ImageTensor::new(g.value(vars.main).clone(), ValueRange::Signed)?;
        let guidance = vars
            .guidance
            .map(|v| ImageTensor::new(g.value(v).clone(), ValueRange::Signed))
            .transpose()?;
        Ok(GeneratorOutput { main, guidance })
    }

    /// Bottleneck features of `input`.
    pub fn encode(&self, input: &ImageTensor, mode: NormMode) -> Result<Tensor> {
        self.check_input(input.dims())?;
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let x = g.constant(input.to_signed().into_tensor());
        let f = self.encode_graph(&mut g, &bound, x, mode);
        Ok(g.value(f).clone())
    }

    pub fn decode(&self, features: &Tensor, mode: NormMode) -> Result<ImageTensor> {
        let (_, c, _, _) = features.dims4();
        if c != self.config.bottleneck_channels() {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {c}",
                self.config.bottleneck_channels()
            )));
        }
        let mut g = Graph::new();
        let bound = g.bind(&self.params, false);
        let f = g.constant(features.clone());
        let out = self.decode_graph(&mut g, &bound, f, mode);
        ImageTensor::new(g.value(out).clone(), ValueRange::Signed)
    }

    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        update_running_stats(&mut self.buffers, stats, SCOPE);
    }
}

pub fn build_generator(config: GeneratorConfig, seed: u64) -> Result<GeneratorModel> {
    GeneratorModel::build(config, seed)
}

pub fn generator_forward(model: &GeneratorModel, input: &ImageTensor) -> Result<GeneratorOutput> {
    model.forward(input, NormMode::Eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(in_channels: usize) -> GeneratorConfig {
        GeneratorConfig {
            in_channels,
            base_width: 8,
            n_res_blocks: 2,
            ..GeneratorConfig::default()
        }
    }

    fn input(c: usize, side: usize) -> ImageTensor {
        let n = c * side * side;
        let data = (0..n).map(|i| ((i * 37 % 101) as f64) / 100.0).collect();
        ImageTensor::new(Tensor::new(vec![1, c, side, side], data), ValueRange::Unit).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = GeneratorModel::build(small(3), 7).unwrap();
        let b = GeneratorModel::build(small(3), 7).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
        let c = GeneratorModel::build(small(3), 8).unwrap();
        assert_ne!(a.params.digest(), c.params.digest());
    }

    #[test]
    fn shape_audit_passes_for_one_and_three_channels() {
        for c in [1, 3] {
            GeneratorModel::build(small(c), 1).unwrap().shape_audit().unwrap();
        }
    }

    #[test]
    fn shape_audit_catches_tampering() {
        let mut m = GeneratorModel::build(small(1), 1).unwrap();
        m.params.insert("res0.conv1.w", Tensor::zeros(&[1, 1, 3, 3]));
        assert!(m.shape_audit().is_err());
    }

    #[test]
    fn default_residual_blocks_have_64_maps_of_3x3() {
        let cfg = GeneratorConfig::default();
        let m = GeneratorModel::build(cfg.clone(), 0).unwrap();
        for j in 0..cfg.n_res_blocks {
            for conv in ["conv1", "conv2"] {
                assert_eq!(m.params.get(&format!("res{j}.{conv}.w")).unwrap().shape(), &[64, 64, 3, 3]);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GeneratorConfig {
            n_down: 0,
            ..GeneratorConfig::default()
        };
        assert!(matches!(GeneratorModel::build(cfg, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let m = GeneratorModel::build(small(1), 1).unwrap();
        let x = input(1, 10);
        assert!(matches!(m.forward(&x, NormMode::Eval), Err(Error::Shape(_))));
        let x = input(3, 16);
        assert!(matches!(m.forward(&x, NormMode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_then_decode_equals_forward() {
        let m = GeneratorModel::build(small(3), 3).unwrap();
        let x = input(3, 16);
        for mode in [NormMode::Eval, NormMode::Train] {
            let out = m.forward(&x, mode).unwrap();
            let f = m.encode(&x, mode).unwrap();
            assert_eq!(f.shape(), &[1, 32, 4, 4]);
            assert_eq!(m.decode(&f, mode).unwrap(), out.main);
            assert_eq!(out.guidance.unwrap().dims(), (1, 1, 16, 16));
        }
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let mut m = GeneratorModel::build(small(1), 5).unwrap();
        // perturb so the residual branch would otherwise contribute
        for j in 0..2 {
            m.params.get_mut(&format!("res{j}.bn2.beta")).unwrap().data_mut().fill(0.3);
        }
        let x = input(1, 16);
        let before = m.encode(&x, NormMode::Train).unwrap();
        for j in 0..2 {
            m.params.get_mut(&format!("res{j}.bn2.gamma")).unwrap().data_mut().fill(0.0);
            m.params.get_mut(&format!("res{j}.bn2.beta")).unwrap().data_mut().fill(0.0);
        }
        let with_identity = m.encode(&x, NormMode::Train).unwrap();
        assert_ne!(before, with_identity);

        // bottleneck = output of the last downsampling stage when F ≡ 0
        let mut g = Graph::new();
        let bound = g.bind(&m.params, false);
        let xv = g.constant(x.to_signed().into_tensor());
        let mut l = m.layers(&mut g, &bound, NormMode::Train);
        let mut h = l.conv("enc0.conv", xv, 1, 3, false);
        h = l.bn("enc0.bn", h);
        h = l.prelu("enc0.act", h);
        for i in 1..=2 {
            h = l.conv(&format!("enc{i}.conv"), h, 2, 1, false);
            h = l.bn(&format!("enc{i}.bn"), h);
            h = l.prelu(&format!("enc{i}.act"), h);
        }
        assert_eq!(g.value(h), &with_identity);
    }

    #[test]
    fn outputs_stay_in_signed_range_for_extreme_weights() {
        let mut m = GeneratorModel::build(small(1), 9).unwrap();
        m.params.get_mut("out.conv.w").unwrap().data_mut().iter_mut().for_each(|v| *v *= 1e6);
        let out = m.forward(&input(1, 16), NormMode::Eval).unwrap();
        assert!(out.main.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = GeneratorModel::build(small(1), 2).unwrap();
        let stats = vec![BatchStats {
            key: "gen/enc0.bn".into(),
            mean: vec![1.0; 8],
            var: vec![2.0; 8],
            count: 2,
        }];
        m.update_running_stats(&stats);
        assert!((m.buffers.get("enc0.bn.running_mean").unwrap().data()[0] - 0.1).abs() < 1e-15);
        // 0.9·1 + 0.1·(2·2/1)
        assert!((m.buffers.get("enc0.bn.running_var").unwrap().data()[0] - 1.3).abs() < 1e-15);
    }
}
