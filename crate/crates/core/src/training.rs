//! Alternating discriminator/generator optimization, run loop with loss
//! trace and checkpoints, and inference.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::{
    make_protocol_input_with, mix_seed, resize_sample, DatasetSplit, DogParams, Plane, PreparedSet, Protocol,
    StokesImage,
};
use crate::discriminator::DiscriminatorModel;
use crate::error::{Error, Result};
use crate::features::{train_identity_head, ExtractorKind, FeatureExtractor};
use crate::generator::{GeneratorConfig, GeneratorModel};
use crate::graph::{Graph, Var};
use crate::losses::{total_generator_loss, Ablation, LossComponents, LossReport, LossWeights};
use crate::nn::NormMode;
use crate::optim::Adam;
use crate::params::Params;
use crate::tensor::{ImageTensor, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 8e-4;
pub const DEFAULT_BATCH_SIZE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub protocol: Protocol,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_betas: (f64, f64),
    pub steps: u64,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// When set, replaces the enable flags in `weights`.
    pub ablation: Option<Ablation>,
    /// Network shape; `in_channels` is always taken from the protocol.
    pub generator: GeneratorConfig,
    pub dog: DogParams,
    pub d_steps_per_g_step: usize,
    pub shuffle: bool,
    pub feature_seed: u64,
    /// Subject-classification steps applied to the identity extractor
    /// before training; 0 keeps the seeded stand-in.
    pub identity_pretrain_steps: usize,
    /// Resize every record to `image_side × image_side` first; 0 keeps the
    /// stored size.
    pub image_side: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            protocol: Protocol::PolarVis,
            weights: LossWeights::default(),
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            adam_betas: (0.9, 0.999),
            steps: 1000,
            seed: 0,
            checkpoint_every: 100,
            ablation: None,
            generator: GeneratorConfig::default(),
            dog: DogParams::default(),
            d_steps_per_g_step: 1,
            shuffle: true,
            feature_seed: 1,
            identity_pretrain_steps: 0,
            image_side: 0,
        }
    }
}

impl TrainConfig {
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if let Some(a) = self.ablation {
            w.apply_ablation(a);
        }
        w
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: self.protocol.input_channels(),
            ..self.generator.clone()
        }
    }

    pub fn discriminator_channels(&self) -> usize {
        self.protocol.input_channels() + self.generator.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        for (k, b) in [("adam_beta1", self.adam_betas.0), ("adam_beta2", self.adam_betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(k, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.steps < 1 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.d_steps_per_g_step < 1 {
            return Err(Error::config("d_steps_per_g_step", "must be >= 1"));
        }
        if self.generator.out_channels != 1 {
            return Err(Error::config("generator.out_channels", "only grayscale (1-channel) targets are supported"));
        }
        if self.image_side != 0 && self.image_side < 8 {
            return Err(Error::config("image_side", "must be 0 or >= 8"));
        }
        self.dog
            .validate()
            .map_err(|e| Error::config("dog_sigma_narrow", e.to_string()))?;
        let w = self.effective_weights();
        w.validate()?;
        if w.enable_guidance && !self.generator.use_guidance {
            return Err(Error::config(
                "generator.use_guidance",
                "guidance loss is enabled but the generator has no guidance head",
            ));
        }
        self.generator_config()
            .validate()
            .map_err(|e| Error::config("generator", e.to_string()))
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub adam_g: Adam,
    pub adam_d: Adam,
    /// Completed generator updates.
    pub step: u64,
    pub perceptual: FeatureExtractor,
    pub identity: FeatureExtractor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateMeta {
    format: String,
    step: u64,
    config: TrainConfig,
    generator: GeneratorConfig,
    discriminator_channels: usize,
    adam_g_t: u64,
    adam_d_t: u64,
    perceptual_depth: usize,
    identity_depth: usize,
}

const STATE_FORMAT: &str = "thermvis-train-state/1";

impl TrainState {
    /// Fresh models and optimizers derived from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = GeneratorModel::build(config.generator_config(), mix_seed(config.seed, 1))?;
        let discriminator = DiscriminatorModel::build(config.discriminator_channels(), mix_seed(config.seed, 2))?;
        let (b1, b2) = config.adam_betas;
        let adam_g = Adam::new(&generator.params, config.learning_rate, b1, b2);
        let adam_d = Adam::new(&discriminator.params, config.learning_rate, b1, b2);
        let out_c = config.generator.out_channels;
        let perceptual = FeatureExtractor::stand_in(ExtractorKind::Perceptual, out_c, mix_seed(config.feature_seed, 1));
        let identity = FeatureExtractor::stand_in(ExtractorKind::Identity, out_c, mix_seed(config.feature_seed, 2));
        Ok(TrainState {
            config,
            generator,
            discriminator,
            adam_g,
            adam_d,
            step: 0,
            perceptual,
            identity,
        })
    }

    /// Fine-tunes the identity extractor on the visible targets of `data`
    /// as a subject classifier (see [`train_identity_head`]).
    pub fn pretrain_identity(&mut self, data: &[StokesImage]) -> Result<()> {
        if self.config.identity_pretrain_steps == 0 || data.is_empty() {
            return Ok(());
        }
        let images: Vec<(usize, Tensor)> = data
            .iter()
            .map(|s| {
                let (_, t) = make_protocol_input_with(s, self.config.protocol, &self.config.dog)?;
                let (_, c, h, w) = t.dims();
                Ok((s.subject_id as usize, t.into_tensor().reshape(vec![c, h, w])))
            })
            .collect::<Result<_>>()?;
        self.identity = train_identity_head(
            &self.identity,
            &images,
            self.config.identity_pretrain_steps,
            self.config.batch_size,
            1e-3,
            mix_seed(self.config.feature_seed, 3),
        )?;
        Ok(())
    }

    /// One discriminator update (skipped when the adversarial term is off)
    /// followed by one generator update. `input` and `target` are batches in
    /// the `[-1, 1]` convention.
    pub fn train_step(&mut self, input: &ImageTensor, target: &ImageTensor) -> Result<LossReport> {
        let weights = self.config.effective_weights();
        let x_t = input.to_signed().into_tensor();
        let y_t = target.to_signed().into_tensor();
        self.generator.check_input(input.dims())?;
        if y_t.dims4() != (x_t.dims4().0, self.generator.config.out_channels, x_t.dims4().2, x_t.dims4().3) {
            return Err(Error::Shape(format!(
                "target {:?} does not match input {:?}",
                y_t.shape(),
                x_t.shape()
            )));
        }
        let step_no = self.step + 1;

        let mut g = Graph::new();
        let gb = g.bind(&self.generator.params, true);
        let x = g.constant(x_t.clone());
        let y = g.constant(y_t.clone());
        let gv = self
            .generator
            .forward_graph(&mut g, &gb, x, NormMode::Train, weights.enable_guidance);

        let mut d_loss = 0.0;
        if weights.enable_adversarial {
            let fake = g.value(gv.main).clone();
            for _ in 0..self.config.d_steps_per_g_step {
                d_loss = self.discriminator_step(&x_t, &y_t, &fake)?;
            }
            if !d_loss.is_finite() {
                return Err(Error::NonFinite {
                    term: "d_loss",
                    step: step_no,
                });
            }
        }

        let coef = weights.coefficients();
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut comp = LossComponents::default();
        let squared = weights.squared_pixel_loss;
        if weights.enable_e {
            let v = g.pixel_norm_loss(gv.main, y, squared);
            comp.l_e = g.value(v).item();
            terms.push((v, coef[0]));
        }
        if let (true, Some(guide)) = (weights.enable_guidance, gv.guidance) {
            let v = g.pixel_norm_loss(guide, y, squared);
            comp.l_e_guidance = g.value(v).item();
            terms.push((v, coef[1]));
        }
        if weights.enable_adversarial {
            let db = g.bind(&self.discriminator.params, false);
            let dv = self.discriminator.forward_graph(&mut g, &db, x, gv.main, NormMode::Train);
            let v = g.softplus_mean(dv.logits, -1.0);
            comp.l_a = g.value(v).item();
            terms.push((v, coef[2]));
        }
        for (on, extractor, slot, k) in [
            (weights.enable_perceptual, &self.perceptual, 0, coef[3]),
            (weights.enable_identity, &self.identity, 1, coef[4]),
        ] {
            if !on {
                continue;
            }
            let fp = extractor.extract_graph(&mut g, gv.main);
            let ft = extractor.extract_graph(&mut g, y);
            let v = g.abs_diff_mean(fp, ft);
            if slot == 0 {
                comp.l_p = g.value(v).item();
            } else {
                comp.l_i = g.value(v).item();
            }
            terms.push((v, k));
        }
        let (_, mut report) = total_generator_loss(comp, &weights);
        report.d_loss = d_loss;
        if let Some(term) = report.first_non_finite() {
            return Err(Error::NonFinite { term, step: step_no });
        }
        if !terms.is_empty() {
            let total = g.weighted_sum(&terms);
            let grads = g.backward(total);
            let pg = gb.grads(&g, &grads);
            self.adam_g.step(&mut self.generator.params, &pg);
        }
        let stats: Vec<_> = g.batch_stats().to_vec();
        self.generator.update_running_stats(&stats);
        self.step = step_no;
        Ok(report)
    }

    /// One optimizer step of the discriminator on real pairs and detached
    /// fakes; returns the loss before the update.
    fn discriminator_step(&mut self, x: &Tensor, y: &Tensor, fake: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let db = g.bind(&self.discriminator.params, true);
        let cond = g.constant(x.clone());
        let real = g.constant(y.clone());
        let fake = g.constant(fake.clone());
        let dr = self.discriminator.forward_graph(&mut g, &db, cond, real, NormMode::Train);
        let df = self.discriminator.forward_graph(&mut g, &db, cond, fake, NormMode::Train);
        let lr = g.softplus_mean(dr.logits, -1.0);
        let lf = g.softplus_mean(df.logits, 1.0);
        let loss = g.weighted_sum(&[(lr, 1.0), (lf, 1.0)]);
        let value = g.value(loss).item();
        let grads = g.backward(loss);
        let pd = db.grads(&g, &grads);
        self.adam_d.step(&mut self.discriminator.params, &pd);
        let stats: Vec<_> = g.batch_stats().to_vec();
        self.discriminator.update_running_stats(&stats);
        Ok(value)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = StateMeta {
            format: STATE_FORMAT.into(),
            step: self.step,
            config: self.config.clone(),
            generator: self.generator.config.clone(),
            discriminator_channels: self.discriminator.in_channels,
            adam_g_t: self.adam_g.t,
            adam_d_t: self.adam_d.t,
            perceptual_depth: self.perceptual.depth(),
            identity_depth: self.identity.depth(),
        };
        let mut t = Params::new();
        t.extend(self.generator.params.with_prefix("generator/"));
        t.extend(self.generator.buffers.with_prefix("generator_buffers/"));
        t.extend(self.discriminator.params.with_prefix("discriminator/"));
        t.extend(self.discriminator.buffers.with_prefix("discriminator_buffers/"));
        t.extend(self.adam_g.m.with_prefix("adam_g/m/"));
        t.extend(self.adam_g.v.with_prefix("adam_g/v/"));
        t.extend(self.adam_d.m.with_prefix("adam_d/m/"));
        t.extend(self.adam_d.v.with_prefix("adam_d/v/"));
        t.extend(self.perceptual.params().with_prefix("features/perceptual/"));
        t.extend(self.identity.params().with_prefix("features/identity/"));
        Checkpoint::new(&meta, t)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: StateMeta = ckpt.metadata_as()?;
        if meta.format != STATE_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported state format `{}`", meta.format)));
        }
        let t = &ckpt.tensors;
        let generator = GeneratorModel {
            config: meta.generator,
            params: t.strip_prefix("generator/"),
            buffers: t.strip_prefix("generator_buffers/"),
        };
        generator.shape_audit()?;
        let discriminator = DiscriminatorModel {
            in_channels: meta.discriminator_channels,
            params: t.strip_prefix("discriminator/"),
            buffers: t.strip_prefix("discriminator_buffers/"),
        };
        discriminator.shape_audit()?;
        let (b1, b2) = meta.config.adam_betas;
        let lr = meta.config.learning_rate;
        let adam = |params: &Params, prefix: &str, step: u64| -> Result<Adam> {
            let mut a = Adam::new(params, lr, b1, b2);
            a.t = step;
            a.m = t.strip_prefix(&format!("{prefix}/m/"));
            a.v = t.strip_prefix(&format!("{prefix}/v/"));
            let same = |m: &Params| {
                m.len() == params.len() && params.iter().all(|(n, p)| m.get(n).is_some_and(|x| x.shape() == p.shape()))
            };
            if !same(&a.m) || !same(&a.v) {
                return Err(Error::Checkpoint(format!("{prefix} moments do not mirror the parameters")));
            }
            Ok(a)
        };
        let adam_g = adam(&generator.params, "adam_g", meta.adam_g_t)?;
        let adam_d = adam(&discriminator.params, "adam_d", meta.adam_d_t)?;
        let perceptual = FeatureExtractor::from_params(
            ExtractorKind::Perceptual,
            t.strip_prefix("features/perceptual/"),
            meta.perceptual_depth,
        )?;
        let identity =
            FeatureExtractor::from_params(ExtractorKind::Identity, t.strip_prefix("features/identity/"), meta.identity_depth)?;
        Ok(TrainState {
            config: meta.config,
            generator,
            discriminator,
            adam_g,
            adam_d,
            step: meta.step,
            perceptual,
            identity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Applies the configured resize to a record list.
pub fn prepare_records(data: &[StokesImage], image_side: usize) -> Result<Vec<StokesImage>> {
    if image_side == 0 {
        return Ok(data.to_vec());
    }
    data.iter().map(|s| resize_sample(s, image_side)).collect()
}

/// Output of [`train`] / [`resume`].
#[derive(Debug)]
pub struct TrainRun {
    pub state: TrainState,
    pub trace: Vec<(u64, LossReport)>,
    pub trace_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Trains from scratch for `config.steps` generator updates on `data.train`,
/// writing `trace.csv` and checkpoints under `out_dir`.
pub fn train(config: &TrainConfig, data: &DatasetSplit, out_dir: &Path) -> Result<TrainRun> {
    let records = prepare_records(&data.train, config.image_side)?;
    let mut state = TrainState::new(config.clone())?;
    state.pretrain_identity(&records)?;
    run_loop(state, &records, out_dir, Vec::new())
}

/// Continues a run from a saved state up to its configured step count; the
/// trace rows after the checkpoint's step are replaced.
pub fn resume(checkpoint: &Path, data: &DatasetSplit, out_dir: &Path) -> Result<TrainRun> {
    let state = TrainState::load(checkpoint)?;
    let records = prepare_records(&data.train, state.config.image_side)?;
    let trace_path = out_dir.join("trace.csv");
    let earlier = if trace_path.exists() {
        read_trace(&trace_path)?
            .into_iter()
            .filter(|(s, _)| *s <= state.step)
            .collect()
    } else {
        Vec::new()
    };
    run_loop(state, &records, out_dir, earlier)
}

fn run_loop(
    mut state: TrainState,
    records: &[StokesImage],
    out_dir: &Path,
    mut trace: Vec<(u64, LossReport)>,
) -> Result<TrainRun> {
    if records.is_empty() {
        return Err(Error::Parameter("training split is empty".into()));
    }
    let cfg = state.config.clone();
    let set = PreparedSet::new(records, cfg.protocol, &cfg.dog)?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let trace_path = out_dir.join("trace.csv");
    let file = std::fs::File::create(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(&trace_path, e);
    writeln!(out, "{}", LossReport::CSV_HEADER).map_err(io)?;
    for (s, r) in &trace {
        writeln!(out, "{}", r.csv_row(*s)).map_err(io)?;
    }
    let mut checkpoints = Vec::new();
    while state.step < cfg.steps {
        let idx = set.batch_indices(cfg.batch_size, cfg.seed, cfg.shuffle, state.step);
        let (x, y) = set.gather(&idx)?;
        let report = state.train_step(&x, &y)?;
        writeln!(out, "{}", report.csv_row(state.step)).map_err(io)?;
        trace.push((state.step, report));
        let periodic = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
        if periodic || state.step == cfg.steps {
            out.flush().map_err(io)?;
            let p = checkpoint_path(out_dir, state.step);
            state.save(&p)?;
            checkpoints.push(p);
        }
    }
    out.flush().map_err(io)?;
    Ok(TrainRun {
        state,
        trace,
        trace_path,
        checkpoints,
    })
}

pub fn read_trace(path: &Path) -> Result<Vec<(u64, LossReport)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))?;
    #[derive(Deserialize)]
    struct Row {
        step: u64,
        #[serde(flatten)]
        report: LossReport,
    }
    rdr.deserialize::<Row>()
        .map(|r| {
            r.map(|row| (row.step, row.report))
                .map_err(|e| Error::Evaluation(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Inference-mode synthesis, returned in `[0, 1]`.
pub fn synthesize_with(
    generator: &GeneratorModel,
    data: &[StokesImage],
    protocol: Protocol,
    dog: &DogParams,
) -> Result<Vec<Plane>> {
    data.iter()
        .map(|s| {
            let (x, _) = make_protocol_input_with(s, protocol, dog)?;
            let out = generator.forward(&x, NormMode::Eval)?.main.to_unit();
            let (_, _, h, w) = out.dims();
            Ok(Plane::new(h, w, out.into_tensor().into_data()))
        })
        .collect()
}

pub fn synthesize(generator: &GeneratorModel, data: &[StokesImage], protocol: Protocol) -> Result<Vec<Plane>> {
    synthesize_with(generator, data, protocol, &DogParams::default())
}

/// Trains each of the five loss combinations from the same seed and data,
/// in `out_dir/<label>/`.
pub fn train_ablations(base: &TrainConfig, data: &DatasetSplit, out_dir: &Path) -> Result<Vec<(Ablation, TrainRun)>> {
    Ablation::ALL
        .into_iter()
        .map(|a| {
            let cfg = TrainConfig {
                ablation: Some(a),
                ..base.clone()
            };
            let dir = out_dir.join(ablation_dir_name(a));
            Ok((a, train(&cfg, data, &dir)?))
        })
        .collect()
}

/// Filesystem-safe directory name for an ablation (`E+G` → `E_G`).
pub fn ablation_dir_name(a: Ablation) -> String {
    a.label().replace('+', "_")
}
