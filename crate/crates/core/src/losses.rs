//! Generator and discriminator objectives.
//!
//! Generator objective:
//!
//! ```text
//! total = L_E + w_G·L_E(guidance) + λ_A·L_A + λ_P·L_P + λ_I·L_I
//! ```
//!
//! with `w_G = 1` unless overridden. `L_E` is the per-pixel 2-norm of the
//! channel residual averaged over pixels and batch (mean absolute error for
//! one channel), `L_A = mean(−ln D(X, G(X)))` over patches, and `L_P`, `L_I`
//! are mean absolute feature differences at the perceptual and identity
//! taps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::graph::Graph;
use crate::tensor::{ImageTensor, Tensor};

pub const DEFAULT_LAMBDA_A: f64 = 0.005;
pub const DEFAULT_LAMBDA_P: f64 = 0.8;
pub const DEFAULT_LAMBDA_I: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_p: f64,
    pub lambda_i: f64,
    pub guidance_weight: f64,
    pub enable_e: bool,
    pub enable_guidance: bool,
    pub enable_adversarial: bool,
    pub enable_perceptual: bool,
    pub enable_identity: bool,
    /// Use the squared per-pixel norm (MSE-style) instead of the plain norm.
    pub squared_pixel_loss: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Ablation::All.weights()
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("lambda_a", self.lambda_a),
            ("lambda_p", self.lambda_p),
            ("lambda_i", self.lambda_i),
            ("guidance_weight", self.guidance_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("weight must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Sets the enable flags to exactly the given ablation's terms.
    pub fn apply_ablation(&mut self, ablation: Ablation) {
        let w = ablation.weights();
        self.enable_e = w.enable_e;
        self.enable_guidance = w.enable_guidance;
        self.enable_adversarial = w.enable_adversarial;
        self.enable_perceptual = w.enable_perceptual;
        self.enable_identity = w.enable_identity;
    }

    /// Effective coefficients `(e, guidance, a, p, i)`; disabled terms get 0.
    pub fn coefficients(&self) -> [f64; 5] {
        let on = |f: bool, w: f64| if f { w } else { 0.0 };
        [
            on(self.enable_e, 1.0),
            on(self.enable_guidance, self.guidance_weight),
            on(self.enable_adversarial, self.lambda_a),
            on(self.enable_perceptual, self.lambda_p),
            on(self.enable_identity, self.lambda_i),
        ]
    }
}

/// The five loss combinations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// `L_E` only.
    E,
    /// `L_E` + guidance `L_E`.
    EG,
    /// + adversarial.
    EGGan,
    /// + perceptual.
    EGGanP,
    /// All five terms.
    All,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::E, Ablation::EG, Ablation::EGGan, Ablation::EGGanP, Ablation::All];

    pub fn weights(self) -> LossWeights {
        let rank = self as usize;
        LossWeights {
            lambda_a: DEFAULT_LAMBDA_A,
            lambda_p: DEFAULT_LAMBDA_P,
            lambda_i: DEFAULT_LAMBDA_I,
            guidance_weight: 1.0,
            enable_e: true,
            enable_guidance: rank >= 1,
            enable_adversarial: rank >= 2,
            enable_perceptual: rank >= 3,
            enable_identity: rank >= 4,
            squared_pixel_loss: false,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::E => "E",
            Ablation::EG => "E+G",
            Ablation::EGGan => "E+G+GAN",
            Ablation::EGGanP => "E+G+GAN+P",
            Ablation::All => "ALL",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config("ablation", format!("unknown ablation `{s}` (E, E+G, E+G+GAN, E+G+GAN+P, ALL)")))
    }
}

/// Per-term readout of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_e: f64,
    pub l_e_guidance: f64,
    pub l_a: f64,
    pub l_p: f64,
    pub l_i: f64,
    pub total: f64,
    pub d_loss: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_e,l_e_guidance,l_a,l_p,l_i,total,d_loss";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_e, self.l_e_guidance, self.l_a, self.l_p, self.l_i, self.total, self.d_loss
        )
    }

    pub fn values(&self) -> [f64; 7] {
        [self.l_e, self.l_e_guidance, self.l_a, self.l_p, self.l_i, self.total, self.d_loss]
    }

    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        const NAMES: [&str; 7] = ["l_e", "l_e_guidance", "l_a", "l_p", "l_i", "total", "d_loss"];
        NAMES.into_iter().zip(self.values()).find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// Raw (unweighted) component values fed to [`total_generator_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub l_e: f64,
    pub l_e_guidance: f64,
    pub l_a: f64,
    pub l_p: f64,
    pub l_i: f64,
}

pub fn total_generator_loss(c: LossComponents, weights: &LossWeights) -> (f64, LossReport) {
    let k = weights.coefficients();
    let mask = |i: usize, v: f64| if enabled(weights, i) { v } else { 0.0 };
    let report = LossReport {
        l_e: mask(0, c.l_e),
        l_e_guidance: mask(1, c.l_e_guidance),
        l_a: mask(2, c.l_a),
        l_p: mask(3, c.l_p),
        l_i: mask(4, c.l_i),
        total: 0.0,
        d_loss: 0.0,
    };
    let total = k[0] * report.l_e + k[1] * report.l_e_guidance + k[2] * report.l_a + k[3] * report.l_p + k[4] * report.l_i;
    (total, LossReport { total, ..report })
}

fn enabled(w: &LossWeights, i: usize) -> bool {
    [w.enable_e, w.enable_guidance, w.enable_adversarial, w.enable_perceptual, w.enable_identity][i]
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Pixel loss between two image batches (compared in the `[-1, 1]` network
/// convention when their ranges differ).
pub fn euclidean_loss(pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    let (p, t) = if pred.range() == target.range() {
        (pred.tensor().clone(), target.tensor().clone())
    } else {
        (pred.to_signed().into_tensor(), target.to_signed().into_tensor())
    };
    pixel_loss(&p, &t, false)
}

/// Mean over batch and pixels of `‖pred − target‖₂` across channels
/// (squared when `squared`).
pub fn pixel_loss(pred: &Tensor, target: &Tensor, squared: bool) -> Result<f64> {
    same_shape(pred, target)?;
    if pred.shape().len() != 4 {
        return Err(Error::Shape("pixel loss needs NCHW tensors".into()));
    }
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = g.pixel_norm_loss(p, t, squared);
    Ok(g.value(l).item())
}

fn check_probs(map: &Tensor, allow_zero: bool, allow_one: bool, what: &str) -> Result<()> {
    for &v in map.data() {
        let ok = (v > 0.0 || (allow_zero && v == 0.0)) && (v < 1.0 || (allow_one && v == 1.0));
        if !ok {
            return Err(Error::Domain(format!("{what} value {v} outside the admissible probability range")));
        }
    }
    Ok(())
}

/// `mean(−ln p)` over batch and patches. `p` must lie in `(0, 1]`.
pub fn adversarial_loss_g(patch_map: &Tensor) -> Result<f64> {
    check_probs(patch_map, false, true, "patch")?;
    Ok(patch_map.data().iter().map(|p| -p.ln()).sum::<f64>() / patch_map.len() as f64)
}

/// `mean(−ln real) + mean(−ln(1 − fake))`, with `real ∈ (0, 1]` and
/// `fake ∈ [0, 1)`.
pub fn discriminator_loss(real_map: &Tensor, fake_map: &Tensor) -> Result<f64> {
    check_probs(real_map, false, true, "real patch")?;
    check_probs(fake_map, true, false, "fake patch")?;
    let real = real_map.data().iter().map(|p| -p.ln()).sum::<f64>() / real_map.len() as f64;
    let fake = fake_map.data().iter().map(|p| -(-p).ln_1p()).sum::<f64>() / fake_map.len() as f64;
    Ok(real + fake)
}

/// Mean absolute difference of tap activations of `pred` and `target`.
pub fn feature_loss(extractor: &FeatureExtractor, pred: &ImageTensor, target: &ImageTensor) -> Result<f64> {
    same_shape(pred.tensor(), target.tensor())?;
    let a = extractor.extract(pred)?;
    let b = extractor.extract(target)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}
