//! Full-reference image quality: PSNR and SSIM, and per-protocol reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{gaussian_kernel_sized, protocol_target, DogParams, Plane, Protocol, StokesImage};
use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::training::synthesize_with;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(a: &Plane, b: &Plane) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("image sizes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + c
}

/// `10·log10(1 / MSE)` with peak 1. Identical images give `+∞`.
pub fn psnr(a: &Plane, b: &Plane) -> Result<f64> {
    same_dims(a, b)?;
    let mse = compensated_sum(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y))) / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Valid-mode separable filtering with a symmetric 1-D kernel.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * p[y * w + x + j];
            }
            rows[y * wo + x] = s;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * rows[(y + j) * wo + x];
            }
            out[y * wo + x] = s;
        }
    }
    (out, ho, wo)
}

/// Mean local SSIM over every position where the 11×11 Gaussian window
/// (σ = 1.5) fits inside the image; dynamic range 1.
pub fn ssim(a: &Plane, b: &Plane) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let k = gaussian_kernel_sized(SSIM_SIGMA, SSIM_WINDOW / 2);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() };
    let (mu_a, ..) = filter_valid(&a.data, h, w, &k);
    let (mu_b, ..) = filter_valid(&b.data, h, w, &k);
    let (e_aa, ..) = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let (e_bb, ..) = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let (e_ab, ho, wo) = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (ho * wo) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleQuality {
    pub sample_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub protocol: Protocol,
    /// Mean over samples with finite PSNR.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Samples whose PSNR was `+∞` (exact reconstruction).
    pub excluded_psnr: usize,
    /// Sorted by `sample_id`.
    pub per_sample: Vec<SampleQuality>,
}

impl QualityReport {
    /// Aggregates per-sample results (sorted by `sample_id` first).
    pub fn from_samples(protocol: Protocol, mut per_sample: Vec<SampleQuality>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Evaluation("no samples to evaluate".into()));
        }
        per_sample.sort_by(|x, y| x.sample_id.cmp(&y.sample_id));
        let finite: Vec<f64> = per_sample.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
        let mean_psnr = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_ssim = per_sample.iter().map(|s| s.ssim).sum::<f64>() / per_sample.len() as f64;
        Ok(QualityReport {
            protocol,
            mean_psnr,
            mean_ssim,
            excluded_psnr: per_sample.len() - finite.len(),
            per_sample,
        })
    }

    /// `sample_id,psnr_db,ssim` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "sample_id,psnr_db,ssim").map_err(io)?;
        for s in &self.per_sample {
            writeln!(w, "{},{},{}", s.sample_id, s.psnr, s.ssim).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Summary without the per-sample rows; infinite PSNR becomes `null`.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "protocol": self.protocol.name(),
            "mean_psnr_db": self.mean_psnr.is_finite().then_some(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "samples": self.per_sample.len(),
            "excluded_psnr": self.excluded_psnr,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("json value serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Scores `outputs[i]` against the protocol target of `test[i]`.
pub fn evaluate_outputs(test: &[StokesImage], outputs: &[Plane], protocol: Protocol, dog: &DogParams) -> Result<QualityReport> {
    if test.len() != outputs.len() {
        return Err(Error::Evaluation(format!("{} outputs for {} samples", outputs.len(), test.len())));
    }
    let per_sample = test
        .iter()
        .zip(outputs)
        .map(|(s, out)| {
            let target = protocol_target(s, protocol, dog)?;
            Ok(SampleQuality {
                sample_id: s.sample_id.clone(),
                psnr: psnr(out, &target)?,
                ssim: ssim(out, &target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QualityReport::from_samples(protocol, per_sample)
}

pub fn evaluate_quality_with(
    generator: &GeneratorModel,
    test: &[StokesImage],
    protocol: Protocol,
    dog: &DogParams,
) -> Result<QualityReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("test set is empty".into()));
    }
    let outputs = synthesize_with(generator, test, protocol, dog)?;
    evaluate_outputs(test, &outputs, protocol, dog)
}

pub fn evaluate_quality(generator: &GeneratorModel, test: &[StokesImage], protocol: Protocol) -> Result<QualityReport> {
    evaluate_quality_with(generator, test, protocol, &DogParams::default())
}
