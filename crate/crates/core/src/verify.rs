//! Face verification: embeddings, gallery/probe cosine scores, ROC, AUC
//! and EER.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{protocol_channels, protocol_target, DogParams, Plane, Protocol, StokesImage};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::generator::GeneratorModel;
use crate::tensor::{ImageTensor, ValueRange};
use crate::training::synthesize_with;

/// Side of the adaptive average-pool grid applied to the tap activations.
pub const EMBED_GRID: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    /// Set when the pooled features were all zero (vector left at zero).
    pub degenerate: bool,
}

/// Averages `plane` (`h×w`) over a `g×g` grid of possibly overlapping bins
/// `[⌊i·h/g⌋, ⌈(i+1)·h/g⌉)`.
fn adaptive_pool(plane: &[f64], h: usize, w: usize, g: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(g * g);
    for by in 0..g {
        let (y0, y1) = (by * h / g, ((by + 1) * h).div_ceil(g));
        for bx in 0..g {
            let (x0, x1) = (bx * w / g, ((bx + 1) * w).div_ceil(g));
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += plane[y * w + x];
                }
            }
            out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// Tap activations pooled to a `4×4` grid per channel, flattened and
/// L2-normalized.
pub fn embed(extractor: &FeatureExtractor, image: &Plane) -> Result<Embedding> {
    let t = ImageTensor::new(image.to_tensor(), ValueRange::Unit)?;
    let f = extractor.extract(&t)?;
    let (_, c, h, w) = f.dims4();
    let mut v = Vec::with_capacity(c * EMBED_GRID * EMBED_GRID);
    for ch in 0..c {
        v.extend(adaptive_pool(f.plane(0, ch), h, w, EMBED_GRID));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(Embedding {
            vector: v,
            degenerate: true,
        });
    }
    Ok(Embedding {
        vector: v.into_iter().map(|x| x / norm).collect(),
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub gallery_subject: u32,
    pub probe_subject: u32,
    pub similarity: f64,
}

impl Score {
    pub fn genuine(&self) -> bool {
        self.gallery_subject == self.probe_subject
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<Score>,
    /// Number of degenerate (all-zero) embeddings encountered.
    pub degenerate: usize,
}

impl ScoreSet {
    /// Builds a set from labelled similarities (`true` = genuine).
    pub fn from_labelled(items: &[(bool, f64)]) -> Self {
        ScoreSet {
            scores: items
                .iter()
                .map(|&(g, s)| Score {
                    gallery_subject: 0,
                    probe_subject: if g { 0 } else { 1 },
                    similarity: s,
                })
                .collect(),
            degenerate: 0,
        }
    }

    pub fn genuine_count(&self) -> usize {
        self.scores.iter().filter(|s| s.genuine()).count()
    }

    pub fn impostor_count(&self) -> usize {
        self.scores.len() - self.genuine_count()
    }
}

/// Cosine similarity of every gallery × probe pair.
pub fn score_all(
    gallery: &[(u32, Plane)],
    probe: &[(u32, Plane)],
    extractor: &FeatureExtractor,
) -> Result<ScoreSet> {
    if gallery.is_empty() || probe.is_empty() {
        return Err(Error::Evaluation("gallery and probe sets must be nonempty".into()));
    }
    let ge: Vec<(u32, Embedding)> = gallery
        .iter()
        .map(|(s, p)| Ok((*s, embed(extractor, p)?)))
        .collect::<Result<_>>()?;
    let pe: Vec<(u32, Embedding)> = probe
        .iter()
        .map(|(s, p)| Ok((*s, embed(extractor, p)?)))
        .collect::<Result<_>>()?;
    let degenerate = ge.iter().chain(&pe).filter(|(_, e)| e.degenerate).count();
    let mut scores = Vec::with_capacity(ge.len() * pe.len());
    for (gs, g) in &ge {
        for (ps, p) in &pe {
            let sim: f64 = g.vector.iter().zip(&p.vector).map(|(a, b)| a * b).sum();
            scores.push(Score {
                gallery_subject: *gs,
                probe_subject: *ps,
                similarity: sim,
            });
        }
    }
    Ok(ScoreSet { scores, degenerate })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(far, tar)` by decreasing threshold, from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
}

/// Sweeps the acceptance threshold (`similarity ≥ t`) from `+∞` down over
/// every distinct score.
pub fn roc(set: &ScoreSet) -> Result<RocCurve> {
    let n_gen = set.genuine_count();
    let n_imp = set.impostor_count();
    if n_gen == 0 || n_imp == 0 {
        return Err(Error::Evaluation(format!(
            "ROC needs genuine and impostor pairs, got {n_gen} genuine and {n_imp} impostor"
        )));
    }
    if let Some(s) = set.scores.iter().find(|s| !s.similarity.is_finite()) {
        return Err(Error::Evaluation(format!("non-finite similarity {}", s.similarity)));
    }
    let mut sorted: Vec<(f64, bool)> = set.scores.iter().map(|s| (s.similarity, s.genuine())).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_imp as f64, tp as f64 / n_gen as f64));
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// Rate at which `FAR = 1 − TAR`, interpolated linearly between the two
/// sweep points that bracket the crossing.
pub fn eer(curve: &RocCurve) -> f64 {
    let diff = |p: &(f64, f64)| p.0 - (1.0 - p.1);
    let pts = &curve.points;
    for i in 0..pts.len() {
        let d = diff(&pts[i]);
        if d >= 0.0 {
            if d == 0.0 || i == 0 {
                return pts[i].0;
            }
            let d0 = diff(&pts[i - 1]);
            let t = -d0 / (d - d0);
            return pts[i - 1].0 + t * (pts[i].0 - pts[i - 1].0);
        }
    }
    pts.last().map_or(0.5, |p| p.0)
}

impl RocCurve {
    /// Two-column `far,tar` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "far,tar").map_err(io)?;
        for (f, t) in &self.points {
            writeln!(w, "{f},{t}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Where probe images come from.
#[derive(Clone, Copy, Debug)]
pub enum ProbeSource<'a> {
    /// Synthesized by the generator.
    Generator(&'a GeneratorModel),
    /// The ground-truth target itself (upper bound / pipeline check).
    Oracle,
    /// The thermal S0 channel as fed to the network, without synthesis.
    Raw,
}

impl ProbeSource<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            ProbeSource::Generator(_) => "generator",
            ProbeSource::Oracle => "oracle",
            ProbeSource::Raw => "raw",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub protocol: Protocol,
    pub source: String,
    pub auc: f64,
    pub eer: f64,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
    pub degenerate_embeddings: usize,
    pub roc: RocCurve,
}

impl VerificationReport {
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "protocol": self.protocol.name(),
            "source": self.source,
            "auc": self.auc,
            "eer": self.eer,
            "genuine_pairs": self.genuine_pairs,
            "impostor_pairs": self.impostor_pairs,
            "degenerate_embeddings": self.degenerate_embeddings,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary_json()).expect("json value serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Gallery = protocol targets of `test`; probe = one image per test sample
/// from `source`. Every gallery image is scored against every probe.
pub fn evaluate_verification_with(
    source: ProbeSource<'_>,
    test: &[StokesImage],
    protocol: Protocol,
    extractor: &FeatureExtractor,
    dog: &DogParams,
) -> Result<VerificationReport> {
    let subjects = crate::dataio::DatasetSplit::subjects(test);
    if subjects.len() < 2 {
        return Err(Error::Evaluation(format!(
            "verification needs at least 2 test subjects, got {}",
            subjects.len()
        )));
    }
    let gallery: Vec<(u32, Plane)> = test
        .iter()
        .map(|s| Ok((s.subject_id, protocol_target(s, protocol, dog)?)))
        .collect::<Result<_>>()?;
    let probe_images: Vec<Plane> = match source {
        ProbeSource::Generator(g) => synthesize_with(g, test, protocol, dog)?,
        ProbeSource::Oracle => gallery.iter().map(|(_, p)| p.clone()).collect(),
        ProbeSource::Raw => test
            .iter()
            .map(|s| Ok(protocol_channels(s, protocol, dog)?.swap_remove(0)))
            .collect::<Result<_>>()?,
    };
    let probe: Vec<(u32, Plane)> = test.iter().map(|s| s.subject_id).zip(probe_images).collect();
    let scores = score_all(&gallery, &probe, extractor)?;
    let curve = roc(&scores)?;
    Ok(VerificationReport {
        protocol,
        source: source.label().into(),
        auc: auc(&curve),
        eer: eer(&curve),
        genuine_pairs: scores.genuine_count(),
        impostor_pairs: scores.impostor_count(),
        degenerate_embeddings: scores.degenerate,
        roc: curve,
    })
}

pub fn evaluate_verification(
    generator: &GeneratorModel,
    test: &[StokesImage],
    protocol: Protocol,
    extractor: &FeatureExtractor,
) -> Result<VerificationReport> {
    evaluate_verification_with(ProbeSource::Generator(generator), test, protocol, extractor, &DogParams::default())
}
