//! Paired polarimetric/visible data: loading, preprocessing, protocol
//! inputs, a seeded synthetic face generator and batching.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{ImageTensor, Tensor, ValueRange};

/// A single-channel `h×w` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(h * w, data.len());
        Plane { h, w, data }
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Plane { h, w, data: vec![v; h * w] }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.h, self.w], self.data.clone())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// One co-registered record: three Stokes channels and the visible target.
#[derive(Clone, Debug, PartialEq)]
pub struct StokesImage {
    pub s0: Plane,
    pub s1: Plane,
    pub s2: Plane,
    pub visible: Plane,
    pub subject_id: u32,
    pub sample_id: String,
}

impl StokesImage {
    pub fn dims(&self) -> (usize, usize) {
        self.s0.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.s0.dims();
        if [&self.s1, &self.s2, &self.visible].iter().any(|p| p.dims() != d) {
            return Err(Error::Shape(format!(
                "sample {}: channel dimensions differ ({:?}, {:?}, {:?}, {:?})",
                self.sample_id,
                d,
                self.s1.dims(),
                self.s2.dims(),
                self.visible.dims()
            )));
        }
        if [&self.s0, &self.s1, &self.s2, &self.visible].iter().any(|p| !p.in_unit_range()) {
            return Err(Error::Domain(format!("sample {}: values outside [0, 1]", self.sample_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    S0Vis,
    PolarVis,
    S0VisDog,
    PolarVisDog,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::S0Vis, Protocol::PolarVis, Protocol::S0VisDog, Protocol::PolarVisDog];

    pub fn input_channels(self) -> usize {
        match self {
            Protocol::S0Vis | Protocol::S0VisDog => 1,
            Protocol::PolarVis | Protocol::PolarVisDog => 3,
        }
    }

    pub fn uses_dog(self) -> bool {
        matches!(self, Protocol::S0VisDog | Protocol::PolarVisDog)
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::S0Vis => "S0_VIS",
            Protocol::PolarVis => "POLAR_VIS",
            Protocol::S0VisDog => "S0_VIS_DOG",
            Protocol::PolarVisDog => "POLAR_VIS_DOG",
        }
    }

    /// Row label in result tables.
    pub fn table_label(self) -> &'static str {
        match self {
            Protocol::S0Vis => "S0-Vis",
            Protocol::PolarVis => "Polar-Vis",
            Protocol::S0VisDog => "S0-Vis (DoG)",
            Protocol::PolarVisDog => "Polar-Vis (DoG)",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == norm)
            .ok_or_else(|| Error::config("protocol", format!("unknown protocol `{s}`")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<StokesImage>,
    pub test: Vec<StokesImage>,
}

impl DatasetSplit {
    pub fn subjects(records: &[StokesImage]) -> std::collections::BTreeSet<u32> {
        records.iter().map(|r| r.subject_id).collect()
    }

    pub fn is_subject_disjoint(&self) -> bool {
        Self::subjects(&self.train).is_disjoint(&Self::subjects(&self.test))
    }
}

// ---------------------------------------------------------------------------
// PNG and manifest I/O

/// Decodes a PNG to `[0, 1]`: 8-bit samples are divided by 255, 16-bit by
/// 65535. Colour images are converted to luma at their native depth.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<Plane, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        other => other.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };
    Ok(Plane::new(h, w, data))
}

pub fn load_png(path: &Path) -> Result<Plane> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes).map_err(|message| Error::Image {
        path: path.to_path_buf(),
        message,
    })
}

/// 16-bit grayscale PNG bytes, values rounded from `[0, 1]`.
pub fn encode_png16(plane: &Plane) -> Vec<u8> {
    let raw: Vec<u16> = plane
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(plane.w as u32, plane.h as u32, raw).unwrap();
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageLuma16(buf).write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encode");
    out.into_inner()
}

/// 8-bit grayscale PNG bytes with `round(255·v)` quantization.
pub fn encode_png8(plane: &Plane) -> Vec<u8> {
    let raw: Vec<u8> = plane
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(plane.w as u32, plane.h as u32, raw).unwrap();
    let mut out = std::io::Cursor::new(Vec::new());
    DynamicImage::ImageLuma8(buf).write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encode");
    out.into_inner()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: String,
    pub subject_id: u32,
    pub s0_path: String,
    pub s1_path: String,
    pub s2_path: String,
    pub visible_path: String,
}

pub const MANIFEST_COLUMNS: [&str; 6] = ["sample_id", "subject_id", "s0_path", "s1_path", "s2_path", "visible_path"];

/// Parses a manifest CSV (header row required).
pub fn parse_manifest<R: Read>(reader: R) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Manifest(e.to_string()))?.clone();
    for col in MANIFEST_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Manifest(format!("missing column `{col}`")));
        }
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Manifest(format!("row {}: {e}", i + 1))))
        .collect()
}

pub fn write_manifest<W: Write>(writer: W, rows: &[ManifestRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        wtr.write_record(MANIFEST_COLUMNS).map_err(|e| Error::Manifest(e.to_string()))?;
    }
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Manifest(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::Manifest(e.to_string()))
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads every record listed in `manifest`, resolving relative image paths
/// against `root`.
pub fn load_dataset(root: &Path, manifest: &Path) -> Result<Vec<StokesImage>> {
    let file = std::fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let rows = parse_manifest(file)?;
    rows.into_iter()
        .map(|row| {
            let rec = StokesImage {
                s0: load_png(&resolve(root, &row.s0_path))?,
                s1: load_png(&resolve(root, &row.s1_path))?,
                s2: load_png(&resolve(root, &row.s2_path))?,
                visible: load_png(&resolve(root, &row.visible_path))?,
                subject_id: row.subject_id,
                sample_id: row.sample_id,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

/// Writes `records` as 16-bit PNG quadruples under `dir/images/` and
/// returns their manifest rows (paths relative to `dir`).
pub fn write_records(dir: &Path, records: &[StokesImage]) -> Result<Vec<ManifestRow>> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let mut paths = Vec::with_capacity(4);
        for (tag, plane) in [("s0", &r.s0), ("s1", &r.s1), ("s2", &r.s2), ("vis", &r.visible)] {
            let rel = format!("images/{}_{tag}.png", r.sample_id);
            write_file(&dir.join(&rel), &encode_png16(plane))?;
            paths.push(rel);
        }
        let mut it = paths.into_iter();
        rows.push(ManifestRow {
            sample_id: r.sample_id.clone(),
            subject_id: r.subject_id,
            s0_path: it.next().unwrap(),
            s1_path: it.next().unwrap(),
            s2_path: it.next().unwrap(),
            visible_path: it.next().unwrap(),
        });
    }
    Ok(rows)
}

fn write_manifest_file(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest(f, rows)
}

/// Exports a split as `images/*.png` plus `manifest.csv` (all records),
/// `train.csv` and `test.csv`.
pub fn write_dataset(dir: &Path, split: &DatasetSplit) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = write_records(dir, &split.train)?;
    let test = write_records(dir, &split.test)?;
    let all: Vec<ManifestRow> = train.iter().chain(&test).cloned().collect();
    write_manifest_file(&dir.join("manifest.csv"), &all)?;
    write_manifest_file(&dir.join("train.csv"), &train)?;
    write_manifest_file(&dir.join("test.csv"), &test)
}

/// Reads `train.csv` and `test.csv` written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: load_dataset(dir, &dir.join("train.csv"))?,
        test: load_dataset(dir, &dir.join("test.csv"))?,
    })
}

// ---------------------------------------------------------------------------
// Filtering

/// Reflect-101 border index (`d c b | a b c d | c b a`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized sampled 1-D Gaussian with radius `ceil(5σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    gaussian_kernel_sized(sigma, (5.0 * sigma).ceil() as usize)
}

/// Normalized sampled 1-D Gaussian of length `2·radius + 1`.
pub fn gaussian_kernel_sized(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * p.data[y * p.w + reflect_index(x as isize + j as isize - r, p.w)])
                .sum();
        }
    }
    let mut out = vec![0.0; p.h * p.w];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect_index(y as isize + j as isize - r, p.h) * p.w + x])
                .sum();
        }
    }
    Plane::new(p.h, p.w, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DogParams {
    pub sigma_narrow: f64,
    pub sigma_wide: f64,
}

impl Default for DogParams {
    fn default() -> Self {
        DogParams {
            sigma_narrow: 1.0,
            sigma_wide: 2.0,
        }
    }
}

impl DogParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_narrow > 0.0 && self.sigma_narrow < self.sigma_wide && self.sigma_wide.is_finite()) {
            return Err(Error::Parameter(format!(
                "DoG needs 0 < sigma_narrow < sigma_wide, got ({}, {})",
                self.sigma_narrow, self.sigma_wide
            )));
        }
        Ok(())
    }
}

/// Band-pass response `G(σ_narrow)∗x − G(σ_wide)∗x` before any rescaling.
pub fn dog_response(image: &Plane, sigma_narrow: f64, sigma_wide: f64) -> Result<Plane> {
    DogParams { sigma_narrow, sigma_wide }.validate()?;
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("DoG input must be finite".into()));
    }
    let a = gaussian_blur(image, sigma_narrow);
    let b = gaussian_blur(image, sigma_wide);
    Ok(Plane::new(image.h, image.w, a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect()))
}

/// Per-image min-max rescale to `[0, 1]`; constant images map to 0.5.
pub fn minmax_rescale(p: &Plane) -> Plane {
    let lo = p.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = p.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Plane::filled(p.h, p.w, 0.5);
    }
    p.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
}

/// DoG response rescaled to `[0, 1]`.
pub fn dog_filter(image: &Plane, sigma_narrow: f64, sigma_wide: f64) -> Result<Plane> {
    Ok(minmax_rescale(&dog_response(image, sigma_narrow, sigma_wide)?))
}

// ---------------------------------------------------------------------------
// Resizing and protocol inputs

pub fn resize_plane(p: &Plane, h: usize, w: usize) -> Plane {
    let t = kernels::resample_bilinear(&p.to_tensor(), h, w);
    Plane::new(h, w, t.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Bilinear resize of all four channels to `side×side`.
pub fn resize_sample(sample: &StokesImage, side: usize) -> Result<StokesImage> {
    if side < 8 {
        return Err(Error::Parameter(format!("resize side must be >= 8, got {side}")));
    }
    let r = |p: &Plane| resize_plane(p, side, side);
    Ok(StokesImage {
        s0: r(&sample.s0),
        s1: r(&sample.s1),
        s2: r(&sample.s2),
        visible: r(&sample.visible),
        subject_id: sample.subject_id,
        sample_id: sample.sample_id.clone(),
    })
}

/// Target image in `[0, 1]` for a protocol (DoG-filtered for `*_DOG`).
pub fn protocol_target(sample: &StokesImage, protocol: Protocol, dog: &DogParams) -> Result<Plane> {
    if protocol.uses_dog() {
        dog_filter(&sample.visible, dog.sigma_narrow, dog.sigma_wide)
    } else {
        Ok(sample.visible.clone())
    }
}

/// Input channels in `[0, 1]` for a protocol.
pub fn protocol_channels(sample: &StokesImage, protocol: Protocol, dog: &DogParams) -> Result<Vec<Plane>> {
    let raw: Vec<&Plane> = match protocol.input_channels() {
        1 => vec![&sample.s0],
        _ => vec![&sample.s0, &sample.s1, &sample.s2],
    };
    raw.into_iter()
        .map(|p| {
            if protocol.uses_dog() {
                dog_filter(p, dog.sigma_narrow, dog.sigma_wide)
            } else {
                Ok(p.clone())
            }
        })
        .collect()
}

fn planes_to_tensor(planes: &[Plane]) -> Tensor {
    let (h, w) = planes[0].dims();
    let data = planes.iter().flat_map(|p| p.data.iter().copied()).collect();
    Tensor::new(vec![1, planes.len(), h, w], data)
}

pub fn make_protocol_input_with(
    sample: &StokesImage,
    protocol: Protocol,
    dog: &DogParams,
) -> Result<(ImageTensor, ImageTensor)> {
    sample.validate()?;
    let input = planes_to_tensor(&protocol_channels(sample, protocol, dog)?);
    let target = planes_to_tensor(&[protocol_target(sample, protocol, dog)?]);
    Ok((
        ImageTensor::new(input, ValueRange::Unit)?.to_signed(),
        ImageTensor::new(target, ValueRange::Unit)?.to_signed(),
    ))
}

/// `(input, target)` in the `[-1, 1]` network convention.
pub fn make_protocol_input(sample: &StokesImage, protocol: Protocol) -> Result<(ImageTensor, ImageTensor)> {
    make_protocol_input_with(sample, protocol, &DogParams::default())
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Geometry of one synthetic subject in normalized coordinates `[-1, 1]²`.
#[derive(Clone, Debug)]
struct FaceGeometry {
    background: f64,
    skin: f64,
    head: (f64, f64, f64, f64),
    eye_y: f64,
    eye_dx: f64,
    eye_r: (f64, f64),
    eye_tone: f64,
    brow_tone: f64,
    nose: (f64, f64, f64),
    nose_tone: f64,
    mouth: (f64, f64, f64),
    mouth_tone: f64,
}

impl FaceGeometry {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        FaceGeometry {
            background: rng.random_range(0.08..0.22),
            skin: rng.random_range(0.55..0.8),
            head: (
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(0.55..0.72),
                rng.random_range(0.72..0.88),
            ),
            eye_y: rng.random_range(-0.3..-0.12),
            eye_dx: rng.random_range(0.2..0.34),
            eye_r: (rng.random_range(0.07..0.12), rng.random_range(0.04..0.07)),
            eye_tone: rng.random_range(0.05..0.25),
            brow_tone: rng.random_range(0.2..0.4),
            nose: (rng.random_range(0.0..0.12), rng.random_range(0.04..0.08), rng.random_range(0.12..0.22)),
            nose_tone: rng.random_range(0.35..0.55),
            mouth: (rng.random_range(0.3..0.46), rng.random_range(0.14..0.28), rng.random_range(0.03..0.06)),
            mouth_tone: rng.random_range(0.2..0.4),
        }
    }
}

/// Anti-aliased ellipse coverage in `[0, 1]`.
fn ellipse_cover(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64, px: f64) -> f64 {
    let d = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt() - 1.0;
    (0.5 - d * rx.min(ry) / px).clamp(0.0, 1.0)
}

fn render_face(g: &FaceGeometry, side: usize, shift: (f64, f64), brightness: f64, mouth_scale: f64) -> Plane {
    let px = 2.0 / side as f64;
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5) * px - 1.0 - shift.0;
            let v = (y as f64 + 0.5) * px - 1.0 - shift.1;
            let (hx, hy, hrx, hry) = g.head;
            let mut val = g.background;
            let shade = 1.0 - 0.25 * (((u - hx) / hrx).powi(2) + ((v - hy) / hry).powi(2));
            let head = ellipse_cover(u, v, hx, hy, hrx, hry, px);
            val += (g.skin * shade - val) * head;
            for side_sign in [-1.0, 1.0] {
                let ex = hx + side_sign * g.eye_dx;
                let eye = ellipse_cover(u, v, ex, hy + g.eye_y, g.eye_r.0, g.eye_r.1, px);
                val += (g.eye_tone - val) * eye;
                let brow = ellipse_cover(u, v, ex, hy + g.eye_y - 2.2 * g.eye_r.1, g.eye_r.0 * 1.2, 0.025, px);
                val += (g.brow_tone - val) * brow;
            }
            let nose = ellipse_cover(u, v, hx, hy + g.nose.0, g.nose.1, g.nose.2, px);
            val += (g.skin * g.nose_tone / 0.45 * shade * 0.8 - val) * nose * 0.7;
            let mouth = ellipse_cover(u, v, hx, hy + g.mouth.0, g.mouth.1, g.mouth.2 * mouth_scale, px);
            val += (g.mouth_tone - val) * mouth;
            data.push((val + brightness).clamp(0.0, 1.0));
        }
    }
    Plane::new(side, side, data)
}

/// Monotone smooth tone map standing in for the thermal response.
fn thermal_tone(v: f64) -> f64 {
    0.1 + 0.8 * (1.0 - (-3.0 * v).exp()) / (1.0 - (-3.0f64).exp())
}

/// `|I(x+d) − I(x−d)| / 2` along direction `(dy, dx)` with reflective borders.
fn gradient_magnitude(p: &Plane, dy: isize, dx: isize) -> Plane {
    let norm = ((dy * dy + dx * dx) as f64).sqrt();
    let mut out = Vec::with_capacity(p.h * p.w);
    for y in 0..p.h as isize {
        for x in 0..p.w as isize {
            let a = p.at(reflect_index(y + dy, p.h), reflect_index(x + dx, p.w));
            let b = p.at(reflect_index(y - dy, p.h), reflect_index(x - dx, p.w));
            out.push((a - b).abs() / (2.0 * norm));
        }
    }
    Plane::new(p.h, p.w, out)
}

const POLAR_GAIN: f64 = 4.0;
const POLAR_NOISE: f64 = 0.02;

fn pseudo_polar<R: Rng>(visible: &Plane, dy: isize, dx: isize, rng: &mut R) -> Plane {
    let g = gaussian_blur(&gradient_magnitude(visible, dy, dx), 1.0);
    g.map(|v| (POLAR_GAIN * v + rng.random_range(-POLAR_NOISE..=POLAR_NOISE)).clamp(0.0, 1.0))
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders a seeded set of pseudo-face subjects and splits subjects 50/50
/// (train gets the extra subject when the count is odd).
pub fn generate_synthetic_dataset(
    seed: u64,
    n_subjects: usize,
    samples_per_subject: usize,
    side: usize,
) -> Result<DatasetSplit> {
    if n_subjects < 2 {
        return Err(Error::Parameter(format!("need at least 2 subjects, got {n_subjects}")));
    }
    if samples_per_subject < 1 {
        return Err(Error::Parameter("need at least 1 sample per subject".into()));
    }
    if side < 8 {
        return Err(Error::Parameter(format!("side must be >= 8, got {side}")));
    }
    let subjects: Vec<u32> = permutation(n_subjects, seed, u64::MAX).into_iter().map(|s| s as u32).collect();
    let n_train = n_subjects.div_ceil(2);
    let mut train_ids: Vec<u32> = subjects[..n_train].to_vec();
    let mut test_ids: Vec<u32> = subjects[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    let render = |subject: u32| -> Vec<StokesImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, subject as u64 + 1));
        let geom = FaceGeometry::sample(&mut rng);
        (0..samples_per_subject)
            .map(|k| {
                let shift = (rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
                let brightness = rng.random_range(-0.03..0.03);
                let mouth_scale = rng.random_range(0.8..1.25);
                let visible = render_face(&geom, side, shift, brightness, mouth_scale);
                let s0 = gaussian_blur(&visible.map(thermal_tone), 2.0).map(|v| v.clamp(0.0, 1.0));
                let s1 = pseudo_polar(&visible, 0, 1, &mut rng);
                let s2 = pseudo_polar(&visible, 1, 1, &mut rng);
                StokesImage {
                    s0,
                    s1,
                    s2,
                    visible,
                    subject_id: subject,
                    sample_id: format!("subj{subject:03}_{k:02}"),
                }
            })
            .collect()
    };
    Ok(DatasetSplit {
        train: train_ids.iter().flat_map(|&s| render(s)).collect(),
        test: test_ids.iter().flat_map(|&s| render(s)).collect(),
    })
}

// ---------------------------------------------------------------------------
// Batching

/// Seeded permutation of `0..n` for a given epoch.
pub fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Protocol inputs/targets precomputed once per record (`[C, H, W]`, `[-1, 1]`).
#[derive(Clone, Debug)]
pub struct PreparedSet {
    pub protocol: Protocol,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub subjects: Vec<u32>,
}

impl PreparedSet {
    pub fn new(data: &[StokesImage], protocol: Protocol, dog: &DogParams) -> Result<Self> {
        let mut inputs = Vec::with_capacity(data.len());
        let mut targets = Vec::with_capacity(data.len());
        for s in data {
            let (i, t) = make_protocol_input_with(s, protocol, dog)?;
            let (_, c, h, w) = i.dims();
            inputs.push(i.into_tensor().reshape(vec![c, h, w]));
            targets.push(t.into_tensor().reshape(vec![1, h, w]));
        }
        Ok(PreparedSet {
            protocol,
            inputs,
            targets,
            subjects: data.iter().map(|s| s.subject_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Record indices of batch `step` (0-based, counted across epochs).
    pub fn batch_indices(&self, batch_size: usize, seed: u64, shuffle: bool, step: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch(batch_size) as u64;
        let epoch = step / per_epoch;
        let j = (step % per_epoch) as usize;
        let order: Vec<usize> = if shuffle {
            permutation(self.len(), seed, epoch)
        } else {
            (0..self.len()).collect()
        };
        order[j * batch_size..((j + 1) * batch_size).min(self.len())].to_vec()
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(ImageTensor, ImageTensor)> {
        let inputs: Vec<&Tensor> = indices.iter().map(|&i| &self.inputs[i]).collect();
        let targets: Vec<&Tensor> = indices.iter().map(|&i| &self.targets[i]).collect();
        Ok((
            ImageTensor::new(Tensor::stack(&inputs), ValueRange::Signed)?,
            ImageTensor::new(Tensor::stack(&targets), ValueRange::Signed)?,
        ))
    }
}

/// One epoch of `(input, target)` batches.
pub struct BatchIter<'a> {
    set: PreparedSet,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _data: std::marker::PhantomData<&'a StokesImage>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<(ImageTensor, ImageTensor)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(self.set.gather(idx))
    }
}

/// Batches of epoch `epoch`; with `shuffle` the order is a pure function of
/// `(seed, epoch)`, otherwise it is manifest order.
pub fn batch_iterator<'a>(
    data: &'a [StokesImage],
    protocol: Protocol,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
) -> Result<BatchIter<'a>> {
    if batch_size < 1 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let set = PreparedSet::new(data, protocol, &DogParams::default())?;
    let order = if shuffle {
        permutation(set.len(), seed, epoch)
    } else {
        (0..set.len()).collect()
    };
    Ok(BatchIter {
        set,
        order,
        batch_size,
        pos: 0,
        _data: std::marker::PhantomData,
    })
}
