//! Synthetic labelled image sets and the `CRDS` cache format.
//!
//! Each class is an oriented sinusoidal grating. Samples draw a random
//! phase, contrast, brightness, per-channel tint and pixel noise, so the
//! class is carried by orientation and frequency alone.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::binio::Reader;
use crate::linalg::Matrix;
use crate::rng;

/// H×W×C image, values in `[0, 1]`, stored row-major with channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, TrainError> {
        if data.len() != height * width * channels {
            return Err(TrainError::Validation(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Stacks flattened images into an N×(H·W·C) matrix.
pub fn flatten(images: &[Image]) -> Matrix {
    let cols = images.first().map_or(0, Image::len);
    let mut data = Vec::with_capacity(images.len() * cols);
    for im in images {
        data.extend_from_slice(&im.data);
    }
    Matrix::from_vec(images.len(), cols, data).expect("uniform image shapes")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of per-pixel gaussian noise.
    pub pixel_noise: f64,
    /// Seeds the class patterns. Datasets that should share classes share it.
    pub pattern_seed: u64,
    /// Seeds the individual samples.
    pub sample_seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self { classes: 3, per_class: 100, height: 8, width: 8, channels: 3, pixel_noise: 0.3, pattern_seed: 0xC1A55, sample_seed: 1 }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.classes < 2 {
            return Err(TrainError::Validation("need at least two classes".into()));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(TrainError::Validation("image dimensions must be positive".into()));
        }
        if !(self.pixel_noise >= 0.0) || !self.pixel_noise.is_finite() {
            return Err(TrainError::Validation("pixel noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn with_samples(mut self, sample_seed: u64, per_class: usize) -> Self {
        self.sample_seed = sample_seed;
        self.per_class = per_class;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ClassPattern {
    angle: f64,
    frequency: f64,
}

fn class_patterns(spec: &SyntheticDatasetSpec) -> Vec<ClassPattern> {
    (0..spec.classes)
        .map(|c| {
            let mut r = rng::stream(spec.pattern_seed, &[c as u64]);
            let slot = PI * c as f64 / spec.classes as f64;
            ClassPattern {
                angle: slot + r.random_range(-0.1..0.1) * PI / spec.classes as f64,
                frequency: r.random_range(0.16..0.24),
            }
        })
        .collect()
}

/// Labelled images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub images: Vec<Image>,
    pub labels: Vec<i32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// Generates `classes × per_class` samples, interleaved by class.
    pub fn synthetic(spec: &SyntheticDatasetSpec) -> Result<Self, TrainError> {
        spec.validate()?;
        let patterns = class_patterns(spec);
        let noise = Normal::new(0.0, spec.pixel_noise).expect("validated");
        let mut images = Vec::with_capacity(spec.classes * spec.per_class);
        let mut labels = Vec::with_capacity(images.capacity());
        for s in 0..spec.per_class {
            for (c, pat) in patterns.iter().enumerate() {
                let mut r = rng::stream(spec.sample_seed, &[spec.pattern_seed, c as u64, s as u64]);
                let phase = r.random_range(0.0..2.0 * PI);
                let contrast = r.random_range(0.2..0.4);
                let level = r.random_range(0.35..0.65);
                let angle = pat.angle + r.random_range(-0.08..0.08);
                let gains: Vec<f64> = (0..spec.channels).map(|_| r.random_range(0.6..1.4)).collect();
                let (cos, sin) = (angle.cos(), angle.sin());
                let mut im = Image::zeros(spec.height, spec.width, spec.channels);
                for y in 0..spec.height {
                    for x in 0..spec.width {
                        let t = 2.0 * PI * pat.frequency * (x as f64 * cos + y as f64 * sin) + phase;
                        let wave = contrast * t.sin();
                        for (ch, g) in gains.iter().enumerate() {
                            *im.at_mut(y, x, ch) = (level + g * wave + noise.sample(&mut r)).clamp(0.0, 1.0);
                        }
                    }
                }
                images.push(im);
                labels.push(c as i32);
            }
        }
        Ok(Self { classes: spec.classes, images, labels })
    }

    /// Rows in `range`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            classes: self.classes,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"CRDS";
pub const DATASET_VERSION: u8 = 1;

/// `"CRDS" | version u8 | C u32 | N u64 | H u16 | W u16 | Ch u16 | N × (label i32 + H·W·Ch f32)`.
pub fn dataset_to_bytes(ds: &Dataset) -> Vec<u8> {
    let (h, w, c) = ds.shape().unwrap_or((0, 0, 0));
    let mut out = Vec::with_capacity(25 + ds.len() * (4 + h * w * c * 4));
    out.extend_from_slice(DATASET_MAGIC);
    out.push(DATASET_VERSION);
    out.extend_from_slice(&(ds.classes as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for dim in [h, w, c] {
        out.extend_from_slice(&(dim as u16).to_le_bytes());
    }
    for (im, label) in ds.images.iter().zip(&ds.labels) {
        out.extend_from_slice(&label.to_le_bytes());
        for &v in &im.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, TrainError> {
    let fmt = |m: String| TrainError::Format(m);
    let mut r = Reader::new(bytes);
    let trunc = |_| fmt("dataset file truncated".into());
    if r.take(4).map_err(trunc)? != DATASET_MAGIC {
        return Err(fmt("bad dataset magic".into()));
    }
    let version = r.u8().map_err(trunc)?;
    if version != DATASET_VERSION {
        return Err(fmt(format!("unsupported dataset version {version}")));
    }
    let classes = r.u32().map_err(trunc)? as usize;
    let n = r.u64().map_err(trunc)?;
    let (h, w, c) = (
        usize::from(r.u16().map_err(trunc)?),
        usize::from(r.u16().map_err(trunc)?),
        usize::from(r.u16().map_err(trunc)?),
    );
    let pixels = h * w * c;
    r.ensure(n, 4 + pixels * 4).map_err(trunc)?;
    let mut images = Vec::with_capacity(n as usize);
    let mut labels = Vec::with_capacity(n as usize);
    for _ in 0..n {
        labels.push(r.i32().map_err(trunc)?);
        let data = (0..pixels).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>, _>>().map_err(trunc)?;
        images.push(Image { height: h, width: w, channels: c, data });
    }
    if r.remaining() != 0 {
        return Err(fmt("trailing bytes after dataset".into()));
    }
    Ok(Dataset { classes, images, labels })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<u64, TrainError> {
    let b = dataset_to_bytes(ds);
    fs::write(path, &b)?;
    Ok(b.len() as u64)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, TrainError> {
    dataset_from_bytes(&fs::read(path)?)
}
