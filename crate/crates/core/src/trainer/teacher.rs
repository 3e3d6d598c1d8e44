//! The fixed server-side embedder used to populate shared knowledge bases.
//!
//! A bank of random zero-mean 3×3 filters is swept over the image, rectified
//! and average-pooled; the pooled responses are standardised, randomly
//! projected to `d` dimensions and L2-normalised. Pooling makes it
//! insensitive to where a pattern sits, the zero-mean filters and the
//! standardisation make it insensitive to brightness and contrast.

use rand_distr::{Distribution, Normal};

use super::data::Image;
use super::TrainError;
use crate::linalg::{normalize_in_place, Matrix};
use crate::rng;

const FILTERS: usize = 64;
const K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEncoder {
    shape: (usize, usize, usize),
    dim: usize,
    filters: Matrix,
    projection: Matrix,
    bias: Vec<f64>,
}

impl TeacherEncoder {
    pub fn new(shape: (usize, usize, usize), dim: usize, seed: u64) -> Result<Self, TrainError> {
        let (h, w, c) = shape;
        if h < K || w < K || c == 0 || dim == 0 {
            return Err(TrainError::Validation(format!("teacher needs images of at least {K}x{K} and d > 0")));
        }
        let normal = Normal::new(0.0, 1.0).expect("valid");
        let mut r = rng::stream(seed, &[0x7EAC]);
        let taps = K * K * c;
        let mut filters = Matrix::zeros(FILTERS, taps);
        for f in 0..FILTERS {
            let row = filters.row_mut(f);
            row.iter_mut().for_each(|v| *v = normal.sample(&mut r));
            let mean = row.iter().sum::<f64>() / taps as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        let scale = 1.0 / (FILTERS as f64).sqrt();
        let projection =
            Matrix::from_vec(dim, FILTERS, (0..dim * FILTERS).map(|_| normal.sample(&mut r) * scale).collect())
                .expect("shape");
        let bias = (0..dim).map(|_| normal.sample(&mut r) * 1e-3).collect();
        Ok(Self { shape, dim, filters, projection, bias })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, image: &Image) -> Result<Vec<f64>, TrainError> {
        if image.shape() != self.shape {
            return Err(TrainError::Validation(format!(
                "teacher expects {:?} images, got {:?}",
                self.shape,
                image.shape()
            )));
        }
        let (h, w, c) = self.shape;
        let positions = ((h - K + 1) * (w - K + 1)) as f64;
        let mut pooled = vec![0.0; FILTERS];
        let mut patch = vec![0.0; K * K * c];
        for y in 0..=h - K {
            for x in 0..=w - K {
                let mut p = 0;
                for dy in 0..K {
                    for dx in 0..K {
                        for ch in 0..c {
                            patch[p] = image.at(y + dy, x + dx, ch);
                            p += 1;
                        }
                    }
                }
                for (f, acc) in pooled.iter_mut().enumerate() {
                    let resp: f64 = self.filters.row(f).iter().zip(&patch).map(|(a, b)| a * b).sum();
                    *acc += resp.max(0.0);
                }
            }
        }
        pooled.iter_mut().for_each(|v| *v /= positions);
        let mean = pooled.iter().sum::<f64>() / FILTERS as f64;
        let std = (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / FILTERS as f64).sqrt();
        pooled.iter_mut().for_each(|v| *v = (*v - mean) / (std + 1e-6));
        let mut out: Vec<f64> = (0..self.dim)
            .map(|i| self.bias[i] + self.projection.row(i).iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        normalize_in_place(&mut out);
        Ok(out)
    }

    pub fn encode_all(&self, images: &[Image]) -> Result<Matrix, TrainError> {
        let rows = images.iter().map(|im| self.encode(im)).collect::<Result<Vec<_>, _>>()?;
        Ok(Matrix::from_rows(&rows).unwrap_or_else(|| Matrix::zeros(0, self.dim)))
    }
}

/// One-shot form: builds the teacher for `teacher_seed` and embeds `image`.
pub fn teacher_encode(image: &Image, dim: usize, teacher_seed: u64) -> Result<Vec<f64>, TrainError> {
    TeacherEncoder::new(image.shape(), dim, teacher_seed)?.encode(image)
}
