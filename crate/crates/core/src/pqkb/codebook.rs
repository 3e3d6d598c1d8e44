use serde::{Deserialize, Serialize};

use super::kmeans::kmeans_fit;
use super::PqError;
use crate::linalg::{argmin, normalize_in_place, Matrix};
use crate::rng::derive_seed;

/// Distance used by a store. `Cosine` is squared L2 over unit-normalized vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Metric {
    #[default]
    L2,
    Cosine,
}

impl Metric {
    pub fn tag(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Metric::L2),
            1 => Some(Metric::Cosine),
            _ => None,
        }
    }

    /// Applies the metric's preprocessing to a vector.
    pub fn prepare(self, v: &mut [f64]) {
        if self == Metric::Cosine {
            normalize_in_place(v);
        }
    }
}

/// Shape of a product quantizer: `d` split into `m` subspaces of width
/// `d / m`, each with `k_star` centroids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqLayout {
    pub d: usize,
    pub m: usize,
    pub k_star: usize,
}

impl PqLayout {
    pub fn validate(&self) -> Result<(), PqError> {
        if self.d == 0 || self.m == 0 {
            return Err(PqError::Config(format!("d={} and m={} must be positive", self.d, self.m)));
        }
        if self.d % self.m != 0 {
            return Err(PqError::Config(format!("d={} is not divisible by m={}", self.d, self.m)));
        }
        if !(2..=65536).contains(&self.k_star) {
            return Err(PqError::Config(format!("k*={} outside [2, 65536]", self.k_star)));
        }
        Ok(())
    }

    /// Subvector width `d* = d / m`.
    pub fn sub_dim(&self) -> usize {
        self.d / self.m
    }

    /// Scalars held by the codebook: `m · d* · k*`.
    pub fn storage_scalars(&self) -> usize {
        self.m * self.sub_dim() * self.k_star
    }

    /// Number of distinct codes, `(k*)^m`; `None` if it overflows `u128`.
    pub fn code_space(&self) -> Option<u128> {
        (self.k_star as u128).checked_pow(self.m as u32)
    }

    /// Bytes per stored index: 1 when `k* ≤ 256`, else 2.
    pub fn index_width(&self) -> usize {
        if self.k_star <= 256 {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PQConfig {
    pub layout: PqLayout,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub metric: Metric,
}

impl PQConfig {
    /// Desk-scale defaults: `k* = 16`, 25 Lloyd iterations, L2.
    pub fn new(d: usize, m: usize) -> Self {
        Self { layout: PqLayout { d, m, k_star: 16 }, kmeans_iters: 25, seed: 0, metric: Metric::L2 }
    }

    pub fn with_k_star(mut self, k_star: usize) -> Self {
        self.layout.k_star = k_star;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.kmeans_iters = iters;
        self
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }
}

/// A PQ code: one centroid index per subspace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PQCode(pub Vec<u16>);

impl PQCode {
    pub fn indices(&self) -> &[u16] {
        &self.0
    }
}

/// Trained sub-codebooks. Centroids are held in `f32`, the precision they
/// are persisted in, laid out `[subspace][centroid][component]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PQCodebook {
    layout: PqLayout,
    metric: Metric,
    centroids: Vec<f32>,
}

impl PQCodebook {
    /// Builds a codebook from explicit per-subspace centroid tables.
    pub fn from_centroids(layout: PqLayout, metric: Metric, tables: &[Matrix]) -> Result<Self, PqError> {
        layout.validate()?;
        if tables.len() != layout.m {
            return Err(PqError::Validation(format!("expected {} sub-codebooks, got {}", layout.m, tables.len())));
        }
        let mut centroids = Vec::with_capacity(layout.storage_scalars());
        for t in tables {
            if t.rows() != layout.k_star || t.cols() != layout.sub_dim() {
                return Err(PqError::Validation(format!(
                    "sub-codebook is {}x{}, expected {}x{}",
                    t.rows(),
                    t.cols(),
                    layout.k_star,
                    layout.sub_dim()
                )));
            }
            centroids.extend(t.as_slice().iter().map(|&v| v as f32));
        }
        Self::from_raw(layout, metric, centroids)
    }

    pub(crate) fn from_raw(layout: PqLayout, metric: Metric, centroids: Vec<f32>) -> Result<Self, PqError> {
        layout.validate()?;
        if centroids.len() != layout.storage_scalars() {
            return Err(PqError::Validation("centroid buffer has the wrong length".into()));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(PqError::Validation("non-finite centroid".into()));
        }
        Ok(Self { layout, metric, centroids })
    }

    pub fn layout(&self) -> PqLayout {
        self.layout
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn raw_centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Centroid `c` of subspace `j`.
    #[inline]
    pub fn centroid(&self, j: usize, c: usize) -> &[f32] {
        let w = self.layout.sub_dim();
        let start = (j * self.layout.k_star + c) * w;
        &self.centroids[start..start + w]
    }

    /// Squared distances from each query subvector to every centroid, `m × k*`.
    pub fn distance_table(&self, query: &[f64]) -> Vec<f64> {
        let PqLayout { m, k_star, .. } = self.layout;
        let w = self.layout.sub_dim();
        let mut table = Vec::with_capacity(m * k_star);
        for j in 0..m {
            let sub = &query[j * w..(j + 1) * w];
            for c in 0..k_star {
                table.push(sub_distance(sub, self.centroid(j, c)));
            }
        }
        table
    }
}

#[inline]
pub(crate) fn sub_distance(sub: &[f64], centroid: &[f32]) -> f64 {
    sub.iter().zip(centroid).map(|(a, &b)| (a - f64::from(b)) * (a - f64::from(b))).sum()
}

/// Trains one k-means quantizer per subspace on the corresponding column slice.
///
/// Subspace `j` is seeded with `derive_seed(seed, [j])` for `j > 0` and with
/// `seed` itself for `j = 0`, so `m = 1` reproduces plain k-means.
pub fn pq_train(vectors: &Matrix, config: &PQConfig) -> Result<PQCodebook, PqError> {
    let layout = config.layout;
    layout.validate()?;
    if vectors.rows() == 0 {
        return Err(PqError::Validation("cannot train on an empty set".into()));
    }
    if vectors.cols() != layout.d {
        return Err(PqError::Config(format!("vectors have dimension {}, config says {}", vectors.cols(), layout.d)));
    }
    let prepared;
    let source = if config.metric == Metric::Cosine {
        let mut v = vectors.clone();
        for r in 0..v.rows() {
            normalize_in_place(v.row_mut(r));
        }
        prepared = v;
        &prepared
    } else {
        vectors
    };
    let w = layout.sub_dim();
    let mut tables = Vec::with_capacity(layout.m);
    for j in 0..layout.m {
        let slice = source.column_slice(j * w, (j + 1) * w);
        let seed = if j == 0 { config.seed } else { derive_seed(config.seed, &[j as u64]) };
        tables.push(kmeans_fit(&slice, layout.k_star, config.kmeans_iters, seed)?.centroids);
    }
    PQCodebook::from_centroids(layout, config.metric, &tables)
}

/// Nearest centroid per subspace; ties go to the lowest index. The metric's
/// preprocessing is applied first.
pub fn pq_encode(v: &[f64], cb: &PQCodebook) -> Result<PQCode, PqError> {
    let layout = cb.layout();
    if v.len() != layout.d {
        return Err(PqError::Validation(format!("vector has length {}, codebook expects {}", v.len(), layout.d)));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(PqError::Validation("vector contains non-finite values".into()));
    }
    let mut prepared = v.to_vec();
    cb.metric().prepare(&mut prepared);
    let w = layout.sub_dim();
    let indices = (0..layout.m)
        .map(|j| {
            let sub = &prepared[j * w..(j + 1) * w];
            let (c, _) = argmin((0..layout.k_star).map(|c| sub_distance(sub, cb.centroid(j, c)))).expect("k* >= 2");
            c as u16
        })
        .collect();
    Ok(PQCode(indices))
}

/// Concatenates the selected centroids.
pub fn pq_decode(code: &PQCode, cb: &PQCodebook) -> Result<Vec<f32>, PqError> {
    let layout = cb.layout();
    if code.0.len() != layout.m {
        return Err(PqError::Validation(format!("code has {} indices, expected {}", code.0.len(), layout.m)));
    }
    let mut out = Vec::with_capacity(layout.d);
    for (j, &c) in code.0.iter().enumerate() {
        if usize::from(c) >= layout.k_star {
            return Err(PqError::Validation(format!("index {c} in subspace {j} is >= k*={}", layout.k_star)));
        }
        out.extend_from_slice(cb.centroid(j, usize::from(c)));
    }
    Ok(out)
}
