//! Query perturbation, top-n retrieval and cross-attention fusion.
//!
//! For a batch of queries `q` (B×d) and retrieved neighbours `k = v`
//! (B×n×d) the score is `q·kᵀ/√d` and the fused representation is
//! `q* = score · v`. In [`FusionMode::Softmax`] the scores are turned into
//! convex weights first.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, softmax, Matrix};
use crate::pqkb::{KnowledgeBase, PqError, DEFAULT_TOP_N};
use crate::rng;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("retriever returned no neighbours")]
    NoNeighbours,
    #[error("retrieval failed: {0}")]
    Retrieval(#[source] Box<dyn std::error::Error + Send + Sync>),
}

impl From<PqError> for FusionError {
    fn from(e: PqError) -> Self {
        FusionError::Retrieval(Box::new(e))
    }
}

/// A B×d batch of finite representation vectors, B ≥ 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch(Matrix);

impl EmbeddingBatch {
    pub fn new(m: Matrix) -> Result<Self, FusionError> {
        if m.rows() == 0 {
            return Err(FusionError::Validation("embedding batch is empty".into()));
        }
        if !m.is_finite() {
            return Err(FusionError::Validation("embedding batch contains non-finite values".into()));
        }
        Ok(Self(m))
    }

    pub fn batch(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, b: usize) -> &[f64] {
        self.0.row(b)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Gaussian perturbation `N(mean, variance)` added element-wise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub mean: f64,
    pub variance: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { mean: 0.0, variance: 0.2, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { mean: 0.0, variance: 0.0, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FusionMode {
    /// `q* = score · v` with raw scaled dot products as weights.
    #[default]
    Literal,
    /// `q* = softmax(score) · v`.
    Softmax,
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(FusionMode::Literal),
            "softmax" => Ok(FusionMode::Softmax),
            other => Err(format!("unknown fusion mode {other:?} (expected literal|softmax)")),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Literal => "literal",
            FusionMode::Softmax => "softmax",
        })
    }
}

/// Decoded top-n neighbours per query, B×n×d, plus their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievedSet {
    batch: usize,
    n: usize,
    dim: usize,
    vectors: Vec<f64>,
    ids: Vec<u64>,
}

impl RetrievedSet {
    pub fn new(batch: usize, n: usize, dim: usize, vectors: Vec<f64>, ids: Vec<u64>) -> Result<Self, FusionError> {
        if vectors.len() != batch * n * dim || ids.len() != batch * n {
            return Err(FusionError::Shape(format!(
                "retrieved buffers hold {} values / {} ids for {batch}x{n}x{dim}",
                vectors.len(),
                ids.len()
            )));
        }
        Ok(Self { batch, n, dim, vectors, ids })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Neighbour `i` of query `b`.
    pub fn vector(&self, b: usize, i: usize) -> &[f64] {
        let start = (b * self.n + i) * self.dim;
        &self.vectors[start..start + self.dim]
    }

    pub fn ids(&self, b: usize) -> &[u64] {
        &self.ids[b * self.n..(b + 1) * self.n]
    }
}

/// One neighbour as returned by a [`Retriever`].
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbour {
    pub id: u64,
    pub distance: f64,
    pub vector: Vec<f32>,
}

/// Anything that answers top-n queries with decoded vectors: a local
/// [`KnowledgeBase`] or a remote one behind the network protocol.
///
/// Queries cross this boundary in `f32`, the precision of the wire format,
/// so local and remote retrieval see identical inputs.
pub trait Retriever: Sync {
    fn dim(&self) -> usize;
    fn retrieve(&self, query: &[f32], n: usize) -> Result<Vec<Neighbour>, FusionError>;
}

impl Retriever for KnowledgeBase {
    fn dim(&self) -> usize {
        KnowledgeBase::dim(self)
    }

    fn retrieve(&self, query: &[f32], n: usize) -> Result<Vec<Neighbour>, FusionError> {
        let q: Vec<f64> = query.iter().map(|&v| f64::from(v)).collect();
        Ok(self
            .adc_search(&q, n)?
            .into_iter()
            .map(|h| Neighbour { id: h.id, distance: h.distance, vector: h.vector })
            .collect())
    }
}

impl<R: Retriever + ?Sized> Retriever for &R {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn retrieve(&self, query: &[f32], n: usize) -> Result<Vec<Neighbour>, FusionError> {
        (**self).retrieve(query, n)
    }
}

/// Returns `q + ε` with `ε ~ N(mean, variance)` i.i.d., drawn from a stream
/// keyed by `noise.seed`. Zero variance returns the input unchanged.
pub fn perturb_query(q: &EmbeddingBatch, noise: &NoiseConfig) -> Result<EmbeddingBatch, FusionError> {
    if !(noise.variance >= 0.0) || !noise.variance.is_finite() || !noise.mean.is_finite() {
        return Err(FusionError::Validation(format!(
            "noise variance must be finite and >= 0 (mean {}, variance {})",
            noise.mean, noise.variance
        )));
    }
    if noise.variance == 0.0 && noise.mean == 0.0 {
        return Ok(q.clone());
    }
    let dist = Normal::new(noise.mean, noise.variance.sqrt()).expect("validated");
    let mut r = rng::stream(noise.seed, &[]);
    let mut out = q.as_matrix().clone();
    for v in out.as_mut_slice() {
        *v += dist.sample(&mut r);
    }
    EmbeddingBatch::new(out)
}

/// `score[b, i] = q_b · k_{b,i} / √d`, returned as B×n.
pub fn attention_score(q: &Matrix, k: &RetrievedSet) -> Result<Matrix, FusionError> {
    if q.cols() != k.dim() || q.rows() != k.batch() {
        return Err(FusionError::Shape(format!(
            "query {}x{} vs keys {}x{}x{}",
            q.rows(),
            q.cols(),
            k.batch(),
            k.n(),
            k.dim()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = Matrix::zeros(k.batch(), k.n());
    for b in 0..k.batch() {
        for i in 0..k.n() {
            s.set(b, i, dot(q.row(b), k.vector(b, i)) * scale);
        }
    }
    Ok(s)
}

/// Fusion weights for a score matrix under `mode`.
pub fn fusion_weights(score: &Matrix, mode: FusionMode) -> Matrix {
    match mode {
        FusionMode::Literal => score.clone(),
        FusionMode::Softmax => {
            let mut w = score.clone();
            for b in 0..w.rows() {
                let row = softmax(score.row(b));
                w.row_mut(b).copy_from_slice(&row);
            }
            w
        }
    }
}

/// `q*_b = Σ_i w_{b,i} v_{b,i}` where `w` is the score (literal) or its
/// row-wise softmax.
pub fn fuse(score: &Matrix, v: &RetrievedSet, mode: FusionMode) -> Result<Matrix, FusionError> {
    if score.rows() != v.batch() || score.cols() != v.n() {
        return Err(FusionError::Shape(format!(
            "score {}x{} vs values {}x{}x{}",
            score.rows(),
            score.cols(),
            v.batch(),
            v.n(),
            v.dim()
        )));
    }
    let w = fusion_weights(score, mode);
    let mut out = Matrix::zeros(v.batch(), v.dim());
    for b in 0..v.batch() {
        let acc = out.row_mut(b);
        for i in 0..v.n() {
            let wi = w.get(b, i);
            for (a, x) in acc.iter_mut().zip(v.vector(b, i)) {
                *a += wi * x;
            }
        }
    }
    Ok(out)
}

/// Settings for [`retrieve_and_fuse`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub top_n: usize,
    pub mode: FusionMode,
    /// Score against the perturbed query instead of the clean one (ablation).
    pub score_with_perturbed: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { top_n: DEFAULT_TOP_N, mode: FusionMode::Literal, score_with_perturbed: false }
    }
}

/// Everything produced on the way to `q*`; kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub q_star: EmbeddingBatch,
    pub retrieved: RetrievedSet,
    /// The query the scores were computed against.
    pub scoring_query: Matrix,
    pub scores: Matrix,
    pub weights: Matrix,
    pub mode: FusionMode,
}

impl FusionOutput {
    pub fn ids(&self) -> Vec<Vec<u64>> {
        (0..self.retrieved.batch()).map(|b| self.retrieved.ids(b).to_vec()).collect()
    }
}

/// Retrieves `top_n` neighbours per row, padding by repeating the last one
/// when the store holds fewer entries.
pub fn retrieve_batch<R: Retriever + ?Sized>(
    queries: &Matrix,
    retriever: &R,
    top_n: usize,
) -> Result<RetrievedSet, FusionError> {
    if top_n == 0 {
        return Err(FusionError::Validation("top_n must be at least 1".into()));
    }
    if queries.cols() != retriever.dim() {
        return Err(FusionError::Shape(format!(
            "query dimension {} vs knowledge base dimension {}",
            queries.cols(),
            retriever.dim()
        )));
    }
    let d = queries.cols();
    let mut vectors = Vec::with_capacity(queries.rows() * top_n * d);
    let mut ids = Vec::with_capacity(queries.rows() * top_n);
    for q in queries.iter_rows() {
        let q32: Vec<f32> = q.iter().map(|&v| v as f32).collect();
        let hits = retriever.retrieve(&q32, top_n)?;
        let last = hits.last().ok_or(FusionError::NoNeighbours)?;
        for i in 0..top_n {
            let h = hits.get(i).unwrap_or(last);
            if h.vector.len() != d {
                return Err(FusionError::Shape(format!("neighbour has dimension {}", h.vector.len())));
            }
            ids.push(h.id);
            vectors.extend(h.vector.iter().map(|&v| f64::from(v)));
        }
    }
    RetrievedSet::new(queries.rows(), top_n, d, vectors, ids)
}

/// perturb → retrieve (with the perturbed query) → score (with the clean
/// query unless configured otherwise) → fuse.
pub fn retrieve_and_fuse<R: Retriever + ?Sized>(
    q: &EmbeddingBatch,
    retriever: &R,
    cfg: &FusionConfig,
    noise: &NoiseConfig,
) -> Result<FusionOutput, FusionError> {
    let perturbed = perturb_query(q, noise)?;
    let retrieved = retrieve_batch(perturbed.as_matrix(), retriever, cfg.top_n)?;
    let scoring_query = if cfg.score_with_perturbed { perturbed.into_matrix() } else { q.as_matrix().clone() };
    let scores = attention_score(&scoring_query, &retrieved)?;
    let weights = fusion_weights(&scores, cfg.mode);
    let q_star = EmbeddingBatch::new(fuse(&scores, &retrieved, cfg.mode)?)?;
    Ok(FusionOutput { q_star, retrieved, scoring_query, scores, weights, mode: cfg.mode })
}

/// Gradient of the loss with respect to the scoring query, given `dL/dq*`.
/// Retrieved vectors are constants.
pub fn fusion_backward(out: &FusionOutput, grad_q_star: &Matrix) -> Matrix {
    let set = &out.retrieved;
    let scale = 1.0 / (set.dim() as f64).sqrt();
    let mut grad_q = Matrix::zeros(set.batch(), set.dim());
    for b in 0..set.batch() {
        let g = grad_q_star.row(b);
        // dL/dw_i = g · v_i
        let dw: Vec<f64> = (0..set.n()).map(|i| dot(g, set.vector(b, i))).collect();
        let ds: Vec<f64> = match out.mode {
            FusionMode::Literal => dw,
            FusionMode::Softmax => {
                let w = out.weights.row(b);
                let mean: f64 = w.iter().zip(&dw).map(|(a, c)| a * c).sum();
                w.iter().zip(&dw).map(|(wi, dwi)| wi * (dwi - mean)).collect()
            }
        };
        let acc = grad_q.row_mut(b);
        for (i, dsi) in ds.iter().enumerate() {
            for (a, k) in acc.iter_mut().zip(set.vector(b, i)) {
                *a += dsi * k * scale;
            }
        }
    }
    grad_q
}
