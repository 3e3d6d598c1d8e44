//! The Stage-1 training loop.

use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentationConfig};
use super::data::{flatten, Dataset, Image};
use super::dcl::{dcl_loss_backward, dcl_loss_unchecked, NegativesPolicy, DEFAULT_TEMPERATURE};
use super::encoder::{encode_backward, encode_backward_raw, encode_forward, EncoderParams};
use super::TrainError;
use crate::fusion::{fusion_backward, retrieve_and_fuse, EmbeddingBatch, FusionConfig, NoiseConfig, Retriever};
use crate::linalg::{normalize_rows, normalize_rows_backward};
use crate::nn::{cosine_lr, Adam};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub lr: f64,
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub negatives: NegativesPolicy,
    /// Back-propagate through the attention scores into the view-A query.
    /// When false, `q*` is a constant and only the view-B branch learns.
    pub grad_through_fusion: bool,
    /// Weight of an extra `(q, p)` pair term added to the `(q*, p)` loss.
    pub plain_pair_weight: f64,
    /// Retrieve and score with the encoder output before L2 normalisation.
    pub fuse_raw_query: bool,
    /// Hidden widths between the flattened input and the output.
    pub hidden: Vec<usize>,
    pub dim: usize,
    pub fusion: FusionConfig,
    /// Noise mean and variance; the seed is re-derived per batch.
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Paper-scale settings: 50 epochs, lr 0.005, batch 256.
    fn default() -> Self {
        Self {
            tau: DEFAULT_TEMPERATURE,
            lr: 0.005,
            lr_floor: 0.0,
            epochs: 50,
            batch: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            negatives: NegativesPolicy::Positives,
            grad_through_fusion: true,
            plain_pair_weight: 0.0,
            fuse_raw_query: true,
            hidden: vec![128],
            dim: 64,
            fusion: FusionConfig::default(),
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 20 epochs, batch 32, with the plain pair term at weight 0.5.
    pub fn desk_scale() -> Self {
        Self { epochs: 20, batch: 32, plain_pair_weight: 0.5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(TrainError::Validation(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.batch < 2 {
            return Err(TrainError::NoNegatives);
        }
        if !(self.lr >= 0.0) || !(self.lr_floor >= 0.0) || self.lr_floor > self.lr.max(self.lr_floor) {
            return Err(TrainError::Validation("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::Validation("Adam needs beta in [0, 1) and eps > 0".into()));
        }
        if self.dim == 0 || self.hidden.contains(&0) {
            return Err(TrainError::Validation("layer widths must be positive".into()));
        }
        if !(self.plain_pair_weight >= 0.0) || !self.plain_pair_weight.is_finite() {
            return Err(TrainError::Validation("plain pair weight must be finite and non-negative".into()));
        }
        if !(self.noise.variance >= 0.0) {
            return Err(TrainError::Validation("noise variance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(self.dim);
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

fn views(images: &[Image], aug: &AugmentationConfig, seed: u64) -> Result<(Vec<Image>, Vec<Image>), TrainError> {
    let mut r = rng::stream(seed, &[]);
    let mut a = Vec::with_capacity(images.len());
    let mut b = Vec::with_capacity(images.len());
    for im in images {
        a.push(augment(im, aug, &mut r)?);
        b.push(augment(im, aug, &mut r)?);
    }
    Ok((a, b))
}

/// Trains a fresh encoder. `retriever = None` is the fusion-disabled
/// baseline, where the anchor is the view-A embedding itself.
pub fn train_stage1(
    dataset: &Dataset,
    retriever: Option<&dyn Retriever>,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
) -> Result<(EncoderParams, Vec<EpochMetrics>), TrainError> {
    cfg.validate()?;
    aug.validate()?;
    let (h, w, c) = dataset.shape().ok_or_else(|| TrainError::Validation("empty dataset".into()))?;
    if dataset.len() < 2 {
        return Err(TrainError::NoNegatives);
    }
    if let Some(r) = retriever {
        if r.dim() != cfg.dim {
            return Err(TrainError::Validation(format!(
                "knowledge base dimension {} vs encoder output {}",
                r.dim(),
                cfg.dim
            )));
        }
    }
    let mut params = EncoderParams::init(&cfg.encoder_dims(h * w * c), &mut rng::stream(cfg.seed, &[0]))?;
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(cfg.lr, cfg.lr_floor, epoch, cfg.epochs);
        order.shuffle(&mut rng::stream(cfg.seed, &[1, epoch as u64]));
        let (mut total, mut batches) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let images: Vec<Image> = idx.iter().map(|&i| dataset.images[i].clone()).collect();
            let (va, vb) = views(&images, aug, rng::derive_seed(cfg.seed, &[3, epoch as u64, bi as u64]))?;
            let (q, cache_a) = encode_forward(&params, &flatten(&va))?;
            let (p, cache_b) = encode_forward(&params, &flatten(&vb))?;

            let (loss, grads) = match retriever {
                None => {
                    let out = dcl_loss_unchecked(q.as_matrix(), p.as_matrix(), cfg.tau, cfg.negatives)?;
                    let (ga, gp) = dcl_loss_backward(&out.cache)?;
                    let mut g = encode_backward(&params, &cache_a, &ga)?;
                    g.add_assign(&encode_backward(&params, &cache_b, &gp)?);
                    (out.loss, g)
                }
                Some(kb) => {
                    let query = if cfg.fuse_raw_query {
                        EmbeddingBatch::new(cache_a.raw().clone())?
                    } else {
                        q.clone()
                    };
                    let noise = cfg.noise.with_seed(rng::derive_seed(cfg.seed, &[2, epoch as u64, bi as u64]));
                    let fused = retrieve_and_fuse(&query, kb, &cfg.fusion, &noise)?;
                    let (anchors, norms) = normalize_rows(fused.q_star.as_matrix());
                    let out = dcl_loss_unchecked(&anchors, p.as_matrix(), cfg.tau, cfg.negatives)?;
                    let (ga, gp) = dcl_loss_backward(&out.cache)?;
                    let mut g = encode_backward(&params, &cache_b, &gp)?;
                    if cfg.grad_through_fusion {
                        let g_qstar = normalize_rows_backward(&anchors, &norms, &ga);
                        let g_query = fusion_backward(&fused, &g_qstar);
                        g.add_assign(&if cfg.fuse_raw_query {
                            encode_backward_raw(&params, &cache_a, &g_query)?
                        } else {
                            encode_backward(&params, &cache_a, &g_query)?
                        });
                    }
                    let mut loss = out.loss;
                    if cfg.plain_pair_weight > 0.0 {
                        let w = cfg.plain_pair_weight;
                        let plain = dcl_loss_unchecked(q.as_matrix(), p.as_matrix(), cfg.tau, cfg.negatives)?;
                        let (mut ga, mut gp) = dcl_loss_backward(&plain.cache)?;
                        ga.scale(w);
                        gp.scale(w);
                        g.add_assign(&encode_backward(&params, &cache_a, &ga)?);
                        g.add_assign(&encode_backward(&params, &cache_b, &gp)?);
                        loss += w * plain.loss;
                    }
                    (loss, g)
                }
            };
            if !loss.is_finite() || grads.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Diverged { epoch: epoch + 1, batch: bi });
            }
            adam.step(params.mlp.param_slices_mut(), grads.slices(), lr);
            total += loss;
            batches += 1;
        }
        let loss = if batches == 0 { 0.0 } else { total / batches as f64 };
        debug!("epoch {} loss {loss:.6} lr {lr:.6}", epoch + 1);
        metrics.push(EpochMetrics { epoch: epoch + 1, loss, lr, wall_ms: started.elapsed().as_millis() as u64 });
    }
    Ok((params, metrics))
}
