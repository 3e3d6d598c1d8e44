//! The Stage-2 decoder training loop over a frozen encoder.

use std::time::Instant;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::channel::{channel_transmit_traced, ChannelModel};
use super::decoder::DecoderParams;
use super::loss::{vqvae_loss_backward, vqvae_loss_sg, DEFAULT_BETA};
use super::vq::{vq_dequantize, vq_quantize, VQCodebook};
use super::CodecError;
use crate::linalg::Matrix;
use crate::nn::{cosine_lr, Adam};
use crate::pqkb::kmeans_fit;
use crate::rng;
use crate::trainer::data::{flatten, Dataset, Image};
use crate::trainer::encoder::{embed, EncoderParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    /// Tokens per image; the encoder width must be a multiple.
    pub tokens: usize,
    /// Codebook size K.
    pub k: usize,
    pub beta: f64,
    /// Drop the commitment term (the encoder is frozen).
    pub omit_commitment: bool,
    pub freeze_codebook: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub hidden: Vec<usize>,
    pub kmeans_iters: usize,
    pub seed: u64,
    /// Keep one [`TraceRecord`] per batch.
    pub trace: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            tokens: 8,
            k: 64,
            beta: DEFAULT_BETA,
            omit_commitment: true,
            freeze_codebook: false,
            lr: 0.005,
            epochs: 20,
            batch: 32,
            hidden: vec![128, 128],
            kmeans_iters: 20,
            seed: 0,
            trace: false,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self, encoder_dim: usize) -> Result<(), CodecError> {
        if self.tokens == 0 || encoder_dim % self.tokens != 0 {
            return Err(CodecError::Validation(format!(
                "{} tokens do not divide the encoder width {encoder_dim}",
                self.tokens
            )));
        }
        if self.k < 2 {
            return Err(CodecError::Validation(format!("codebook needs K >= 2, got {}", self.k)));
        }
        if self.batch == 0 || !(self.lr >= 0.0) || !(self.beta >= 0.0) {
            return Err(CodecError::Validation("batch must be positive, lr and beta non-negative".into()));
        }
        if self.hidden.contains(&0) {
            return Err(CodecError::Validation("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn token_dim(&self, encoder_dim: usize) -> usize {
        encoder_dim / self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    /// 1-based.
    pub epoch: usize,
    /// Mean reconstruction MSE over the epoch's batches.
    pub mse: f64,
    pub codebook_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame: u64,
    pub indices_sent: Vec<usize>,
    pub indices_received: Vec<usize>,
    pub bits_flipped: u64,
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub decoder: DecoderParams,
    pub codebook: VQCodebook,
    pub epochs: Vec<Stage2Epoch>,
    pub trace: Vec<TraceRecord>,
}

/// B×d → (B·T)×(d/T); each image's tokens are consecutive rows.
pub fn tokenize(z: &Matrix, tokens: usize) -> Result<Matrix, CodecError> {
    if tokens == 0 || z.cols() % tokens != 0 {
        return Err(CodecError::Shape(format!("{tokens} tokens do not divide width {}", z.cols())));
    }
    let (rows, cols) = (z.rows() * tokens, z.cols() / tokens);
    Ok(z.clone().reshape(rows, cols).expect("same size"))
}

/// Inverse of [`tokenize`].
pub fn untokenize(t: &Matrix, tokens: usize) -> Result<Matrix, CodecError> {
    if tokens == 0 || t.rows() % tokens != 0 {
        return Err(CodecError::Shape(format!("{} rows are not whole images of {tokens} tokens", t.rows())));
    }
    let (rows, cols) = (t.rows() / tokens, t.cols() * tokens);
    Ok(t.clone().reshape(rows, cols).expect("same size"))
}

/// k-means over the tokens of the first `cfg.batch` images.
pub fn init_codebook(encoder: &EncoderParams, dataset: &Dataset, cfg: &Stage2Config) -> Result<VQCodebook, CodecError> {
    cfg.validate(encoder.output_dim())?;
    let first = &dataset.images[..cfg.batch.min(dataset.len())];
    if first.is_empty() {
        return Err(CodecError::Validation("empty dataset".into()));
    }
    let tokens = tokenize(&embed(encoder, first)?, cfg.tokens)?;
    let fit = kmeans_fit(&tokens, cfg.k, cfg.kmeans_iters, rng::derive_seed(cfg.seed, &[0xC0DE]))?;
    VQCodebook::new(fit.centroids)
}

/// Encoder → quantise → channel → dequantise → decoder for a set of images.
/// Returns the reconstructions (one flattened image per row) and their MSE.
pub fn reconstruct(
    encoder: &EncoderParams,
    codebook: &VQCodebook,
    decoder: &DecoderParams,
    images: &[Image],
    tokens: usize,
    channel: &ChannelModel,
) -> Result<(Matrix, f64), CodecError> {
    let z = tokenize(&embed(encoder, images)?, tokens)?;
    let sent = vq_quantize(&z, codebook)?;
    let received = channel_transmit_traced(&sent, codebook.k(), channel).0;
    let zq = untokenize(&vq_dequantize(&received, codebook)?, tokens)?;
    let x_hat = decoder.decode(&zq)?;
    let x = flatten(images);
    let mse = x.as_slice().iter().zip(x_hat.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        / x.as_slice().len().max(1) as f64;
    Ok((x_hat, mse))
}

pub fn train_stage2(
    encoder: &EncoderParams,
    decoder: DecoderParams,
    codebook: VQCodebook,
    dataset: &Dataset,
    channel: &ChannelModel,
    cfg: &Stage2Config,
) -> Result<Stage2Output, CodecError> {
    cfg.validate(encoder.output_dim())?;
    channel.validate()?;
    decoder.validate()?;
    if codebook.dim() != cfg.token_dim(encoder.output_dim()) {
        return Err(CodecError::Shape(format!(
            "codewords of width {} vs tokens of width {}",
            codebook.dim(),
            cfg.token_dim(encoder.output_dim())
        )));
    }
    if decoder.input_dim() != encoder.output_dim() {
        return Err(CodecError::Shape(format!(
            "decoder input {} vs encoder output {}",
            decoder.input_dim(),
            encoder.output_dim()
        )));
    }
    if dataset.is_empty() {
        return Err(CodecError::Validation("empty dataset".into()));
    }
    let (mut decoder, mut codebook) = (decoder, codebook);
    let embeddings = embed(encoder, &dataset.images)?;
    let pixels = flatten(&dataset.images);
    let mut dec_opt = Adam::default();
    let mut cb_opt = Adam::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut trace = Vec::new();
    let mut frame = 0u64;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(cfg.lr, 0.0, epoch, cfg.epochs);
        order.shuffle(&mut rng::stream(cfg.seed, &[1, epoch as u64]));
        let (mut mse_sum, mut cb_sum, mut batches) = (0.0, 0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch).enumerate() {
            let z_e = tokenize(&embeddings.select_rows(idx), cfg.tokens)?;
            let x = pixels.select_rows(idx);
            let sent = vq_quantize(&z_e, &codebook)?;
            let ch = ChannelModel { p: channel.p, seed: rng::derive_seed(channel.seed, &[epoch as u64, bi as u64]) };
            let (received, flipped) = channel_transmit_traced(&sent, codebook.k(), &ch);
            let e_sel = vq_dequantize(&sent, &codebook)?;
            let z_q = untokenize(&vq_dequantize(&received, &codebook)?, cfg.tokens)?;
            let cache = decoder.forward(&z_q)?;
            let x_hat = cache.output();
            let loss = vqvae_loss_sg(&x, x_hat, &z_e, &z_e, &e_sel, &e_sel, cfg.beta, cfg.omit_commitment)?;
            if !loss.total.is_finite() {
                return Err(CodecError::Diverged { epoch: epoch + 1, batch: bi });
            }
            let grads = vqvae_loss_backward(&x, x_hat, &z_e, &e_sel, cfg.beta, cfg.omit_commitment)?;
            // the decoder gradient stops at z_q; the encoder is frozen
            let (dec_grads, _) = decoder.backward(&cache, &grads.x_hat)?;
            dec_opt.step(decoder.mlp.param_slices_mut(), dec_grads.slices(), lr);
            if !cfg.freeze_codebook {
                let mut g = Matrix::zeros(codebook.k(), codebook.dim());
                for (t, &k) in sent.iter().enumerate() {
                    for (a, b) in g.row_mut(k).iter_mut().zip(grads.e_sel.row(t)) {
                        *a += b;
                    }
                }
                cb_opt.step(vec![codebook.as_mut_slice()], vec![g.as_slice()], lr);
            }
            if cfg.trace {
                trace.push(TraceRecord { frame, indices_sent: sent, indices_received: received, bits_flipped: flipped });
            }
            frame += 1;
            mse_sum += loss.recon;
            cb_sum += loss.codebook;
            batches += 1;
        }
        let mse = mse_sum / batches.max(1) as f64;
        debug!("stage 2 epoch {} mse {mse:.6}", epoch + 1);
        epochs.push(Stage2Epoch {
            epoch: epoch + 1,
            mse,
            codebook_loss: cb_sum / batches.max(1) as f64,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(Stage2Output { decoder, codebook, epochs, trace })
}
