//! Stage-2 semantic codec.
//!
//! The frozen encoder output of each image is split into `T` tokens, every
//! token is replaced by the index of its nearest codeword, the indices cross
//! a bit-flipping channel, and the receiver looks the codewords back up and
//! decodes them to an image.

use thiserror::Error;

use crate::pqkb::PqError;
use crate::trainer::TrainError;

pub mod channel;
pub mod decoder;
pub mod loss;
pub mod stage2;
pub mod vq;

pub use channel::{bits_per_index, channel_transmit, channel_transmit_traced, ChannelModel};
pub use decoder::{load_decoder, save_decoder, DecoderParams};
pub use loss::{vqvae_loss, vqvae_loss_backward, vqvae_loss_sg, VqLoss, VqLossGrads, DEFAULT_BETA};
pub use stage2::{init_codebook, tokenize, train_stage2, untokenize, Stage2Config, Stage2Epoch, Stage2Output, TraceRecord};
pub use vq::{load_codebook, save_codebook, vq_dequantize, vq_quantize, vq_quantize_with_distances, VQCodebook};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pq(#[from] PqError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<crate::nn::NnError> for CodecError {
    fn from(e: crate::nn::NnError) -> Self {
        CodecError::Train(e.into())
    }
}
