//! Stage-1 pre-training of the local encoder.
//!
//! Two augmented views of each image are encoded by the same MLP. One view
//! is enriched with knowledge-base neighbours through [`crate::fusion`] and
//! the pair is pulled together by the decoupled contrastive loss in [`dcl`].

use thiserror::Error;

use crate::fusion::FusionError;
use crate::pqkb::PqError;

pub mod augment;
pub mod data;
pub mod dcl;
pub mod encoder;
pub mod pkb;
pub mod probe;
pub mod stage1;
pub mod teacher;

pub use augment::{augment, AugmentationConfig};
pub use data::{load_dataset, save_dataset, Dataset, Image, SyntheticDatasetSpec};
pub use dcl::{dcl_loss, dcl_loss_backward, dcl_loss_unchecked, DclOutput, NegativesPolicy, DEFAULT_TEMPERATURE};
pub use encoder::{embed, encode_backward, encode_forward, load_encoder, save_encoder, EncoderParams};
pub use pkb::build_private_kb;
pub use probe::{linear_probe_eval, probe_embeddings, ProbeConfig, ProbeHead, ProbeReport};
pub use stage1::{train_stage1, EpochMetrics, TrainConfig};
pub use teacher::{teacher_encode, TeacherEncoder};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("at least two samples per batch are needed for negatives")]
    NoNegatives,
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Pq(#[from] PqError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
