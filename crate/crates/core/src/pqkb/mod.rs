//! Product-quantized knowledge bases: training, encoding, asymmetric
//! distance search and the `CRKB` file format.

mod codebook;
mod io;
mod kmeans;
mod store;

use thiserror::Error;

pub use codebook::{pq_decode, pq_encode, pq_train, Metric, PQCode, PQCodebook, PQConfig, PqLayout};
pub use io::{kb_from_bytes, kb_load, kb_save, kb_to_bytes, KB_MAGIC, KB_VERSION};
pub use kmeans::{assign, kmeans_fit, KMeansFit};
pub use store::{adc_search, KnowledgeBase, SearchHit, DEFAULT_TOP_N};

#[derive(Debug, Error)]
pub enum PqError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("knowledge base is empty")]
    EmptyStore,
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("bad magic {found:?}, expected \"CRKB\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("file truncated at byte {offset} ({needed} more bytes needed)")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
