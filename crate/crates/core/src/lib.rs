//! Knowledge-base guided representation learning for semantic communication.
//!
//! * [`pqkb`] builds, persists and searches product-quantized vector stores.
//! * [`fusion`] perturbs queries, retrieves neighbours and fuses them with
//!   scaled dot-product cross attention.
//! * [`trainer`] pre-trains a small local encoder with a decoupled
//!   contrastive loss against a knowledge base and evaluates it with a probe.
//! * [`semcodec`] is the VQ codebook codec that carries encoder output over
//!   a lossy index channel.

pub mod binio;
pub mod fusion;
pub mod linalg;
pub mod nn;
pub mod pqkb;
pub mod rng;
pub mod semcodec;
pub mod trainer;

pub use linalg::Matrix;
