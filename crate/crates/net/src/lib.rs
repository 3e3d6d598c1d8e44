//! Serving knowledge bases over TCP.
//!
//! [`serve_kb`] answers nearest-neighbour queries against an immutable
//! knowledge base; [`KbClient`] and [`RemoteKb`] query it. [`RemoteKb`]
//! implements [`crlsc_core::fusion::Retriever`], so training can run against
//! a remote store exactly as against a local one. [`transfer_demo`] chains
//! shared → device A → private → device B.

use thiserror::Error;

pub mod client;
pub mod protocol;
pub mod remote;
pub mod server;
pub mod transfer;

pub use client::{client_query, default_addr, KbClient, DEFAULT_TIMEOUT};
pub use protocol::{KbInfo, Message, DEFAULT_PORT, PROTOCOL_VERSION};
pub use remote::{remote_retrieve_and_fuse, RemoteKb};
pub use server::{respond, serve_kb, ServerHandle};
pub use transfer::{sha256_file, transfer_demo, DeviceConfig, DeviceReport, TransferConfig, TransferReport};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("could not start server: {0}")]
    Bind(#[source] std::io::Error),
    #[error("bad address: {0}")]
    Address(String),
    #[error("timed out")]
    Timeout,
    #[error("connection refused")]
    ConnectionRefused,
    #[error("protocol version mismatch: client {client}, server {server}")]
    VersionMismatch { client: u8, server: u8 },
    #[error("server error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(#[source] std::io::Error),
    #[error(transparent)]
    Fusion(#[from] crlsc_core::fusion::FusionError),
    #[error("{stage} failed: {source}")]
    Stage { stage: &'static str, source: Box<dyn std::error::Error + Send + Sync> },
}
