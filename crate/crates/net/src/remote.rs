//! A knowledge base on the other side of a socket, usable wherever a local
//! one is.

use std::sync::Mutex;
use std::time::Duration;

use log::debug;

use crate::client::KbClient;
use crate::protocol::KbInfo;
use crate::NetError;
use crlsc_core::fusion::{retrieve_and_fuse, EmbeddingBatch, FusionConfig, FusionError, FusionOutput, Neighbour, NoiseConfig, Retriever};

/// Keeps one connection and reconnects once when it breaks, so a restarted
/// server is picked up transparently.
pub struct RemoteKb {
    addr: String,
    timeout: Duration,
    info: KbInfo,
    conn: Mutex<Option<KbClient>>,
}

impl RemoteKb {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, NetError> {
        let mut c = KbClient::connect(addr, timeout)?;
        let info = c.info()?;
        Ok(Self { addr: addr.to_string(), timeout, info, conn: Mutex::new(Some(c)) })
    }

    pub fn info(&self) -> &KbInfo {
        &self.info
    }

    pub fn query(&self, q: &[f32], n: usize) -> Result<Vec<Neighbour>, NetError> {
        let mut guard = self.conn.lock().expect("connection lock");
        if let Some(c) = guard.as_mut() {
            match c.query(q, n) {
                Ok(r) => return Ok(r),
                Err(e @ NetError::Remote { .. }) => return Err(e),
                Err(e) => debug!("reconnecting to {} after: {e}", self.addr),
            }
        }
        *guard = None;
        let mut c = KbClient::connect(&self.addr, self.timeout)?;
        let r = c.query(q, n);
        *guard = Some(c);
        r
    }
}

impl Retriever for RemoteKb {
    fn dim(&self) -> usize {
        self.info.d as usize
    }

    fn retrieve(&self, query: &[f32], n: usize) -> Result<Vec<Neighbour>, FusionError> {
        self.query(query, n).map_err(|e| FusionError::Retrieval(Box::new(e)))
    }
}

/// [`retrieve_and_fuse`] against a served knowledge base.
pub fn remote_retrieve_and_fuse(
    addr: &str,
    q: &EmbeddingBatch,
    cfg: &FusionConfig,
    noise: &NoiseConfig,
    timeout: Duration,
) -> Result<FusionOutput, NetError> {
    let kb = RemoteKb::connect(addr, timeout)?;
    Ok(retrieve_and_fuse(q, &kb, cfg, noise)?)
}
