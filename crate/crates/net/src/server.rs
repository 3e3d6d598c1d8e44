//! Thread-per-connection knowledge-base server.

use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use log::{debug, info, warn};

use crate::protocol::{
    codes, decode_payload, read_frame, write_message, DecodeError, FrameError, KbInfo, Message, PROTOCOL_VERSION,
};
use crate::NetError;
use crlsc_core::pqkb::KnowledgeBase;

/// A running server. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, closes open connections and waits for the acceptor.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        for (_, c) in self.conns.lock().expect("connection list").drain() {
            let _ = c.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Binds `addr` and serves `kb` until the handle is shut down.
pub fn serve_kb(kb: Arc<KnowledgeBase>, addr: impl ToSocketAddrs) -> Result<ServerHandle, NetError> {
    let listener = TcpListener::bind(addr).map_err(NetError::Bind)?;
    let local = listener.local_addr().map_err(NetError::Bind)?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
    info!("serving {} ({} entries) on {local}", kb.source_tag(), kb.len());
    let accept = {
        let (stop, conns) = (stop.clone(), conns.clone());
        thread::Builder::new()
            .name("kb-accept".into())
            .spawn(move || {
                for (id, stream) in (0u64..).zip(listener.incoming()) {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    if let Ok(c) = stream.try_clone() {
                        conns.lock().expect("connection list").insert(id, c);
                    }
                    let (kb, conns) = (kb.clone(), conns.clone());
                    let _ = thread::Builder::new().name("kb-conn".into()).spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = handle_connection(&kb, stream) {
                            debug!("connection {peer:?} ended: {e}");
                        }
                        conns.lock().expect("connection list").remove(&id);
                    });
                }
            })
            .map_err(NetError::Bind)?
    };
    Ok(ServerHandle { addr: local, stop, conns, accept: Some(accept) })
}

/// Response to one decoded request, and whether to keep the connection.
pub fn respond(kb: &KnowledgeBase, msg: Message) -> (Message, bool) {
    match msg {
        Message::Hello { version } if version == PROTOCOL_VERSION => (Message::Hello { version }, true),
        Message::Hello { version } => (
            Message::error(
                codes::VERSION_MISMATCH,
                format!("server speaks version {PROTOCOL_VERSION}, client sent {version}"),
            ),
            false,
        ),
        Message::InfoRequest => (Message::Info(KbInfo::of(kb)), true),
        Message::Query { n, q } => {
            if q.len() != kb.dim() {
                let m = format!("query has d = {}, knowledge base has d = {}", q.len(), kb.dim());
                return (Message::error(codes::DIM_MISMATCH, m), true);
            }
            let q64: Vec<f64> = q.iter().map(|&v| f64::from(v)).collect();
            match kb.adc_search(&q64, n as usize) {
                Ok(hits) => (Message::from_hits(&hits), true),
                Err(e) => (Message::error(codes::BAD_REQUEST, e.to_string()), true),
            }
        }
        other => (
            Message::error(codes::UNKNOWN_TYPE, format!("unexpected message type 0x{:02x}", other.type_byte())),
            true,
        ),
    }
}

fn handle_connection(kb: &KnowledgeBase, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let (reply, keep) = match read_frame(&mut reader) {
            Ok((ty, payload)) => match decode_payload(ty, &payload) {
                Ok(msg) => respond(kb, msg),
                Err(DecodeError::UnknownType(t)) => {
                    (Message::error(codes::UNKNOWN_TYPE, format!("unknown message type 0x{t:02x}")), true)
                }
                Err(DecodeError::Malformed(m)) => (Message::error(codes::MALFORMED, m), false),
            },
            Err(FrameError::Oversized(len)) => {
                (Message::error(codes::OVERSIZED, format!("frame of {len} bytes exceeds the limit")), false)
            }
            Err(FrameError::Empty) => (Message::error(codes::MALFORMED, "empty frame"), false),
            Err(FrameError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(FrameError::Io(e)) => return Err(e),
        };
        write_message(&mut writer, &reply)?;
        if !keep {
            let _ = writer.get_ref().shutdown(Shutdown::Both);
            return Ok(());
        }
    }
}
