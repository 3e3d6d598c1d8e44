//! Blocking single-connection client.

use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use crate::protocol::{
    decode_payload, read_frame, write_message, FrameError, KbInfo, Message, ADDR_ENV, DEFAULT_PORT, PROTOCOL_VERSION,
};
use crate::NetError;
use crlsc_core::fusion::Neighbour;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// `$CRLSC_KB_ADDR`, or `127.0.0.1:7431`.
pub fn default_addr() -> String {
    std::env::var(ADDR_ENV).unwrap_or_else(|_| format!("127.0.0.1:{DEFAULT_PORT}"))
}

fn resolve(addr: &str) -> Result<SocketAddr, NetError> {
    addr.to_socket_addrs()
        .map_err(|e| NetError::Address(format!("{addr}: {e}")))?
        .next()
        .ok_or_else(|| NetError::Address(format!("{addr} resolves to nothing")))
}

fn classify(e: io::Error) -> NetError {
    match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => NetError::Timeout,
        io::ErrorKind::ConnectionRefused => NetError::ConnectionRefused,
        _ => NetError::Io(e),
    }
}

pub struct KbClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    peer: SocketAddr,
}

impl KbClient {
    /// Connects and performs the version handshake.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, NetError> {
        let peer = resolve(addr)?;
        let stream = TcpStream::connect_timeout(&peer, timeout).map_err(classify)?;
        stream.set_read_timeout(Some(timeout)).map_err(NetError::Io)?;
        stream.set_write_timeout(Some(timeout)).map_err(NetError::Io)?;
        stream.set_nodelay(true).map_err(NetError::Io)?;
        let mut client =
            Self { reader: BufReader::new(stream.try_clone().map_err(NetError::Io)?), writer: BufWriter::new(stream), peer };
        match client.request(&Message::Hello { version: PROTOCOL_VERSION })? {
            Message::Hello { version } if version == PROTOCOL_VERSION => Ok(client),
            Message::Hello { version } => Err(NetError::VersionMismatch { client: PROTOCOL_VERSION, server: version }),
            Message::Error { code: crate::protocol::codes::VERSION_MISMATCH, .. } => {
                Err(NetError::VersionMismatch { client: PROTOCOL_VERSION, server: 0 })
            }
            other => Err(NetError::Protocol(format!("unexpected handshake reply {other:?}"))),
        }
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    /// Sends one frame and returns the raw reply `(type, payload)`.
    pub fn request_raw(&mut self, msg: &Message) -> Result<(u8, Vec<u8>), NetError> {
        write_message(&mut self.writer, msg).map_err(classify)?;
        read_frame(&mut self.reader).map_err(|e| match e {
            FrameError::Io(e) => classify(e),
            other => NetError::Protocol(other.to_string()),
        })
    }

    pub fn request(&mut self, msg: &Message) -> Result<Message, NetError> {
        let (ty, payload) = self.request_raw(msg)?;
        decode_payload(ty, &payload).map_err(|e| NetError::Protocol(e.to_string()))
    }

    pub fn info(&mut self) -> Result<KbInfo, NetError> {
        match self.request(&Message::InfoRequest)? {
            Message::Info(i) => Ok(i),
            Message::Error { code, message } => Err(NetError::Remote { code, message }),
            other => Err(NetError::Protocol(format!("expected info, got {other:?}"))),
        }
    }

    pub fn query(&mut self, q: &[f32], n: usize) -> Result<Vec<Neighbour>, NetError> {
        let n = u32::try_from(n).map_err(|_| NetError::Protocol("n does not fit in u32".into()))?;
        match self.request(&Message::Query { n, q: q.to_vec() })? {
            Message::QueryResponse { items } => {
                if items.len() > n as usize || items.iter().any(|i| i.vector.len() != q.len()) {
                    return Err(NetError::Protocol("response does not match the query".into()));
                }
                Ok(items.into_iter().map(Neighbour::from).collect())
            }
            Message::Error { code, message } => Err(NetError::Remote { code, message }),
            other => Err(NetError::Protocol(format!("expected query response, got {other:?}"))),
        }
    }
}

/// One-shot query: connect, ask, disconnect.
pub fn client_query(addr: &str, q: &[f32], n: usize, timeout: Duration) -> Result<Vec<Neighbour>, NetError> {
    KbClient::connect(addr, timeout)?.query(q, n)
}
