//! Wire format.
//!
//! Every frame is `len u32 | type u8 | payload`, little-endian, where `len`
//! counts the type byte and the payload. Frames longer than [`MAX_FRAME`]
//! are refused.

use std::io::{self, Read, Write};

use crlsc_core::binio::{put_short_str, Reader};
use crlsc_core::fusion::Neighbour;
use crlsc_core::pqkb::{KnowledgeBase, SearchHit};

pub const PROTOCOL_VERSION: u8 = 1;
pub const MAX_FRAME: u32 = 16 * 1024 * 1024;
pub const DEFAULT_PORT: u16 = 7431;
pub const ADDR_ENV: &str = "CRLSC_KB_ADDR";

pub const T_HELLO: u8 = 0x00;
pub const T_QUERY: u8 = 0x01;
pub const T_QUERY_RESPONSE: u8 = 0x02;
pub const T_INFO_REQUEST: u8 = 0x03;
pub const T_INFO_RESPONSE: u8 = 0x04;
pub const T_ERROR: u8 = 0x7F;

/// Error codes carried by [`Message::Error`].
pub mod codes {
    pub const DIM_MISMATCH: u16 = 1;
    pub const OVERSIZED: u16 = 2;
    pub const UNKNOWN_TYPE: u16 = 3;
    pub const VERSION_MISMATCH: u16 = 4;
    pub const MALFORMED: u16 = 5;
    pub const BAD_REQUEST: u16 = 6;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: u64,
    pub dist: f32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbInfo {
    pub d: u32,
    pub m: u32,
    pub k_star: u32,
    pub n: u64,
    pub source_tag: String,
}

impl KbInfo {
    pub fn of(kb: &KnowledgeBase) -> Self {
        let l = kb.layout();
        Self {
            d: l.d as u32,
            m: l.m as u32,
            k_star: l.k_star as u32,
            n: kb.len() as u64,
            source_tag: kb.source_tag().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u8 },
    Query { n: u32, q: Vec<f32> },
    QueryResponse { items: Vec<Item> },
    InfoRequest,
    Info(KbInfo),
    Error { code: u16, message: String },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => T_HELLO,
            Message::Query { .. } => T_QUERY,
            Message::QueryResponse { .. } => T_QUERY_RESPONSE,
            Message::InfoRequest => T_INFO_REQUEST,
            Message::Info(_) => T_INFO_RESPONSE,
            Message::Error { .. } => T_ERROR,
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Self {
        Message::Error { code, message: message.into() }
    }

    /// Search hits as a response; distances and vectors travel as f32.
    pub fn from_hits(hits: &[SearchHit]) -> Self {
        Message::QueryResponse {
            items: hits.iter().map(|h| Item { id: h.id, dist: h.distance as f32, vector: h.vector.clone() }).collect(),
        }
    }
}

impl From<Item> for Neighbour {
    fn from(i: Item) -> Self {
        Neighbour { id: i.id, distance: f64::from(i.dist), vector: i.vector }
    }
}

/// Payload could not be parsed for its type.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Hello { version } => out.push(*version),
        Message::Query { n, q } => {
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(&(q.len() as u32).to_le_bytes());
            put_f32s(&mut out, q);
        }
        Message::QueryResponse { items } => {
            out.extend_from_slice(&(items.len() as u32).to_le_bytes());
            for it in items {
                out.extend_from_slice(&it.id.to_le_bytes());
                out.extend_from_slice(&it.dist.to_le_bytes());
                put_f32s(&mut out, &it.vector);
            }
        }
        Message::InfoRequest => {}
        Message::Info(i) => {
            out.extend_from_slice(&i.d.to_le_bytes());
            out.extend_from_slice(&i.m.to_le_bytes());
            out.extend_from_slice(&i.k_star.to_le_bytes());
            out.extend_from_slice(&i.n.to_le_bytes());
            put_short_str(&mut out, &i.source_tag);
        }
        Message::Error { code, message } => {
            out.extend_from_slice(&code.to_le_bytes());
            put_short_str(&mut out, message);
        }
    }
    out
}

/// Complete frame bytes for `msg`.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let mut out = Vec::with_capacity(payload.len() + 5);
    out.extend_from_slice(&(payload.len() as u32 + 1).to_le_bytes());
    out.push(msg.type_byte());
    out.extend_from_slice(&payload);
    out
}

fn f32s(r: &mut Reader<'_>, n: usize) -> Result<Vec<f32>, DecodeError> {
    r.ensure(n as u64, 4).map_err(|_| DecodeError::Malformed("vector runs past the payload".into()))?;
    Ok((0..n).map(|_| r.f32().expect("ensured")).collect())
}

pub fn decode_payload(ty: u8, payload: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader::new(payload);
    let short = |_| DecodeError::Malformed(format!("payload of type 0x{ty:02x} is too short"));
    let msg = match ty {
        T_HELLO => Message::Hello { version: r.u8().map_err(short)? },
        T_QUERY => {
            let n = r.u32().map_err(short)?;
            let d = r.u32().map_err(short)? as usize;
            Message::Query { n, q: f32s(&mut r, d)? }
        }
        T_QUERY_RESPONSE => {
            let count = r.u32().map_err(short)? as usize;
            let rest = r.remaining();
            let items = if count == 0 {
                Vec::new()
            } else {
                if rest % count != 0 || rest / count < 12 || (rest / count - 12) % 4 != 0 {
                    return Err(DecodeError::Malformed(format!("{rest} bytes do not split into {count} items")));
                }
                let d = (rest / count - 12) / 4;
                (0..count)
                    .map(|_| {
                        let id = r.u64().map_err(short)?;
                        let dist = r.f32().map_err(short)?;
                        Ok(Item { id, dist, vector: f32s(&mut r, d)? })
                    })
                    .collect::<Result<Vec<_>, DecodeError>>()?
            };
            Message::QueryResponse { items }
        }
        T_INFO_REQUEST => Message::InfoRequest,
        T_INFO_RESPONSE => {
            let d = r.u32().map_err(short)?;
            let m = r.u32().map_err(short)?;
            let k_star = r.u32().map_err(short)?;
            let n = r.u64().map_err(short)?;
            let raw = r.short_bytes().map_err(short)?;
            let source_tag =
                String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::Malformed("source tag is not UTF-8".into()))?;
            Message::Info(KbInfo { d, m, k_star, n, source_tag })
        }
        T_ERROR => {
            let code = r.u16().map_err(short)?;
            let raw = r.short_bytes().map_err(short)?;
            let message = String::from_utf8_lossy(raw).into_owned();
            Message::Error { code, message }
        }
        other => return Err(DecodeError::UnknownType(other)),
    };
    if r.remaining() != 0 {
        return Err(DecodeError::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(msg)
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the limit")]
    Oversized(u32),
    #[error("empty frame")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads one frame and returns its type byte and payload.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(u8, Vec<u8>), FrameError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(FrameError::Oversized(len));
    }
    if len == 0 {
        return Err(FrameError::Empty);
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    let payload = body.split_off(1);
    Ok((body[0], payload))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    w.write_all(&encode_frame(msg))?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(msg: &Message) -> Message {
        let frame = encode_frame(msg);
        let (ty, payload) = read_frame(&mut &frame[..]).unwrap();
        decode_payload(ty, &payload).unwrap()
    }

    #[test]
    fn fixed_messages() {
        for msg in [
            Message::Hello { version: 1 },
            Message::InfoRequest,
            Message::Query { n: 3, q: vec![1.0, -2.5] },
            Message::QueryResponse { items: vec![] },
            Message::error(codes::DIM_MISMATCH, "bad d"),
            Message::Info(KbInfo { d: 64, m: 8, k_star: 16, n: 100, source_tag: "skb:teacher".into() }),
        ] {
            assert_eq!(roundtrip(&msg), msg);
        }
    }

    #[test]
    fn frame_layout() {
        let f = encode_frame(&Message::Hello { version: 1 });
        assert_eq!(f, vec![2, 0, 0, 0, 0x00, 1]);
        let f = encode_frame(&Message::InfoRequest);
        assert_eq!(f, vec![1, 0, 0, 0, 0x03]);
    }

    #[test]
    fn rejects_bad_frames() {
        let big = (MAX_FRAME + 1).to_le_bytes();
        assert!(matches!(read_frame(&mut &big[..]), Err(FrameError::Oversized(_))));
        assert!(matches!(read_frame(&mut &[0u8, 0, 0, 0][..]), Err(FrameError::Empty)));
        assert!(matches!(decode_payload(0x42, &[]), Err(DecodeError::UnknownType(0x42))));
        assert!(decode_payload(T_QUERY, &[1, 0, 0, 0, 5, 0, 0, 0, 0]).is_err());
        assert!(decode_payload(T_HELLO, &[1, 2]).is_err());
        assert!(decode_payload(T_QUERY_RESPONSE, &[2, 0, 0, 0, 1, 2, 3]).is_err());
    }

    fn item(d: usize) -> impl Strategy<Value = Item> {
        (any::<u64>(), any::<f32>(), prop::collection::vec(any::<f32>(), d))
            .prop_map(|(id, dist, vector)| Item { id, dist, vector })
    }

    fn message() -> impl Strategy<Value = Message> {
        prop_oneof![
            any::<u8>().prop_map(|version| Message::Hello { version }),
            (any::<u32>(), prop::collection::vec(any::<f32>(), 0..40)).prop_map(|(n, q)| Message::Query { n, q }),
            (0usize..12).prop_flat_map(|d| prop::collection::vec(item(d), 0..6))
                .prop_map(|items| Message::QueryResponse { items }),
            Just(Message::InfoRequest),
            (any::<u32>(), any::<u32>(), any::<u32>(), any::<u64>(), "[a-z:0-9]{0,20}")
                .prop_map(|(d, m, k_star, n, source_tag)| Message::Info(KbInfo { d, m, k_star, n, source_tag })),
            (any::<u16>(), ".{0,30}").prop_map(|(code, message)| Message::Error { code, message }),
        ]
    }

    /// Bitwise comparison so NaN payloads count as equal.
    fn same(a: &Message, b: &Message) -> bool {
        encode_frame(a) == encode_frame(b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn every_message_roundtrips(msg in message()) {
            let back = roundtrip(&msg);
            prop_assert!(same(&back, &msg));
        }
    }
}
