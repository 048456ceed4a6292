//! Control-channel framing shared by the responder and the engine.
//!
//! ```text
//! +----------------+--------+------------------+-----------------+
//! | length (4, BE) | kind 1 | nonce (16 bytes) | payload         |
//! +----------------+--------+------------------+-----------------+
//! ```
//!
//! `length` counts every byte after the length field itself, so the smallest
//! legal value is 17. All integers are big-endian.
//!
//! | kind | name        | payload                                                     |
//! |------|-------------|-------------------------------------------------------------|
//! | 1    | hello       | version u16, direction u8, duration_ms u32, n_connections u16 |
//! | 2    | hello_ack   | active_tests u32, max_tests u32                             |
//! | 3    | refuse      | reason u8 (1 version_mismatch, 2 at_capacity, 3 bad_params) |
//! | 4    | echo        | opaque bytes                                                |
//! | 5    | echo_reply  | the echo payload, unchanged                                 |
//! | 6    | start_data  | empty; first frame of a data connection, echoed on accept   |
//! | 7    | done        | empty from the client; bytes u64, duration_ms u32, connections u16 from the responder |
//! | 8    | load_report | empty as a query; active_tests u32, max_tests u32 as a reply |
//!
//! A data connection opens with a single `start_data` frame carrying the
//! session nonce. The responder answers with `start_data` (accepted) or
//! `refuse`, after which the connection is a raw byte stream.

use std::fmt;
use std::io::{self, Read, Write};

use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const PROTOCOL_VERSION: u16 = 1;
pub const NONCE_LEN: usize = 16;
/// Kind byte plus nonce.
const HEADER_LEN: usize = 1 + NONCE_LEN;
pub const MAX_FRAME_LEN: u32 = 64 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed by peer")]
    Closed,
    #[error("frame length {0} outside [{HEADER_LEN}, {MAX_FRAME_LEN}]")]
    BadLength(u32),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("malformed {kind:?} payload: {reason}")]
    BadPayload { kind: FrameKind, reason: String },
}

impl WireError {
    /// A read that hit its socket timeout; buffered bytes are kept.
    pub fn is_timeout(&self) -> bool {
        matches!(self, WireError::Io(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
    }
}

/// Opaque per-test identifier, rendered as 32 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn random() -> Self {
        let mut bytes = [0u8; NONCE_LEN];
        rand::thread_rng().fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn zero() -> Self {
        Self([0; NONCE_LEN])
    }

    pub fn parse_hex(s: &str) -> Result<Self, hex::FromHexError> {
        let mut bytes = [0u8; NONCE_LEN];
        hex::decode_to_slice(s, &mut bytes)?;
        Ok(Self(bytes))
    }
}

impl fmt::Display for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({self})")
    }
}

impl Serialize for Nonce {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Nonce {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Nonce::parse_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    Hello = 1,
    HelloAck = 2,
    Refuse = 3,
    Echo = 4,
    EchoReply = 5,
    StartData = 6,
    Done = 7,
    LoadReport = 8,
}

impl TryFrom<u8> for FrameKind {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            1 => Self::Hello,
            2 => Self::HelloAck,
            3 => Self::Refuse,
            4 => Self::Echo,
            5 => Self::EchoReply,
            6 => Self::StartData,
            7 => Self::Done,
            8 => Self::LoadReport,
            other => return Err(WireError::UnknownKind(other)),
        })
    }
}

/// An undecoded frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub nonce: Nonce,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let len = (HEADER_LEN + self.payload.len()) as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.nonce.0);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), WireError> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    /// Parses one frame from the front of `buf`, returning it and the number
    /// of bytes consumed, or `None` if `buf` holds only part of a frame.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, WireError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().expect("4 bytes"));
        if (len as usize) < HEADER_LEN || len > MAX_FRAME_LEN {
            return Err(WireError::BadLength(len));
        }
        let total = 4 + len as usize;
        if buf.len() < total {
            return Ok(None);
        }
        let kind = FrameKind::try_from(buf[4])?;
        let nonce = Nonce(buf[5..5 + NONCE_LEN].try_into().expect("nonce length"));
        let payload = buf[4 + HEADER_LEN..total].to_vec();
        Ok(Some((Frame { kind, nonce, payload }, total)))
    }
}

/// Buffers partial reads so a socket timeout never splits a frame.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: Vec::new(),
        }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }

    pub fn get_mut(&mut self) -> &mut R {
        &mut self.inner
    }

    pub fn read_frame(&mut self) -> Result<Frame, WireError> {
        loop {
            if let Some((frame, used)) = Frame::decode(&self.buf)? {
                self.buf.drain(..used);
                return Ok(frame);
            }
            let mut chunk = [0u8; 4096];
            let n = match self.inner.read(&mut chunk) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            if n == 0 {
                return Err(WireError::Closed);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    pub fn read_message(&mut self) -> Result<ControlMessage, WireError> {
        ControlMessage::from_frame(self.read_frame()?)
    }

    /// Bytes received past the last decoded frame. On a data connection this
    /// is the start of the raw stream.
    pub fn into_parts(self) -> (R, Vec<u8>) {
        (self.inner, self.buf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Responder to client.
    Download,
    /// Client to responder.
    Upload,
}

impl Direction {
    fn code(self) -> u8 {
        match self {
            Direction::Download => 0,
            Direction::Upload => 1,
        }
    }

    fn from_code(v: u8) -> Option<Self> {
        match v {
            0 => Some(Direction::Download),
            1 => Some(Direction::Upload),
            _ => None,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Download => "download",
            Direction::Upload => "upload",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HelloParams {
    pub version: u16,
    pub direction: Direction,
    pub duration_ms: u32,
    pub n_connections: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub active_tests: u32,
    pub max_tests: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefuseReason {
    VersionMismatch,
    AtCapacity,
    BadParams,
}

impl RefuseReason {
    fn code(self) -> u8 {
        match self {
            RefuseReason::VersionMismatch => 1,
            RefuseReason::AtCapacity => 2,
            RefuseReason::BadParams => 3,
        }
    }

    fn from_code(v: u8) -> Option<Self> {
        match v {
            1 => Some(RefuseReason::VersionMismatch),
            2 => Some(RefuseReason::AtCapacity),
            3 => Some(RefuseReason::BadParams),
            _ => None,
        }
    }
}

impl fmt::Display for RefuseReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RefuseReason::VersionMismatch => "version_mismatch",
            RefuseReason::AtCapacity => "at_capacity",
            RefuseReason::BadParams => "bad_params",
        })
    }
}

/// Responder-side byte count for one finished session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub bytes: u64,
    pub duration_ms: u32,
    pub connections: u16,
}

/// Why a hello could not be decoded into parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HelloDecodeError {
    /// Version field present but not ours; the rest is not inspected.
    Version(u16),
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    /// Raw hello payload; see [`ControlMessage::hello_params`]. Kept raw so a
    /// responder can answer malformed or foreign-version hellos with the
    /// right refusal.
    Hello { nonce: Nonce, payload: Vec<u8> },
    HelloAck { nonce: Nonce, load: LoadReport },
    Refuse { nonce: Nonce, reason: RefuseReason },
    Echo { nonce: Nonce, payload: Vec<u8> },
    EchoReply { nonce: Nonce, payload: Vec<u8> },
    StartData { nonce: Nonce },
    Done { nonce: Nonce, summary: Option<TransferSummary> },
    LoadReport { nonce: Nonce, load: Option<LoadReport> },
}

impl ControlMessage {
    pub fn hello(nonce: Nonce, params: HelloParams) -> Self {
        let mut payload = Vec::with_capacity(9);
        payload.extend_from_slice(&params.version.to_be_bytes());
        payload.push(params.direction.code());
        payload.extend_from_slice(&params.duration_ms.to_be_bytes());
        payload.extend_from_slice(&params.n_connections.to_be_bytes());
        ControlMessage::Hello { nonce, payload }
    }

    pub fn decode_hello(payload: &[u8]) -> Result<HelloParams, HelloDecodeError> {
        if payload.len() < 2 {
            return Err(HelloDecodeError::Malformed);
        }
        let version = u16::from_be_bytes([payload[0], payload[1]]);
        if version != PROTOCOL_VERSION {
            return Err(HelloDecodeError::Version(version));
        }
        if payload.len() != 9 {
            return Err(HelloDecodeError::Malformed);
        }
        let direction = Direction::from_code(payload[2]).ok_or(HelloDecodeError::Malformed)?;
        Ok(HelloParams {
            version,
            direction,
            duration_ms: u32::from_be_bytes(payload[3..7].try_into().expect("4 bytes")),
            n_connections: u16::from_be_bytes([payload[7], payload[8]]),
        })
    }

    pub fn nonce(&self) -> Nonce {
        match self {
            ControlMessage::Hello { nonce, .. }
            | ControlMessage::HelloAck { nonce, .. }
            | ControlMessage::Refuse { nonce, .. }
            | ControlMessage::Echo { nonce, .. }
            | ControlMessage::EchoReply { nonce, .. }
            | ControlMessage::StartData { nonce }
            | ControlMessage::Done { nonce, .. }
            | ControlMessage::LoadReport { nonce, .. } => *nonce,
        }
    }

    pub fn to_frame(&self) -> Frame {
        let (kind, payload) = match self {
            ControlMessage::Hello { payload, .. } => (FrameKind::Hello, payload.clone()),
            ControlMessage::HelloAck { load, .. } => (FrameKind::HelloAck, encode_load(load)),
            ControlMessage::Refuse { reason, .. } => (FrameKind::Refuse, vec![reason.code()]),
            ControlMessage::Echo { payload, .. } => (FrameKind::Echo, payload.clone()),
            ControlMessage::EchoReply { payload, .. } => (FrameKind::EchoReply, payload.clone()),
            ControlMessage::StartData { .. } => (FrameKind::StartData, Vec::new()),
            ControlMessage::Done { summary, .. } => {
                let payload = summary.map_or_else(Vec::new, |s| {
                    let mut p = Vec::with_capacity(14);
                    p.extend_from_slice(&s.bytes.to_be_bytes());
                    p.extend_from_slice(&s.duration_ms.to_be_bytes());
                    p.extend_from_slice(&s.connections.to_be_bytes());
                    p
                });
                (FrameKind::Done, payload)
            }
            ControlMessage::LoadReport { load, .. } => {
                (FrameKind::LoadReport, load.as_ref().map_or_else(Vec::new, encode_load))
            }
        };
        Frame {
            kind,
            nonce: self.nonce(),
            payload,
        }
    }

    pub fn from_frame(frame: Frame) -> Result<Self, WireError> {
        let Frame { kind, nonce, payload } = frame;
        let bad = |reason: &str| WireError::BadPayload {
            kind,
            reason: reason.to_string(),
        };
        Ok(match kind {
            FrameKind::Hello => ControlMessage::Hello { nonce, payload },
            FrameKind::HelloAck => ControlMessage::HelloAck {
                nonce,
                load: decode_load(&payload).ok_or_else(|| bad("expected 8 bytes"))?,
            },
            FrameKind::Refuse => {
                let reason = match payload.as_slice() {
                    [code] => RefuseReason::from_code(*code).ok_or_else(|| bad("unknown reason code"))?,
                    _ => return Err(bad("expected 1 byte")),
                };
                ControlMessage::Refuse { nonce, reason }
            }
            FrameKind::Echo => ControlMessage::Echo { nonce, payload },
            FrameKind::EchoReply => ControlMessage::EchoReply { nonce, payload },
            FrameKind::StartData => {
                if !payload.is_empty() {
                    return Err(bad("expected empty payload"));
                }
                ControlMessage::StartData { nonce }
            }
            FrameKind::Done => {
                let summary = match payload.len() {
                    0 => None,
                    14 => Some(TransferSummary {
                        bytes: u64::from_be_bytes(payload[..8].try_into().expect("8 bytes")),
                        duration_ms: u32::from_be_bytes(payload[8..12].try_into().expect("4 bytes")),
                        connections: u16::from_be_bytes([payload[12], payload[13]]),
                    }),
                    _ => return Err(bad("expected 0 or 14 bytes")),
                };
                ControlMessage::Done { nonce, summary }
            }
            FrameKind::LoadReport => {
                let load = if payload.is_empty() {
                    None
                } else {
                    Some(decode_load(&payload).ok_or_else(|| bad("expected 0 or 8 bytes"))?)
                };
                ControlMessage::LoadReport { nonce, load }
            }
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), WireError> {
        self.to_frame().write_to(w)
    }
}

fn encode_load(load: &LoadReport) -> Vec<u8> {
    let mut p = Vec::with_capacity(8);
    p.extend_from_slice(&load.active_tests.to_be_bytes());
    p.extend_from_slice(&load.max_tests.to_be_bytes());
    p
}

fn decode_load(p: &[u8]) -> Option<LoadReport> {
    if p.len() != 8 {
        return None;
    }
    Some(LoadReport {
        active_tests: u32::from_be_bytes(p[..4].try_into().ok()?),
        max_tests: u32::from_be_bytes(p[4..].try_into().ok()?),
    })
}
