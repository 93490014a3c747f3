//! Message framing, traffic metering and the two delivery backends.
//!
//! Every message on the wire is a 40-byte little-endian header followed by
//! the payload:
//!
//! ```text
//! magic u32 | msg_type u32 | layer u32 | chunk_id u64 | iteration u64 | origin u32 | payload_len u64
//! ```

pub mod sim;
pub mod tcp;

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::sync::Mutex;

use thiserror::Error;

pub const FRAME_MAGIC: u32 = 0x5053_4442;
pub const HEADER_BYTES: usize = 40;
/// Upper bound on a single payload; anything larger is treated as corruption.
pub const MAX_PAYLOAD: u64 = 1 << 31;
/// `layer` value carried by frames that do not belong to a layer.
pub const NO_LAYER: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad frame magic {0:#010x}")]
    BadMagic(u32),
    #[error("unknown message type {0}")]
    UnknownMsgType(u32),
    #[error("payload of {0} bytes exceeds limit")]
    PayloadTooLarge(u64),
    #[error("truncated frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("connection to node {0} is closed")]
    Closed(usize),
    #[error("unknown peer node {0}")]
    UnknownPeer(usize),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("nodes unreachable: {0:?}")]
    Unreachable(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u32)]
pub enum MsgType {
    PushChunk = 1,
    BroadcastChunk = 2,
    SfBatch = 3,
    Control = 4,
}

impl MsgType {
    pub fn from_u32(v: u32) -> Result<Self, TransportError> {
        Ok(match v {
            1 => MsgType::PushChunk,
            2 => MsgType::BroadcastChunk,
            3 => MsgType::SfBatch,
            4 => MsgType::Control,
            other => return Err(TransportError::UnknownMsgType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub layer: u32,
    pub chunk_id: u64,
    pub iteration: u64,
    pub origin: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn control(code: u64, origin: u32, payload: Vec<u8>) -> Self {
        Frame {
            msg_type: MsgType::Control,
            layer: NO_LAYER,
            chunk_id: code,
            iteration: 0,
            origin,
            payload,
        }
    }

    /// Size on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_BYTES + self.payload.len()
    }

    pub fn layer_index(&self) -> Option<u32> {
        (self.layer != NO_LAYER).then_some(self.layer)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.wire_len());
        out.extend_from_slice(&FRAME_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.msg_type as u32).to_le_bytes());
        out.extend_from_slice(&self.layer.to_le_bytes());
        out.extend_from_slice(&self.chunk_id.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.origin.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.wire_len());
        self.encode_into(&mut v);
        v
    }

    /// Decodes one frame from the front of `buf`, returning it and the number
    /// of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), TransportError> {
        if buf.len() < HEADER_BYTES {
            return Err(TransportError::Truncated {
                need: HEADER_BYTES,
                have: buf.len(),
            });
        }
        let header = Header::parse(buf[..HEADER_BYTES].try_into().expect("header slice"))?;
        let total = HEADER_BYTES + header.payload_len as usize;
        if buf.len() < total {
            return Err(TransportError::Truncated {
                need: total,
                have: buf.len(),
            });
        }
        Ok((header.into_frame(buf[HEADER_BYTES..total].to_vec()), total))
    }

    /// Reads one frame. Returns `Ok(None)` on a clean EOF at a frame boundary.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>, TransportError> {
        let mut hbuf = [0u8; HEADER_BYTES];
        let mut filled = 0;
        while filled < HEADER_BYTES {
            match r.read(&mut hbuf[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => {
                    return Err(TransportError::Truncated {
                        need: HEADER_BYTES,
                        have: filled,
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let header = Header::parse(&hbuf)?;
        let mut payload = vec![0u8; header.payload_len as usize];
        r.read_exact(&mut payload)?;
        Ok(Some(header.into_frame(payload)))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())
    }
}

struct Header {
    msg_type: MsgType,
    layer: u32,
    chunk_id: u64,
    iteration: u64,
    origin: u32,
    payload_len: u64,
}

impl Header {
    fn parse(b: &[u8; HEADER_BYTES]) -> Result<Self, TransportError> {
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let magic = u32_at(0);
        if magic != FRAME_MAGIC {
            return Err(TransportError::BadMagic(magic));
        }
        let payload_len = u64_at(32);
        if payload_len > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(payload_len));
        }
        Ok(Header {
            msg_type: MsgType::from_u32(u32_at(4))?,
            layer: u32_at(8),
            chunk_id: u64_at(12),
            iteration: u64_at(20),
            origin: u32_at(28),
            payload_len,
        })
    }

    fn into_frame(self, payload: Vec<u8>) -> Frame {
        Frame {
            msg_type: self.msg_type,
            layer: self.layer,
            chunk_id: self.chunk_id,
            iteration: self.iteration,
            origin: self.origin,
            payload,
        }
    }
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Option<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Per-node byte counters. Traffic between two roles on the same node is
/// counted separately as `local` and never as NIC traffic.
#[derive(Debug, Default)]
pub struct TrafficMeter {
    inner: Mutex<MeterState>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficSnapshot {
    pub bytes_out: Vec<u64>,
    pub bytes_in: Vec<u64>,
    pub local: Vec<u64>,
    pub per_layer: BTreeMap<u32, u64>,
    pub frames: u64,
}

type MeterState = TrafficSnapshot;

fn bump(v: &mut Vec<u64>, i: usize, by: u64) {
    if v.len() <= i {
        v.resize(i + 1, 0);
    }
    v[i] += by;
}

impl TrafficMeter {
    pub fn new(nodes: usize) -> Self {
        TrafficMeter {
            inner: Mutex::new(TrafficSnapshot {
                bytes_out: vec![0; nodes],
                bytes_in: vec![0; nodes],
                local: vec![0; nodes],
                ..Default::default()
            }),
        }
    }

    /// Records a frame leaving `src` for `dst`.
    pub fn record_send(&self, src: usize, dst: usize, layer: Option<u32>, bytes: u64) {
        let mut s = self.inner.lock().unwrap();
        s.frames += 1;
        if src == dst {
            bump(&mut s.local, src, bytes);
        } else {
            bump(&mut s.bytes_out, src, bytes);
        }
        if let Some(l) = layer {
            *s.per_layer.entry(l).or_default() += bytes;
        }
    }

    /// Records a frame arriving at `dst` from `src`.
    pub fn record_recv(&self, src: usize, dst: usize, bytes: u64) {
        if src != dst {
            let mut s = self.inner.lock().unwrap();
            bump(&mut s.bytes_in, dst, bytes);
        }
    }

    /// Both ends at once, for backends that see the whole transfer.
    pub fn record_transfer(&self, src: usize, dst: usize, layer: Option<u32>, bytes: u64) {
        self.record_send(src, dst, layer, bytes);
        self.record_recv(src, dst, bytes);
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        self.inner.lock().unwrap().clone()
    }
}

impl TrafficSnapshot {
    pub fn total(&self, node: usize) -> u64 {
        self.bytes_in.get(node).copied().unwrap_or(0) + self.bytes_out.get(node).copied().unwrap_or(0)
    }

    pub fn nodes(&self) -> usize {
        self.bytes_in.len().max(self.bytes_out.len())
    }

    pub fn nic_bytes(&self) -> u64 {
        self.bytes_out.iter().sum()
    }
}
