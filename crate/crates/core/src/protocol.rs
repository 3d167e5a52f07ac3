//! UDP wire format: fixed-layout little-endian request/reply framing with
//! client-selected RX queues and fragmentation of multi-frame values.
//!
//! Datagram layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     2  magic (0x4B56)
//!      2     1  version (1)
//!      3     1  opcode
//!      4     8  request_id
//!     12     8  client_timestamp (ns)
//!     20     8  keyhash
//!     28     2  key_len
//!     30     4  value_len_total
//!     34     2  frag_index
//!     36     2  frag_count
//!     38     -  key bytes (key_len), then payload slice
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

pub const MAGIC: u16 = 0x4B56;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 38;

/// Largest UDP payload that fits a 1500-byte Ethernet frame (1500 - 20 IP - 8 UDP).
pub const MAX_DATAGRAM: usize = 1472;

/// Default value bytes accounted per packet.
pub const DEFAULT_MTU_PAYLOAD: usize = 1472;

/// Default first UDP port; RX queue `i` listens on `BASE_PORT + i`.
pub const BASE_PORT: u16 = 9100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("datagram of {len} bytes exceeds the {max}-byte budget")]
    Oversize { len: usize, max: usize },
    #[error("datagram truncated: {0} bytes")]
    Truncated(usize),
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown opcode {0}")]
    BadOpcode(u8),
    #[error("fragment {index} out of range for count {count}")]
    BadFragment { index: u16, count: u16 },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReassemblyError {
    #[error("missing fragments: have {have} of {count}")]
    Incomplete { have: usize, count: usize },
    #[error("fragments disagree on frag_count or value_len_total")]
    Inconsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Get = 1,
    Put = 2,
    GetReply = 3,
    PutReply = 4,
    Error = 5,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Result<Self, ProtocolError> {
        Ok(match v {
            1 => Opcode::Get,
            2 => Opcode::Put,
            3 => Opcode::GetReply,
            4 => Opcode::PutReply,
            5 => Opcode::Error,
            other => return Err(ProtocolError::BadOpcode(other)),
        })
    }

    pub fn is_request(self) -> bool {
        matches!(self, Opcode::Get | Opcode::Put)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub opcode: Opcode,
    pub request_id: u64,
    pub client_timestamp: u64,
    pub keyhash: u64,
    pub key_len: u16,
    pub value_len_total: u32,
    pub frag_index: u16,
    pub frag_count: u16,
}

impl MessageHeader {
    pub fn request(opcode: Opcode, request_id: u64, client_timestamp: u64, keyhash: u64) -> Self {
        MessageHeader {
            opcode,
            request_id,
            client_timestamp,
            keyhash,
            key_len: 0,
            value_len_total: 0,
            frag_index: 0,
            frag_count: 1,
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(VERSION);
        out.push(self.opcode as u8);
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&self.client_timestamp.to_le_bytes());
        out.extend_from_slice(&self.keyhash.to_le_bytes());
        out.extend_from_slice(&self.key_len.to_le_bytes());
        out.extend_from_slice(&self.value_len_total.to_le_bytes());
        out.extend_from_slice(&self.frag_index.to_le_bytes());
        out.extend_from_slice(&self.frag_count.to_le_bytes());
    }

    fn read_from(buf: &[u8]) -> Result<Self, ProtocolError> {
        if buf.len() < HEADER_LEN {
            return Err(ProtocolError::Truncated(buf.len()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let magic = u16_at(0);
        if magic != MAGIC {
            return Err(ProtocolError::BadMagic(magic));
        }
        if buf[2] != VERSION {
            return Err(ProtocolError::BadVersion(buf[2]));
        }
        let header = MessageHeader {
            opcode: Opcode::from_u8(buf[3])?,
            request_id: u64_at(4),
            client_timestamp: u64_at(12),
            keyhash: u64_at(20),
            key_len: u16_at(28),
            value_len_total: u32_at(30),
            frag_index: u16_at(34),
            frag_count: u16_at(36),
        };
        if header.frag_count == 0 || header.frag_index >= header.frag_count {
            return Err(ProtocolError::BadFragment {
                index: header.frag_index,
                count: header.frag_count,
            });
        }
        Ok(header)
    }
}

/// One decoded datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub header: MessageHeader,
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
}

/// Serializes a header, key and payload slice into one datagram. `key_len`
/// in the emitted header always reflects `key.len()`.
pub fn encode(header: &MessageHeader, key: &[u8], payload: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    encode_with_budget(header, key, payload, MAX_DATAGRAM)
}

pub fn encode_with_budget(
    header: &MessageHeader,
    key: &[u8],
    payload: &[u8],
    max_datagram: usize,
) -> Result<Vec<u8>, ProtocolError> {
    let len = HEADER_LEN + key.len() + payload.len();
    if len > max_datagram || key.len() > u16::MAX as usize {
        return Err(ProtocolError::Oversize { len, max: max_datagram });
    }
    let mut out = Vec::with_capacity(len);
    let mut h = *header;
    h.key_len = key.len() as u16;
    h.write_to(&mut out);
    out.extend_from_slice(key);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode(datagram: &[u8]) -> Result<Frame, ProtocolError> {
    let header = MessageHeader::read_from(datagram)?;
    let key_end = HEADER_LEN + header.key_len as usize;
    if datagram.len() < key_end {
        return Err(ProtocolError::Truncated(datagram.len()));
    }
    Ok(Frame {
        header,
        key: datagram[HEADER_LEN..key_end].to_vec(),
        payload: datagram[key_end..].to_vec(),
    })
}

/// Splits `value` into slices of exactly `mtu_payload` bytes except the last.
/// An empty value still yields one (empty) slice so every message has a frame.
pub fn fragment(value: &[u8], mtu_payload: usize) -> Vec<&[u8]> {
    assert!(mtu_payload > 0, "mtu_payload must be positive");
    if value.is_empty() {
        return vec![value];
    }
    value.chunks(mtu_payload).collect()
}

/// Number of value-carrying packets a request costs to serve: reply packets
/// for a GET, request packets for a PUT. Never less than one.
pub fn packet_cost(op: Opcode, value_size: usize, mtu_payload: usize) -> u64 {
    let _ = op;
    let size = value_size.max(1);
    size.div_ceil(mtu_payload) as u64
}

/// Value bytes that fit in one datagram next to the header and key.
pub fn frame_value_capacity(key_len: usize, max_datagram: usize) -> usize {
    max_datagram.saturating_sub(HEADER_LEN + key_len).max(1)
}

/// Encodes a whole message, fragmenting its value over as many datagrams as needed.
pub fn encode_message(
    header: &MessageHeader,
    key: &[u8],
    value: &[u8],
    max_datagram: usize,
) -> Result<Vec<Vec<u8>>, ProtocolError> {
    let chunk = frame_value_capacity(key.len(), max_datagram);
    let slices = fragment(value, chunk);
    if slices.len() > u16::MAX as usize {
        return Err(ProtocolError::Oversize { len: value.len(), max: chunk * u16::MAX as usize });
    }
    let count = slices.len() as u16;
    slices
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut h = *header;
            h.value_len_total = value.len() as u32;
            h.frag_index = i as u16;
            h.frag_count = count;
            encode_with_budget(&h, key, s, max_datagram)
        })
        .collect()
}

/// Reassembly buffer for one request id. Duplicate fragments are ignored.
#[derive(Debug, Clone)]
pub struct Reassembly {
    frag_count: u16,
    value_len_total: u32,
    parts: BTreeMap<u16, Vec<u8>>,
}

impl Reassembly {
    pub fn new(first: &MessageHeader) -> Self {
        Reassembly {
            frag_count: first.frag_count,
            value_len_total: first.value_len_total,
            parts: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, frame: Frame) -> Result<(), ReassemblyError> {
        let h = &frame.header;
        if h.frag_count != self.frag_count || h.value_len_total != self.value_len_total {
            return Err(ReassemblyError::Inconsistent);
        }
        self.parts.entry(h.frag_index).or_insert(frame.payload);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.parts.len() == self.frag_count as usize
    }

    pub fn finish(self) -> Result<Vec<u8>, ReassemblyError> {
        if !self.is_complete() {
            return Err(ReassemblyError::Incomplete {
                have: self.parts.len(),
                count: self.frag_count as usize,
            });
        }
        let mut value = Vec::with_capacity(self.value_len_total as usize);
        for part in self.parts.into_values() {
            value.extend_from_slice(&part);
        }
        if value.len() != self.value_len_total as usize {
            return Err(ReassemblyError::Inconsistent);
        }
        Ok(value)
    }
}

/// Reassembles a value from frames of a single request, in any order.
pub fn reassemble<I>(frames: I) -> Result<Vec<u8>, ReassemblyError>
where
    I: IntoIterator<Item = Frame>,
{
    let mut buf: Option<Reassembly> = None;
    for frame in frames {
        let r = buf.get_or_insert_with(|| Reassembly::new(&frame.header));
        r.insert(frame)?;
    }
    match buf {
        Some(r) => r.finish(),
        None => Err(ReassemblyError::Incomplete { have: 0, count: 1 }),
    }
}

/// Emulated RSS: each RX queue is addressed by its own UDP destination port.
pub fn rx_port(base: u16, queue: usize) -> u16 {
    base + queue as u16
}

pub fn rx_queue_of_port(base: u16, port: u16) -> Option<usize> {
    port.checked_sub(base).map(|q| q as usize)
}
