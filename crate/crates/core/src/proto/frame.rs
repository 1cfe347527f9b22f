//! Wire framing for the contact protocol.
//!
//! ```text
//! magic "DTLP" | version u8 = 1 | type u8 | length u32 LE | body | crc32 u32 LE
//! ```
//!
//! The CRC covers header and body. See `docs/wire.md` for body layouts.

use crate::bundle::{BundleId, BundleKind, NodeId, NodeRole, Priority};
use crate::codec::{CodecError, PutExt, Reader};
use crate::ranges::RangeSet;

pub const MAGIC: &[u8; 4] = b"DTLP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
pub const TRAILER_LEN: usize = 4;
/// Largest accepted body.
pub const MAX_BODY: usize = 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Beacon = 0,
    Hello = 1,
    Manifest = 2,
    Want = 3,
    Chunk = 4,
    Ack = 5,
    Bye = 6,
}

impl FrameType {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => FrameType::Beacon,
            1 => FrameType::Hello,
            2 => FrameType::Manifest,
            3 => FrameType::Want,
            4 => FrameType::Chunk,
            5 => FrameType::Ack,
            6 => FrameType::Bye,
            _ => return None,
        })
    }
}

/// One bundle offered in a MANIFEST.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: BundleId,
    pub total_len: u64,
    pub destination: NodeId,
    pub kind: BundleKind,
    pub priority: Priority,
    pub complete: bool,
    pub ranges: RangeSet,
    // Trailing fields the receiver needs to rebuild and verify the bundle.
    pub source: NodeId,
    pub created_at: u64,
    pub ttl: u64,
    pub payload_digest: [u8; 32],
}

/// The receiver's answer to one MANIFEST entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WantEntry {
    pub id: BundleId,
    /// Receiver already holds the whole bundle; nothing to send.
    pub have_complete: bool,
    /// End of the receiver's longest stored prefix.
    pub start_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AckEntry {
    pub id: BundleId,
    pub offset: u64,
    pub len: u32,
    /// The bundle is now complete (and verified) at the receiver.
    pub complete: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    Beacon { node: NodeId, role: NodeRole },
    Hello { node: NodeId, role: NodeRole },
    Manifest(Vec<ManifestEntry>),
    /// Bundles the receiver declines are left out.
    Want(Vec<WantEntry>),
    Chunk { id: BundleId, offset: u64, data: Vec<u8> },
    /// `pass` hands the sending turn to the peer.
    Ack { pass: bool, entries: Vec<AckEntry> },
    Bye,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("bad magic")]
    BadMagic,
    #[error("bad crc")]
    BadCrc,
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("truncated: need {needed} more bytes")]
    Truncated { needed: usize },
    #[error("body of {0} bytes exceeds limit")]
    Oversize(usize),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("malformed body: {0}")]
    Malformed(String),
}

impl FrameError {
    /// `Truncated` only means more bytes are needed; every other error is fatal.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, FrameError::Truncated { .. })
    }
}

impl From<CodecError> for FrameError {
    fn from(e: CodecError) -> Self {
        FrameError::Malformed(e.to_string())
    }
}

impl Frame {
    pub fn frame_type(&self) -> FrameType {
        match self {
            Frame::Beacon { .. } => FrameType::Beacon,
            Frame::Hello { .. } => FrameType::Hello,
            Frame::Manifest(_) => FrameType::Manifest,
            Frame::Want(_) => FrameType::Want,
            Frame::Chunk { .. } => FrameType::Chunk,
            Frame::Ack { .. } => FrameType::Ack,
            Frame::Bye => FrameType::Bye,
        }
    }

    fn encode_body(&self, out: &mut Vec<u8>) {
        match self {
            Frame::Beacon { node, role } | Frame::Hello { node, role } => {
                out.put_str(node.as_str());
                out.put_u8(role.to_byte());
            }
            Frame::Manifest(entries) => {
                out.put_u32(entries.len() as u32);
                for e in entries {
                    out.put_id(&e.id);
                    out.put_u64(e.total_len);
                    out.put_str(e.destination.as_str());
                    out.put_u8(e.kind as u8);
                    out.put_u8(e.priority as u8);
                    out.put_u8(e.complete as u8);
                    out.put_u16(e.ranges.ranges().len() as u16);
                    for &(s, end) in e.ranges.ranges() {
                        out.put_u64(s);
                        out.put_u64(end);
                    }
                    out.put_str(e.source.as_str());
                    out.put_u64(e.created_at);
                    out.put_u64(e.ttl);
                    out.extend_from_slice(&e.payload_digest);
                }
            }
            Frame::Want(entries) => {
                out.put_u32(entries.len() as u32);
                for e in entries {
                    out.put_id(&e.id);
                    out.put_u8(e.have_complete as u8);
                    out.put_u64(e.start_offset);
                }
            }
            Frame::Chunk { id, offset, data } => {
                out.put_id(id);
                out.put_u64(*offset);
                out.extend_from_slice(data);
            }
            Frame::Ack { pass, entries } => {
                out.put_u8(*pass as u8);
                out.put_u16(entries.len() as u16);
                for e in entries {
                    out.put_id(&e.id);
                    out.put_u64(e.offset);
                    out.put_u32(e.len);
                    out.put_u8(e.complete as u8);
                }
            }
            Frame::Bye => {}
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(MAGIC);
        out.put_u8(VERSION);
        out.put_u8(self.frame_type() as u8);
        out.put_u32(0);
        self.encode_body(&mut out);
        let body_len = out.len() - HEADER_LEN;
        debug_assert!(body_len <= MAX_BODY, "frame body too large");
        out[6..10].copy_from_slice(&(body_len as u32).to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.put_u32(crc);
        out
    }

    /// Encoded size without allocating.
    pub fn encoded_len(&self) -> usize {
        let body = match self {
            Frame::Beacon { node, .. } | Frame::Hello { node, .. } => 2 + node.as_str().len() + 1,
            Frame::Manifest(entries) => {
                4 + entries
                    .iter()
                    .map(|e| {
                        32 + 8 + 2 + e.destination.as_str().len() + 3 + 2
                            + 16 * e.ranges.ranges().len()
                            + 2 + e.source.as_str().len() + 8 + 8 + 32
                    })
                    .sum::<usize>()
            }
            Frame::Want(entries) => 4 + entries.len() * 41,
            Frame::Chunk { data, .. } => 40 + data.len(),
            Frame::Ack { entries, .. } => 3 + entries.len() * 45,
            Frame::Bye => 0,
        };
        HEADER_LEN + body + TRAILER_LEN
    }

    /// Decodes one frame from the front of `buf`, returning it with the number
    /// of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), FrameError> {
        let magic_have = buf.len().min(4);
        if buf[..magic_have] != MAGIC[..magic_have] {
            return Err(FrameError::BadMagic);
        }
        if buf.len() < HEADER_LEN {
            return Err(FrameError::Truncated { needed: HEADER_LEN - buf.len() });
        }
        if buf[4] != VERSION {
            return Err(FrameError::UnknownVersion(buf[4]));
        }
        let body_len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        if body_len > MAX_BODY {
            return Err(FrameError::Oversize(body_len));
        }
        let total = HEADER_LEN + body_len + TRAILER_LEN;
        if buf.len() < total {
            return Err(FrameError::Truncated { needed: total - buf.len() });
        }
        let crc = u32::from_le_bytes(buf[total - 4..total].try_into().unwrap());
        if crc32fast::hash(&buf[..total - 4]) != crc {
            return Err(FrameError::BadCrc);
        }
        let ty = FrameType::from_byte(buf[5]).ok_or(FrameError::UnknownType(buf[5]))?;
        let mut r = Reader::new(&buf[HEADER_LEN..HEADER_LEN + body_len]);
        let frame = decode_body(ty, &mut r)?;
        if !r.is_empty() {
            return Err(FrameError::Malformed("trailing bytes in body".into()));
        }
        Ok((frame, total))
    }
}

fn role(b: u8) -> Result<NodeRole, FrameError> {
    NodeRole::from_byte(b).ok_or_else(|| FrameError::Malformed(format!("role byte {b}")))
}

fn flag(b: u8) -> Result<bool, FrameError> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(FrameError::Malformed(format!("flag byte {b}"))),
    }
}

fn decode_body(ty: FrameType, r: &mut Reader<'_>) -> Result<Frame, FrameError> {
    Ok(match ty {
        FrameType::Beacon => Frame::Beacon { node: r.node_id()?, role: role(r.u8()?)? },
        FrameType::Hello => Frame::Hello { node: r.node_id()?, role: role(r.u8()?)? },
        FrameType::Manifest => {
            let n = r.u32()?;
            let mut entries = Vec::new();
            for _ in 0..n {
                let id = r.id()?;
                let total_len = r.u64()?;
                let destination = r.node_id()?;
                let kind = BundleKind::from_byte(r.u8()?)
                    .ok_or_else(|| FrameError::Malformed("bundle kind".into()))?;
                let priority = Priority::from_byte(r.u8()?)
                    .ok_or_else(|| FrameError::Malformed("priority".into()))?;
                let complete = flag(r.u8()?)?;
                let nr = r.u16()?;
                let mut pairs = Vec::with_capacity(nr as usize);
                for _ in 0..nr {
                    let s = r.u64()?;
                    let e = r.u64()?;
                    if s >= e || e > total_len || pairs.last().is_some_and(|&(_, pe)| s <= pe) {
                        return Err(FrameError::Malformed("range list".into()));
                    }
                    pairs.push((s, e));
                }
                entries.push(ManifestEntry {
                    id,
                    total_len,
                    destination,
                    kind,
                    priority,
                    complete,
                    ranges: RangeSet::from_ranges(pairs),
                    source: r.node_id()?,
                    created_at: r.u64()?,
                    ttl: r.u64()?,
                    payload_digest: r.array32()?,
                });
            }
            Frame::Manifest(entries)
        }
        FrameType::Want => {
            let n = r.u32()?;
            let mut entries = Vec::new();
            for _ in 0..n {
                entries.push(WantEntry {
                    id: r.id()?,
                    have_complete: flag(r.u8()?)?,
                    start_offset: r.u64()?,
                });
            }
            Frame::Want(entries)
        }
        FrameType::Chunk => Frame::Chunk { id: r.id()?, offset: r.u64()?, data: r.rest().to_vec() },
        FrameType::Ack => {
            let pass = flag(r.u8()?)?;
            let n = r.u16()?;
            let mut entries = Vec::new();
            for _ in 0..n {
                entries.push(AckEntry {
                    id: r.id()?,
                    offset: r.u64()?,
                    len: r.u32()?,
                    complete: flag(r.u8()?)?,
                });
            }
            Frame::Ack { pass, entries }
        }
        FrameType::Bye => Frame::Bye,
    })
}

/// Incremental decoder for byte streams.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        FrameReader::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `Ok(None)` when more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        match Frame::decode(&self.buf) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
            Err(FrameError::Truncated { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(s: &str) -> NodeId {
        NodeId::new(s).unwrap()
    }

    #[test]
    fn beacon_round_trip() {
        let f = Frame::Beacon { node: node("mule-1"), role: NodeRole::Mule };
        let bytes = f.encode();
        assert_eq!(&bytes[..4], b"DTLP");
        assert_eq!(bytes.len(), f.encoded_len());
        assert_eq!(Frame::decode(&bytes).unwrap(), (f, bytes.len()));
    }

    #[test]
    fn beacon_bytes_exact() {
        let bytes = Frame::Beacon { node: node("m"), role: NodeRole::Mule }.encode();
        let mut expected = b"DTLP\x01\x00\x04\x00\x00\x00\x01\x00m\x01".to_vec();
        let crc = crc32fast::hash(&expected);
        expected.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn flipped_byte_is_bad_crc() {
        let f = Frame::Chunk { id: BundleId([7; 32]), offset: 65536, data: vec![1, 2, 3, 4] };
        let mut bytes = f.encode();
        let n = bytes.len();
        bytes[n - 6] ^= 0x40;
        assert_eq!(Frame::decode(&bytes), Err(FrameError::BadCrc));
    }

    #[test]
    fn header_errors() {
        let mut bytes = Frame::Bye.encode();
        assert_eq!(Frame::decode(b"XTLP"), Err(FrameError::BadMagic));
        assert_eq!(Frame::decode(b"DT"), Err(FrameError::Truncated { needed: 8 }));
        assert_eq!(Frame::decode(&bytes[..12]), Err(FrameError::Truncated { needed: 2 }));
        bytes[4] = 2;
        assert_eq!(Frame::decode(&bytes), Err(FrameError::UnknownVersion(2)));
        let mut big = Frame::Bye.encode();
        big[6..10].copy_from_slice(&((MAX_BODY + 1) as u32).to_le_bytes());
        assert_eq!(Frame::decode(&big), Err(FrameError::Oversize(MAX_BODY + 1)));
    }

    #[test]
    fn decode_leaves_remainder() {
        let a = Frame::Hello { node: node("rural-1"), role: NodeRole::Rural };
        let mut bytes = a.encode();
        let first = bytes.len();
        bytes.extend_from_slice(&Frame::Bye.encode());
        let (f, used) = Frame::decode(&bytes).unwrap();
        assert_eq!(f, a);
        assert_eq!(used, first);
        assert_eq!(Frame::decode(&bytes[used..]).unwrap().0, Frame::Bye);
    }

    #[test]
    fn stream_reader_reassembles() {
        let frames = vec![
            Frame::Hello { node: node("a"), role: NodeRole::Urban },
            Frame::Chunk { id: BundleId([1; 32]), offset: 0, data: vec![9; 300] },
            Frame::Bye,
        ];
        let bytes: Vec<u8> = frames.iter().flat_map(|f| f.encode()).collect();
        let mut reader = FrameReader::new();
        let mut out = Vec::new();
        for piece in bytes.chunks(7) {
            reader.push(piece);
            while let Some(f) = reader.next_frame().unwrap() {
                out.push(f);
            }
        }
        assert_eq!(out, frames);
    }

    pub(crate) fn arb_node() -> impl Strategy<Value = NodeId> {
        "[a-z0-9-]{1,20}".prop_map(|s| NodeId::new(s).unwrap())
    }

    fn arb_ranges(total: u64) -> impl Strategy<Value = RangeSet> {
        prop::collection::vec((0..=total, 0..=total), 0..4)
            .prop_map(|v| RangeSet::from_ranges(v.into_iter().map(|(a, b)| (a.min(b), a.max(b)))))
    }

    pub(crate) fn arb_frame() -> impl Strategy<Value = Frame> {
        let id = any::<[u8; 32]>().prop_map(BundleId);
        let role = prop_oneof![Just(NodeRole::Rural), Just(NodeRole::Mule), Just(NodeRole::Urban)];
        let kind = prop_oneof![
            Just(BundleKind::TopicRequest),
            Just(BundleKind::ContentUpdate),
            Just(BundleKind::ContentResponse)
        ];
        let prio = prop_oneof![Just(Priority::Content), Just(Priority::Control)];
        let manifest_entry = (id.clone(), 0u64..1 << 40, arb_node(), kind, prio, any::<bool>())
            .prop_flat_map(|(id, total, dest, kind, prio, complete)| {
                (arb_ranges(total), arb_node(), any::<u64>(), 1u64.., any::<[u8; 32]>()).prop_map(
                    move |(ranges, source, created_at, ttl, payload_digest)| ManifestEntry {
                        id,
                        total_len: total,
                        destination: dest.clone(),
                        kind,
                        priority: prio,
                        complete,
                        ranges,
                        source,
                        created_at,
                        ttl,
                        payload_digest,
                    },
                )
            });
        prop_oneof![
            (arb_node(), role.clone()).prop_map(|(node, role)| Frame::Beacon { node, role }),
            (arb_node(), role).prop_map(|(node, role)| Frame::Hello { node, role }),
            prop::collection::vec(manifest_entry, 0..4).prop_map(Frame::Manifest),
            prop::collection::vec(
                (id.clone(), any::<bool>(), any::<u64>()).prop_map(|(id, have_complete, start_offset)| {
                    WantEntry { id, have_complete, start_offset }
                }),
                0..5
            )
            .prop_map(Frame::Want),
            (id.clone(), any::<u64>(), prop::collection::vec(any::<u8>(), 0..2048))
                .prop_map(|(id, offset, data)| Frame::Chunk { id, offset, data }),
            (
                any::<bool>(),
                prop::collection::vec(
                    (id, any::<u64>(), any::<u32>(), any::<bool>())
                        .prop_map(|(id, offset, len, complete)| AckEntry { id, offset, len, complete }),
                    0..4
                )
            )
                .prop_map(|(pass, entries)| Frame::Ack { pass, entries }),
            Just(Frame::Bye),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip(frame in arb_frame()) {
            let bytes = frame.encode();
            prop_assert_eq!(bytes.len(), frame.encoded_len());
            let (back, used) = Frame::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, frame);
        }

        #[test]
        fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let _ = Frame::decode(&bytes);
        }

        #[test]
        fn random_bodies_with_valid_header(ty in 0u8..10, body in prop::collection::vec(any::<u8>(), 0..300)) {
            let mut bytes = b"DTLP\x01".to_vec();
            bytes.push(ty);
            bytes.extend_from_slice(&(body.len() as u32).to_le_bytes());
            bytes.extend_from_slice(&body);
            let crc = crc32fast::hash(&bytes);
            bytes.extend_from_slice(&crc.to_le_bytes());
            match Frame::decode(&bytes) {
                Ok((f, used)) => {
                    prop_assert_eq!(used, bytes.len());
                    prop_assert_eq!(f.encode(), bytes);
                }
                Err(e) => prop_assert!(matches!(e, FrameError::UnknownType(_) | FrameError::Malformed(_))),
            }
        }
    }
}
