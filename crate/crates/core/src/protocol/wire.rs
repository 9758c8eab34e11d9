//! Binary framing.
//!
//! Every frame is `u32 length | u8 tag | 16-byte session id | u64 sequence |
//! payload`, big-endian, where `length` counts the bytes after itself.
//! Ciphertexts are written as `u16 length | big-endian value`, zero-padded to
//! the key's fixed ciphertext width so entries can be addressed by index.

use num_bigint::BigUint;
use thiserror::Error;

use crate::ahe::{Ciphertext, PublicKeyDoc};
use crate::model::PartyId;

pub type SessionId = [u8; 16];

/// Bytes before the payload, length field included.
pub const HEADER_LEN: usize = 4 + 1 + 16 + 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("frame truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("length field says {declared} bytes, frame has {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tag {
    Setup = 1,
    GuestVectors = 2,
    ChainForward = 3,
    HostAggregate = 4,
    SplitQuery = 5,
    SplitAnswer = 6,
    Abort = 7,
}

impl Tag {
    pub fn from_u8(b: u8) -> Result<Tag, WireError> {
        Ok(match b {
            1 => Tag::Setup,
            2 => Tag::GuestVectors,
            3 => Tag::ChainForward,
            4 => Tag::HostAggregate,
            5 => Tag::SplitQuery,
            6 => Tag::SplitAnswer,
            7 => Tag::Abort,
            other => return Err(WireError::UnknownTag(other)),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Setup => "Setup",
            Tag::GuestVectors => "GuestVectors",
            Tag::ChainForward => "ChainForward",
            Tag::HostAggregate => "HostAggregate",
            Tag::SplitQuery => "SplitQuery",
            Tag::SplitAnswer => "SplitAnswer",
            Tag::Abort => "Abort",
        }
    }
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How hosts should treat the traffic that follows a Setup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Mode {
    /// One GuestVectors message per batch, all trees at once.
    Batched = 1,
    /// One GuestVectors message per tree.
    PerTree = 2,
    /// Vectors pass through every host in turn.
    Chain = 3,
    /// Node-by-node split queries.
    Baseline = 4,
}

impl Mode {
    fn from_u8(b: u8) -> Result<Mode, WireError> {
        Ok(match b {
            1 => Mode::Batched,
            2 => Mode::PerTree,
            3 => Mode::Chain,
            4 => Mode::Baseline,
            other => return Err(WireError::Malformed(format!("mode {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Setup {
    pub mode: Mode,
    pub scale_bits: u32,
    pub public_key: PublicKeyDoc,
    pub model_version: String,
    /// Hosts in forwarding order (chain mode); empty otherwise.
    pub route: Vec<PartyId>,
}

/// Fixed-width ciphertext array, stored in its wire form.
#[derive(Clone, Debug)]
pub struct CipherList {
    width: usize,
    count: usize,
    buf: Vec<u8>,
    start: usize,
}

impl CipherList {
    pub fn with_capacity(width: usize, capacity: usize) -> Self {
        assert!(width <= u16::MAX as usize, "ciphertext width exceeds the wire limit");
        CipherList {
            width,
            count: 0,
            buf: Vec::with_capacity(capacity * (2 + width)),
            start: 0,
        }
    }

    pub fn push(&mut self, c: &Ciphertext) {
        let bytes = c.value().to_bytes_be();
        assert!(bytes.len() <= self.width, "ciphertext wider than the list");
        self.buf.extend_from_slice(&(self.width as u16).to_be_bytes());
        self.buf.resize(self.buf.len() + self.width - bytes.len(), 0);
        self.buf.extend_from_slice(&bytes);
        self.count += 1;
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Big-endian value bytes of entry `i`, padding included.
    pub fn raw(&self, i: usize) -> &[u8] {
        let at = self.start + i * (2 + self.width) + 2;
        &self.buf[at..at + self.width]
    }

    pub fn value(&self, i: usize) -> BigUint {
        BigUint::from_bytes_be(self.raw(i))
    }

    fn body(&self) -> &[u8] {
        &self.buf[self.start..self.start + self.count * (2 + self.width)]
    }

    fn encoded_len(&self) -> usize {
        2 + 4 + self.count * (2 + self.width)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.width as u16).to_be_bytes());
        out.extend_from_slice(&(self.count as u32).to_be_bytes());
        out.extend_from_slice(self.body());
    }
}

impl PartialEq for CipherList {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.count == other.count && self.body() == other.body()
    }
}

/// Per-sample, per-tree vectors of T_k ciphertexts.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorBatch {
    pub sample_ids: Vec<u64>,
    pub first_tree: u32,
    pub leaf_counts: Vec<u32>,
    offsets: Vec<usize>,
    stride: usize,
    pub entries: CipherList,
}

impl VectorBatch {
    /// Empty batch to be filled sample by sample, tree by tree, leaf by leaf.
    pub fn new(sample_ids: Vec<u64>, first_tree: u32, leaf_counts: Vec<u32>, width: usize) -> Self {
        let (offsets, stride) = Self::layout(&leaf_counts);
        let entries = CipherList::with_capacity(width, stride * sample_ids.len());
        VectorBatch {
            sample_ids,
            first_tree,
            leaf_counts,
            offsets,
            stride,
            entries,
        }
    }

    fn layout(leaf_counts: &[u32]) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(leaf_counts.len());
        let mut total = 0usize;
        for &t in leaf_counts {
            offsets.push(total);
            total += t as usize;
        }
        (offsets, total)
    }

    pub fn tree_count(&self) -> usize {
        self.leaf_counts.len()
    }

    /// Index into `entries` of leaf 0 of local tree `tree` for sample `sample`.
    pub fn vector_start(&self, sample: usize, tree: usize) -> usize {
        sample * self.stride + self.offsets[tree]
    }

    pub fn is_complete(&self) -> bool {
        self.entries.len() == self.stride * self.sample_ids.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HostAggregate {
    pub first_tree: u32,
    pub tree_count: u32,
    pub sample_ids: Vec<u64>,
    /// One aggregate per sample.
    pub values: CipherList,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitQuery {
    pub tree: u32,
    pub node: u32,
    pub sample_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitAnswer {
    pub go_left: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortCode {
    ModelVersion = 1,
    DuplicateSession = 2,
    UnknownNode = 3,
    UnknownSample = 4,
    BadMessage = 5,
    Internal = 6,
}

impl AbortCode {
    fn from_u8(b: u8) -> AbortCode {
        match b {
            1 => AbortCode::ModelVersion,
            2 => AbortCode::DuplicateSession,
            3 => AbortCode::UnknownNode,
            4 => AbortCode::UnknownSample,
            5 => AbortCode::BadMessage,
            _ => AbortCode::Internal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Abort {
    pub code: AbortCode,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Setup(Setup),
    GuestVectors(VectorBatch),
    ChainForward(VectorBatch),
    HostAggregate(HostAggregate),
    SplitQuery(SplitQuery),
    SplitAnswer(SplitAnswer),
    Abort(Abort),
}

impl Message {
    pub fn tag(&self) -> Tag {
        match self {
            Message::Setup(_) => Tag::Setup,
            Message::GuestVectors(_) => Tag::GuestVectors,
            Message::ChainForward(_) => Tag::ChainForward,
            Message::HostAggregate(_) => Tag::HostAggregate,
            Message::SplitQuery(_) => Tag::SplitQuery,
            Message::SplitAnswer(_) => Tag::SplitAnswer,
            Message::Abort(_) => Tag::Abort,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub session: SessionId,
    pub seq: u64,
    pub message: Message,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_ids(out: &mut Vec<u8>, ids: &[u64]) {
    put_u32(out, ids.len() as u32);
    for &id in ids {
        put_u64(out, id);
    }
}

fn payload_hint(message: &Message) -> usize {
    match message {
        Message::GuestVectors(b) | Message::ChainForward(b) => 64 + 8 * b.sample_ids.len() + b.entries.encoded_len(),
        Message::HostAggregate(a) => 64 + 8 * a.sample_ids.len() + a.values.encoded_len(),
        _ => 256,
    }
}

pub fn encode_frame(session: &SessionId, seq: u64, message: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload_hint(message));
    put_u32(&mut out, 0);
    out.push(message.tag() as u8);
    out.extend_from_slice(session);
    put_u64(&mut out, seq);
    match message {
        Message::Setup(s) => {
            out.push(s.mode as u8);
            put_u32(&mut out, s.scale_bits);
            let key = serde_json::to_vec(&s.public_key).expect("key document serializes");
            put_bytes(&mut out, &key);
            put_bytes(&mut out, s.model_version.as_bytes());
            put_u16(&mut out, s.route.len() as u16);
            for &p in &s.route {
                put_u16(&mut out, p as u16);
            }
        }
        Message::GuestVectors(b) | Message::ChainForward(b) => {
            put_ids(&mut out, &b.sample_ids);
            put_u32(&mut out, b.first_tree);
            put_u32(&mut out, b.leaf_counts.len() as u32);
            for &t in &b.leaf_counts {
                put_u32(&mut out, t);
            }
            b.entries.write(&mut out);
        }
        Message::HostAggregate(a) => {
            put_u32(&mut out, a.first_tree);
            put_u32(&mut out, a.tree_count);
            put_ids(&mut out, &a.sample_ids);
            a.values.write(&mut out);
        }
        Message::SplitQuery(q) => {
            put_u32(&mut out, q.tree);
            put_u32(&mut out, q.node);
            put_u64(&mut out, q.sample_id);
        }
        Message::SplitAnswer(a) => out.push(a.go_left as u8),
        Message::Abort(a) => {
            out.push(a.code as u8);
            put_bytes(&mut out, a.reason.as_bytes());
        }
    }
    let len = (out.len() - 4) as u32;
    out[..4].copy_from_slice(&len.to_be_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.saturating_add(n);
        if end > self.buf.len() {
            return Err(WireError::Truncated {
                needed: end - self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn string(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| WireError::Malformed("invalid utf-8".into()))
    }

    fn ids(&mut self) -> Result<Vec<u64>, WireError> {
        let n = self.u32()? as usize;
        // each id needs 8 bytes; reject counts the frame cannot hold
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(WireError::Truncated {
                needed: n * 8 - (self.buf.len() - self.pos),
            });
        }
        (0..n).map(|_| self.u64()).collect()
    }

    /// Validates a cipher list in place and returns (width, count, start).
    fn cipher_list(&mut self) -> Result<(usize, usize, usize), WireError> {
        let width = self.u16()? as usize;
        let count = self.u32()? as usize;
        let start = self.pos;
        let body = self.take(count.checked_mul(2 + width).ok_or(WireError::Malformed("cipher list size".into()))?)?;
        for entry in body.chunks_exact(2 + width) {
            if u16::from_be_bytes([entry[0], entry[1]]) as usize != width {
                return Err(WireError::Malformed("ciphertext length differs from list width".into()));
            }
        }
        Ok((width, count, start))
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Reads the length prefix of a frame header.
pub fn frame_body_len(prefix: [u8; 4]) -> usize {
    u32::from_be_bytes(prefix) as usize
}

/// Parses a whole frame, taking ownership so large ciphertext arrays are not copied.
pub fn decode_frame(frame: Vec<u8>) -> Result<Frame, WireError> {
    if frame.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN - frame.len(),
        });
    }
    let declared = frame_body_len(frame[..4].try_into().unwrap());
    if declared != frame.len() - 4 {
        return Err(WireError::LengthMismatch {
            declared,
            actual: frame.len() - 4,
        });
    }
    let tag = Tag::from_u8(frame[4])?;
    let session: SessionId = frame[5..21].try_into().unwrap();
    let seq = u64::from_be_bytes(frame[21..29].try_into().unwrap());

    let mut r = Reader {
        buf: &frame,
        pos: HEADER_LEN,
    };
    let mut list = None;
    let message = match tag {
        Tag::Setup => {
            let mode = Mode::from_u8(r.u8()?)?;
            let scale_bits = r.u32()?;
            let public_key: PublicKeyDoc =
                serde_json::from_slice(r.bytes()?).map_err(|e| WireError::Malformed(format!("public key: {e}")))?;
            let model_version = r.string()?;
            let n = r.u16()? as usize;
            let route = (0..n).map(|_| r.u16().map(|p| p as PartyId)).collect::<Result<_, _>>()?;
            Message::Setup(Setup {
                mode,
                scale_bits,
                public_key,
                model_version,
                route,
            })
        }
        Tag::GuestVectors | Tag::ChainForward => {
            let sample_ids = r.ids()?;
            let first_tree = r.u32()?;
            let trees = r.u32()? as usize;
            if trees > (frame.len() - r.pos) / 4 {
                return Err(WireError::Malformed("tree count exceeds frame".into()));
            }
            let leaf_counts: Vec<u32> = (0..trees).map(|_| r.u32()).collect::<Result<_, _>>()?;
            let (width, count, start) = r.cipher_list()?;
            let (offsets, stride) = VectorBatch::layout(&leaf_counts);
            if stride.checked_mul(sample_ids.len()) != Some(count) {
                return Err(WireError::Malformed(format!(
                    "{count} ciphertexts for {} samples x {stride} leaves",
                    sample_ids.len()
                )));
            }
            list = Some((width, count, start));
            let batch = VectorBatch {
                sample_ids,
                first_tree,
                leaf_counts,
                offsets,
                stride,
                entries: CipherList::with_capacity(width, 0),
            };
            if tag == Tag::GuestVectors {
                Message::GuestVectors(batch)
            } else {
                Message::ChainForward(batch)
            }
        }
        Tag::HostAggregate => {
            let first_tree = r.u32()?;
            let tree_count = r.u32()?;
            let sample_ids = r.ids()?;
            let (width, count, start) = r.cipher_list()?;
            if count != sample_ids.len() {
                return Err(WireError::Malformed(format!(
                    "{count} aggregates for {} samples",
                    sample_ids.len()
                )));
            }
            list = Some((width, count, start));
            Message::HostAggregate(HostAggregate {
                first_tree,
                tree_count,
                sample_ids,
                values: CipherList::with_capacity(width, 0),
            })
        }
        Tag::SplitQuery => Message::SplitQuery(SplitQuery {
            tree: r.u32()?,
            node: r.u32()?,
            sample_id: r.u64()?,
        }),
        Tag::SplitAnswer => Message::SplitAnswer(SplitAnswer {
            go_left: match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(WireError::Malformed(format!("answer bit {b}"))),
            },
        }),
        Tag::Abort => Message::Abort(Abort {
            code: AbortCode::from_u8(r.u8()?),
            reason: r.string()?,
        }),
    };
    r.finish()?;

    let mut message = message;
    if let Some((width, count, start)) = list {
        let target = match &mut message {
            Message::GuestVectors(b) | Message::ChainForward(b) => &mut b.entries,
            Message::HostAggregate(a) => &mut a.values,
            _ => unreachable!(),
        };
        *target = CipherList {
            width,
            count,
            buf: frame,
            start,
        };
    }
    Ok(Frame { session, seq, message })
}
