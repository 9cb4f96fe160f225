//! Frame layout: `"HRF1" | msg_type u8 | flags u8 | payload_len u64 LE`,
//! then the payload as a sequence of sections, each `len u64 LE | bytes`.
//! Numeric arrays inside sections are the raw little-endian element bytes.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::le;

pub const FRAME_MAGIC: [u8; 4] = *b"HRF1";
pub const FRAME_HEADER_LEN: usize = 14;

/// Flag bit 0: float arrays in the payload carry the block value codec.
pub const FLAG_VALUES_COMPRESSED: u8 = 1;
/// Flag bit 1: id lists carry the batch index codec.
pub const FLAG_INDICES_COMPRESSED: u8 = 1 << 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    RegisterSample = 1,
    PullEmbedding = 2,
    EmbeddingReply = 3,
    PushGradient = 4,
    Ack = 5,
    Error = 6,
    DenseSync = 7,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::RegisterSample,
            2 => MsgType::PullEmbedding,
            3 => MsgType::EmbeddingReply,
            4 => MsgType::PushGradient,
            5 => MsgType::Ack,
            6 => MsgType::Error,
            7 => MsgType::DenseSync,
            _ => return None,
        })
    }
}

/// Total frame length (header included) announced by the first
/// `FRAME_HEADER_LEN` bytes of `header`.
pub fn frame_len(header: &[u8]) -> Result<usize> {
    if header.len() < FRAME_HEADER_LEN {
        return Err(Error::protocol(header.len(), "truncated frame header"));
    }
    if header[..4] != FRAME_MAGIC {
        return Err(Error::protocol(0, "bad frame magic"));
    }
    if MsgType::from_u8(header[4]).is_none() {
        return Err(Error::protocol(4, format!("unknown message type {}", header[4])));
    }
    let len = u64::from_le_bytes(header[6..14].try_into().unwrap());
    if len >= 1 << 63 {
        return Err(Error::protocol(6, "payload length out of range"));
    }
    (len as usize)
        .checked_add(FRAME_HEADER_LEN)
        .ok_or_else(|| Error::protocol(6, "payload length out of range"))
}

/// Incremental frame writer; sections are appended in place.
#[derive(Debug)]
pub struct FrameBuilder {
    buf: Vec<u8>,
}

impl FrameBuilder {
    pub fn new(msg_type: MsgType, flags: u8) -> Self {
        let mut buf = Vec::with_capacity(256);
        buf.extend_from_slice(&FRAME_MAGIC);
        buf.push(msg_type as u8);
        buf.push(flags);
        buf.extend_from_slice(&[0; 8]);
        Self { buf }
    }

    pub fn bytes(mut self, b: &[u8]) -> Self {
        self.buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(b);
        self
    }

    pub fn array<T: bytemuck::Pod>(self, v: &[T]) -> Self {
        self.bytes(&le::as_bytes(v))
    }

    pub fn finish(mut self) -> Vec<u8> {
        let len = (self.buf.len() - FRAME_HEADER_LEN) as u64;
        self.buf[6..14].copy_from_slice(&len.to_le_bytes());
        self.buf
    }
}

pub fn encode_frame(msg_type: MsgType, flags: u8, sections: &[&[u8]]) -> Vec<u8> {
    sections
        .iter()
        .fold(FrameBuilder::new(msg_type, flags), |b, s| b.bytes(s))
        .finish()
}

/// A decoded frame. Owns the received buffer; sections are ranges into it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub flags: u8,
    buf: Vec<u8>,
    sections: Vec<Range<usize>>,
}

pub fn decode_frame(buf: Vec<u8>) -> Result<Frame> {
    let total = frame_len(&buf)?;
    if buf.len() < total {
        return Err(Error::protocol(buf.len(), format!("truncated payload: need {total} bytes")));
    }
    if buf.len() > total {
        return Err(Error::protocol(total, "trailing bytes after payload"));
    }
    let mut sections = Vec::new();
    let mut pos = FRAME_HEADER_LEN;
    while pos < total {
        if total - pos < 8 {
            return Err(Error::protocol(pos, "truncated section length"));
        }
        let len = u64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
        let start = pos + 8;
        if len > (total - start) as u64 {
            return Err(Error::protocol(pos, format!("section of {len} bytes overruns payload")));
        }
        let end = start + len as usize;
        sections.push(start..end);
        pos = end;
    }
    Ok(Frame {
        msg_type: MsgType::from_u8(buf[4]).unwrap(),
        flags: buf[5],
        buf,
        sections,
    })
}

impl Frame {
    pub fn section_count(&self) -> usize {
        self.sections.len()
    }

    pub fn section(&self, i: usize) -> Result<&[u8]> {
        self.sections
            .get(i)
            .map(|r| &self.buf[r.clone()])
            .ok_or_else(|| Error::protocol(self.buf.len(), format!("missing section {i}")))
    }

    pub fn array<T: bytemuck::Pod>(&self, i: usize) -> Result<Vec<T>> {
        let bytes = self.section(i)?;
        let size = std::mem::size_of::<T>();
        if bytes.len() % size != 0 {
            return Err(Error::protocol(
                self.sections[i].start,
                format!("section {i} length {} is not a multiple of {size}", bytes.len()),
            ));
        }
        Ok(le::to_vec(bytes))
    }

    /// Byte offset of a section inside the frame, for error reports.
    pub fn section_offset(&self, i: usize) -> usize {
        self.sections.get(i).map_or(self.buf.len(), |r| r.start)
    }

    pub fn has_flag(&self, flag: u8) -> bool {
        self.flags & flag != 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}
