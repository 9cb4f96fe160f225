//! Typed messages carried in frames. Section 0 of every frame except `Ack`
//! and `Error` is a `u64` header whose first word selects the message kind
//! within its frame type; the remaining sections are flat arrays.

use crate::codec::{self, CompressedIndices, GroupPostings};
use crate::error::{Error, Result};
use crate::ids::{IdFeatures, SampleId};
use crate::wire::frame::{
    decode_frame, Frame, FrameBuilder, MsgType, FLAG_INDICES_COMPRESSED, FLAG_VALUES_COMPRESSED,
};

pub mod kind {
    pub const REGISTER_IDS: u64 = 1;
    pub const REGISTER_INPUTS: u64 = 2;
    pub const SAMPLE_PULL: u64 = 1;
    pub const PS_LOOKUP: u64 = 2;
    pub const PS_PEEK: u64 = 3;
    pub const SAMPLE_EMBEDDINGS: u64 = 1;
    pub const PS_VALUES: u64 = 2;
    pub const SAMPLE_GRADIENTS: u64 = 1;
    pub const PS_STAGE: u64 = 2;
    pub const PS_COMMIT: u64 = 3;
    pub const SYNC_PARTIAL: u64 = 1;
    pub const SYNC_RESULT: u64 = 2;
}

/// Per-sample status byte in [`SampleEmbeddings`].
pub const STATUS_OK: u8 = 0;
pub const STATUS_MISSING: u8 = 1;

fn header(f: &Frame, min_len: usize) -> Result<Vec<u64>> {
    let h: Vec<u64> = f.array(0)?;
    if h.len() < min_len {
        return Err(Error::protocol(
            f.section_offset(0),
            format!("header has {} words, expected at least {min_len}", h.len()),
        ));
    }
    Ok(h)
}

fn check_len(f: &Frame, section: usize, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::protocol(
            f.section_offset(section),
            format!("section {section} holds {got} elements, expected {want}"),
        ));
    }
    Ok(())
}

fn flags_for(kappa: Option<f32>) -> u8 {
    if kappa.is_some() {
        FLAG_VALUES_COMPRESSED
    } else {
        0
    }
}

/// Values always occupy two sections: `(f32 values, empty)` raw, or
/// `(f32 block scales, u16 binary16 payload)` when compressed.
fn put_values(b: FrameBuilder, values: &[f32], block: usize, kappa: Option<f32>) -> Result<FrameBuilder> {
    Ok(match kappa {
        None => b.array(values).bytes(&[]),
        Some(k) => {
            let (scales, payload) = if values.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                codec::compress_blocks(values, block, k)?
            };
            b.array(&scales).array(&payload)
        }
    })
}

fn get_values(f: &Frame, first: usize, expected: usize) -> Result<Vec<f32>> {
    let values = if f.has_flag(FLAG_VALUES_COMPRESSED) {
        let scales: Vec<f32> = f.array(first)?;
        let payload: Vec<u16> = f.array(first + 1)?;
        codec::decompress_blocks(&scales, &payload)?
    } else {
        f.array(first)?
    };
    check_len(f, first, values.len(), expected)?;
    Ok(values)
}

fn sample_ids(raw: Vec<u64>) -> Vec<SampleId> {
    raw.into_iter().map(SampleId).collect()
}

fn raw_ids(ids: &[SampleId]) -> Vec<u64> {
    ids.iter().map(|s| s.0).collect()
}

/// Loader → embedding worker: id features of a batch of new samples.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisterIds {
    pub features: Vec<IdFeatures>,
}

impl RegisterIds {
    pub fn encode(&self, compress_indices: bool) -> Result<Vec<u8>> {
        let n = self.features.len();
        let groups = self.features.first().map_or(0, IdFeatures::group_count);
        if compress_indices {
            let c = codec::compress_indices(&self.features)?;
            let mut b = FrameBuilder::new(MsgType::RegisterSample, FLAG_INDICES_COMPRESSED)
                .array(&[kind::REGISTER_IDS, n as u64, groups as u64]);
            for g in &c.groups {
                let counts: Vec<u32> = g.offsets.windows(2).map(|w| w[1] - w[0]).collect();
                b = b.array(&g.unique_ids).array(&counts).array(&g.postings);
            }
            return Ok(b.finish());
        }
        let mut counts = Vec::with_capacity(n * groups);
        let mut ids = Vec::new();
        for s in &self.features {
            if s.group_count() != groups {
                return Err(Error::precondition("samples disagree on feature group count"));
            }
            for g in &s.groups {
                counts.push(g.len() as u32);
                ids.extend_from_slice(g);
            }
        }
        Ok(FrameBuilder::new(MsgType::RegisterSample, 0)
            .array(&[kind::REGISTER_IDS, n as u64, groups as u64])
            .array(&counts)
            .array(&ids)
            .finish())
    }

    fn decode(f: &Frame, h: &[u64]) -> Result<Self> {
        let need = |i| h.get(i).copied().ok_or_else(|| Error::protocol(f.section_offset(0), "short header"));
        let (n, groups) = (need(1)? as usize, need(2)? as usize);
        if f.has_flag(FLAG_INDICES_COMPRESSED) {
            let mut c = CompressedIndices {
                batch_size: n,
                groups: Vec::with_capacity(groups),
            };
            for g in 0..groups {
                let base = 1 + 3 * g;
                let unique_ids: Vec<u64> = f.array(base)?;
                let counts: Vec<u32> = f.array(base + 1)?;
                check_len(f, base + 1, counts.len(), unique_ids.len())?;
                let mut offsets = Vec::with_capacity(counts.len() + 1);
                offsets.push(0u32);
                for &k in &counts {
                    let next = offsets.last().unwrap().checked_add(k);
                    offsets.push(next.ok_or_else(|| Error::protocol(f.section_offset(base + 1), "count overflow"))?);
                }
                c.groups.push(GroupPostings {
                    unique_ids,
                    offsets,
                    postings: f.array(base + 2)?,
                });
            }
            let features = codec::decompress_indices(&c, n)?;
            return Ok(Self { features });
        }
        let counts: Vec<u32> = f.array(1)?;
        check_len(f, 1, counts.len(), n * groups)?;
        let ids: Vec<u64> = f.array(2)?;
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        check_len(f, 2, ids.len(), total as usize)?;
        let mut pos = 0;
        let mut it = counts.iter();
        let features = (0..n)
            .map(|_| {
                IdFeatures::new(
                    (0..groups)
                        .map(|_| {
                            let k = *it.next().unwrap() as usize;
                            let g = ids[pos..pos + k].to_vec();
                            pos += k;
                            g
                        })
                        .collect(),
                )
            })
            .collect();
        Ok(Self { features })
    }
}

/// Loader → NN worker: non-id features and labels keyed by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisterInputs {
    pub sample_ids: Vec<SampleId>,
    pub non_id_dim: usize,
    pub non_id: Vec<f32>,
    pub labels: Vec<f32>,
}

impl RegisterInputs {
    pub fn encode(&self) -> Vec<u8> {
        FrameBuilder::new(MsgType::RegisterSample, 0)
            .array(&[kind::REGISTER_INPUTS, self.sample_ids.len() as u64, self.non_id_dim as u64])
            .array(&raw_ids(&self.sample_ids))
            .array(&self.non_id)
            .array(&self.labels)
            .finish()
    }

    fn decode(f: &Frame, h: &[u64]) -> Result<Self> {
        if h.len() < 3 {
            return Err(Error::protocol(f.section_offset(0), "short header"));
        }
        let (n, d) = (h[1] as usize, h[2] as usize);
        let ids: Vec<u64> = f.array(1)?;
        check_len(f, 1, ids.len(), n)?;
        let non_id: Vec<f32> = f.array(2)?;
        check_len(f, 2, non_id.len(), n * d)?;
        let labels: Vec<f32> = f.array(3)?;
        check_len(f, 3, labels.len(), n)?;
        Ok(Self {
            sample_ids: sample_ids(ids),
            non_id_dim: d,
            non_id,
            labels,
        })
    }
}

/// NN worker → embedding worker: request aggregated embeddings for the
/// samples of one training step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePull {
    pub step: u64,
    pub sample_ids: Vec<SampleId>,
}

impl SamplePull {
    pub fn encode(&self) -> Vec<u8> {
        FrameBuilder::new(MsgType::PullEmbedding, 0)
            .array(&[kind::SAMPLE_PULL, self.step])
            .array(&raw_ids(&self.sample_ids))
            .finish()
    }
}

/// Embedding worker → PS node: look up unique feature ids. A peek neither
/// inserts missing ids nor refreshes recency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PsLookup {
    pub ids: Vec<u64>,
    pub peek: bool,
}

impl PsLookup {
    pub fn encode(&self) -> Vec<u8> {
        let k = if self.peek { kind::PS_PEEK } else { kind::PS_LOOKUP };
        FrameBuilder::new(MsgType::PullEmbedding, 0)
            .array(&[k])
            .array(&self.ids)
            .finish()
    }
}

/// Embedding worker → NN worker. Samples with `STATUS_MISSING` carry no
/// values; each present sample carries `groups × dim` values and the
/// version stamps of every id it read.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEmbeddings {
    pub step: u64,
    pub group_count: usize,
    pub dim: usize,
    pub status: Vec<u8>,
    pub values: Vec<f32>,
    pub version_offsets: Vec<u32>,
    pub versions: Vec<u32>,
}

impl SampleEmbeddings {
    pub fn encode(&self, kappa: Option<f32>) -> Result<Vec<u8>> {
        let b = FrameBuilder::new(MsgType::EmbeddingReply, flags_for(kappa))
            .array(&[kind::SAMPLE_EMBEDDINGS, self.step, self.group_count as u64, self.dim as u64])
            .bytes(&self.status);
        Ok(put_values(b, &self.values, self.dim.max(1), kappa)?
            .array(&self.version_offsets)
            .array(&self.versions)
            .finish())
    }

    fn decode(f: &Frame, h: &[u64]) -> Result<Self> {
        if h.len() < 4 {
            return Err(Error::protocol(f.section_offset(0), "short header"));
        }
        let (step, group_count, dim) = (h[1], h[2] as usize, h[3] as usize);
        let status = f.section(1)?.to_vec();
        let present = status.iter().filter(|&&s| s == STATUS_OK).count();
        let values = get_values(f, 2, present * group_count * dim)?;
        let version_offsets: Vec<u32> = f.array(4)?;
        check_len(f, 4, version_offsets.len(), present + 1)?;
        let versions: Vec<u32> = f.array(5)?;
        check_len(f, 5, versions.len(), *version_offsets.last().unwrap() as usize)?;
        if version_offsets.windows(2).any(|w| w[0] > w[1]) || version_offsets[0] != 0 {
            return Err(Error::protocol(f.section_offset(4), "version offsets not monotone"));
        }
        Ok(Self {
            step,
            group_count,
            dim,
            status,
            values,
            version_offsets,
            versions,
        })
    }
}

/// PS node → embedding worker: one vector and one version per looked-up id.
#[derive(Clone, Debug, PartialEq)]
pub struct PsValues {
    pub dim: usize,
    pub values: Vec<f32>,
    pub versions: Vec<u32>,
}

impl PsValues {
    pub fn encode(&self, kappa: Option<f32>) -> Result<Vec<u8>> {
        let b = FrameBuilder::new(MsgType::EmbeddingReply, flags_for(kappa))
            .array(&[kind::PS_VALUES, self.dim as u64, self.versions.len() as u64]);
        Ok(put_values(b, &self.values, self.dim.max(1), kappa)?
            .array(&self.versions)
            .finish())
    }

    fn decode(f: &Frame, h: &[u64]) -> Result<Self> {
        if h.len() < 3 {
            return Err(Error::protocol(f.section_offset(0), "short header"));
        }
        let (dim, n) = (h[1] as usize, h[2] as usize);
        let values = get_values(f, 1, n * dim)?;
        let versions: Vec<u32> = f.array(3)?;
        check_len(f, 3, versions.len(), n)?;
        Ok(Self { dim, values, versions })
    }
}

/// NN worker → embedding worker: gradients w.r.t. each sample's aggregated
/// group activations, plus the version stamps returned by the pull.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradients {
    pub step: u64,
    pub nn_rank: u32,
    pub group_count: usize,
    pub dim: usize,
    pub sample_ids: Vec<SampleId>,
    /// Position of each sample inside its minibatch; orders application.
    pub positions: Vec<u32>,
    pub grads: Vec<f32>,
    pub version_offsets: Vec<u32>,
    pub versions: Vec<u32>,
}

impl SampleGradients {
    pub fn encode(&self, kappa: Option<f32>) -> Result<Vec<u8>> {
        let b = FrameBuilder::new(MsgType::PushGradient, flags_for(kappa))
            .array(&[
                kind::SAMPLE_GRADIENTS,
                self.step,
                self.nn_rank as u64,
                self.group_count as u64,
                self.dim as u64,
            ])
            .array(&raw_ids(&self.sample_ids))
            .array(&self.positions);
        Ok(put_values(b, &self.grads, self.dim.max(1), kappa)?
            .array(&self.version_offsets)
            .array(&self.versions)
            .finish())
    }

    fn decode(f: &Frame, h: &[u64]) -> Result<Self> {
        if h.len() < 5 {
            return Err(Error::protocol(f.section_offset(0), "short header"));
        }
        let (step, nn_rank, group_count, dim) = (h[1], h[2] as u32, h[3] as usize, h[4] as usize);
        let ids: Vec<u64> = f.array(1)?;
        let n = ids.len();
        let positions: Vec<u32> = f.array(2)?;
        check_len(f, 2, positions.len(), n)?;
        let grads = get_values(f, 3, n * group_count * dim)?;
        let version_offsets: Vec<u32> = f.array(5)?;
        check_len(f, 5, version_offsets.len(), n + 1)?;
        let versions: Vec<u32> = f.array(6)?;
        check_len(f, 6, versions.len(), *version_offsets.last().unwrap() as usize)?;
        if version_offsets.windows(2).any(|w| w[0] > w[1]) || version_offsets[0] != 0 {
            return Err(Error::protocol(f.section_offset(5), "version offsets not monotone"));
        }
        Ok(Self {
            step,
            nn_rank,
            group_count,
            dim,
            sample_ids: sample_ids(ids),
            positions,
            grads,
            version_offsets,
            versions,
        })
    }
}

/// Embedding worker → PS node: per-id gradients staged for the commit of
/// `step`. `order_keys` fix the application order at commit time.
#[derive(Clone, Debug, PartialEq)]
pub struct PsStage {
    pub step: u64,
    pub dim: usize,
    pub order_keys: Vec<u64>,
    pub ids: Vec<u64>,
    pub grads: Vec<f32>,
    pub read_versions: Vec<u32>,
}

impl PsStage {
    pub fn encode(&self, kappa: Option<f32>) -> Result<Vec<u8>> {
        let b = FrameBuilder::new(MsgType::PushGradient, flags_for(kappa))
            .array(&[kind::PS_STAGE, self.step, self.dim as u64])
            .array(&self.order_keys)
            .array(&self.ids);
        Ok(put_values(b, &self.grads, self.dim.max(1), kappa)?
            .array(&self.read_versions)
            .finish())
    }

    fn decode(f: &Frame, h: &[u64]) -> Result<Self> {
        if h.len() < 3 {
            return Err(Error::protocol(f.section_offset(0), "short header"));
        }
        let (step, dim) = (h[1], h[2] as usize);
        let order_keys: Vec<u64> = f.array(1)?;
        let ids: Vec<u64> = f.array(2)?;
        check_len(f, 2, ids.len(), order_keys.len())?;
        let grads = get_values(f, 3, ids.len() * dim)?;
        let read_versions: Vec<u32> = f.array(5)?;
        check_len(f, 5, read_versions.len(), ids.len())?;
        Ok(Self {
            step,
            dim,
            order_keys,
            ids,
            grads,
            read_versions,
        })
    }
}

/// Step clock → PS node: apply everything staged for `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsCommit {
    pub step: u64,
    pub lr: f32,
}

impl PsCommit {
    pub fn encode(&self) -> Vec<u8> {
        FrameBuilder::new(MsgType::PushGradient, 0)
            .array(&[kind::PS_COMMIT, self.step, self.lr.to_bits() as u64])
            .finish()
    }
}

/// Dense synchronization between NN workers. Partials travel up the
/// reduction tree as `f64` sums; results travel down as `f32` means.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseSync {
    pub step: u64,
    pub bucket: u32,
    pub from_rank: u32,
    /// Number of replicas folded into `partial`.
    pub contributors: u32,
    /// Replica parameter hashes carried for verification (one per
    /// contributor) on partials; unused on results.
    pub hashes: Vec<u64>,
    pub payload: SyncPayload,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SyncPayload {
    Partial(Vec<f64>),
    Result(Vec<f32>),
}

impl DenseSync {
    pub fn encode(&self) -> Vec<u8> {
        let k = match self.payload {
            SyncPayload::Partial(_) => kind::SYNC_PARTIAL,
            SyncPayload::Result(_) => kind::SYNC_RESULT,
        };
        let b = FrameBuilder::new(MsgType::DenseSync, 0)
            .array(&[k, self.step, self.bucket as u64, self.from_rank as u64, self.contributors as u64])
            .array(&self.hashes);
        match &self.payload {
            SyncPayload::Partial(v) => b.array(v),
            SyncPayload::Result(v) => b.array(v),
        }
        .finish()
    }

    fn decode(f: &Frame, h: &[u64]) -> Result<Self> {
        if h.len() < 5 {
            return Err(Error::protocol(f.section_offset(0), "short header"));
        }
        let payload = match h[0] {
            kind::SYNC_PARTIAL => SyncPayload::Partial(f.array(2)?),
            kind::SYNC_RESULT => SyncPayload::Result(f.array(2)?),
            other => return Err(Error::protocol(f.section_offset(0), format!("unknown sync kind {other}"))),
        };
        Ok(Self {
            step: h[1],
            bucket: h[2] as u32,
            from_rank: h[3] as u32,
            contributors: h[4] as u32,
            hashes: f.array(1)?,
            payload,
        })
    }
}

pub fn encode_ack(values: &[u64]) -> Vec<u8> {
    FrameBuilder::new(MsgType::Ack, 0).array(values).finish()
}

fn error_code(e: &Error) -> (u64, u64) {
    match e {
        Error::Precondition(_) => (1, 0),
        Error::Config(_) => (2, 0),
        Error::Divergence(_) => (3, 0),
        Error::Internal(_) => (4, 0),
        Error::CorruptPayload(_) => (5, 0),
        Error::Protocol { offset, .. } => (6, *offset as u64),
        Error::Transport { retriable: true, .. } => (7, 0),
        Error::Transport { retriable: false, .. } => (8, 0),
        Error::StaleSample(id) => (9, id.0),
        Error::Backpressure(_) => (10, 0),
        Error::SyncFailure(_) => (11, 0),
        Error::Consistency(_) => (12, 0),
        _ => (13, 0),
    }
}

fn error_reason(e: &Error) -> String {
    match e {
        Error::Precondition(m)
        | Error::Config(m)
        | Error::Divergence(m)
        | Error::Internal(m)
        | Error::CorruptPayload(m)
        | Error::Backpressure(m)
        | Error::SyncFailure(m)
        | Error::Consistency(m) => m.clone(),
        Error::Protocol { reason, .. } | Error::Transport { reason, .. } => reason.clone(),
        other => other.to_string(),
    }
}

/// Error reply frame: header `[code, aux]` then the UTF-8 reason.
pub fn encode_error(e: &Error) -> Vec<u8> {
    let (code, aux) = error_code(e);
    FrameBuilder::new(MsgType::Error, 0)
        .array(&[code, aux])
        .bytes(error_reason(e).as_bytes())
        .finish()
}

pub fn decode_error(f: &Frame) -> Error {
    let parsed = (|| -> Result<Error> {
        let h = header(f, 2)?;
        let reason = String::from_utf8_lossy(f.section(1)?).into_owned();
        Ok(match h[0] {
            1 => Error::Precondition(reason),
            2 => Error::Config(reason),
            3 => Error::Divergence(reason),
            4 => Error::Internal(reason),
            5 => Error::CorruptPayload(reason),
            6 => Error::Protocol { offset: h[1] as usize, reason },
            7 => Error::Transport { retriable: true, reason },
            8 => Error::Transport { retriable: false, reason },
            9 => Error::StaleSample(SampleId(h[1])),
            10 => Error::Backpressure(reason),
            11 => Error::SyncFailure(reason),
            12 => Error::Consistency(reason),
            _ => Error::Internal(format!("remote error: {reason}")),
        })
    })();
    parsed.unwrap_or_else(|e| e)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    RegisterIds(RegisterIds),
    RegisterInputs(RegisterInputs),
    SamplePull(SamplePull),
    PsLookup(PsLookup),
    SampleEmbeddings(SampleEmbeddings),
    PsValues(PsValues),
    SampleGradients(SampleGradients),
    PsStage(PsStage),
    PsCommit(PsCommit),
    DenseSync(DenseSync),
    Ack(Vec<u64>),
}

impl Message {
    /// Decode a frame. `Error` frames decode to `Err` carrying the remote
    /// error.
    pub fn decode(f: &Frame) -> Result<Message> {
        match f.msg_type {
            MsgType::Ack => return Ok(Message::Ack(if f.section_count() == 0 { Vec::new() } else { f.array(0)? })),
            MsgType::Error => return Err(decode_error(f)),
            _ => {}
        }
        let h = header(f, 1)?;
        let bad = || Error::protocol(f.section_offset(0), format!("unknown kind {} for {:?}", h[0], f.msg_type));
        Ok(match (f.msg_type, h[0]) {
            (MsgType::RegisterSample, kind::REGISTER_IDS) => Message::RegisterIds(RegisterIds::decode(f, &h)?),
            (MsgType::RegisterSample, kind::REGISTER_INPUTS) => {
                Message::RegisterInputs(RegisterInputs::decode(f, &h)?)
            }
            (MsgType::PullEmbedding, kind::SAMPLE_PULL) => {
                let step = *h.get(1).ok_or_else(bad)?;
                Message::SamplePull(SamplePull {
                    step,
                    sample_ids: sample_ids(f.array(1)?),
                })
            }
            (MsgType::PullEmbedding, k @ (kind::PS_LOOKUP | kind::PS_PEEK)) => Message::PsLookup(PsLookup {
                ids: f.array(1)?,
                peek: k == kind::PS_PEEK,
            }),
            (MsgType::EmbeddingReply, kind::SAMPLE_EMBEDDINGS) => {
                Message::SampleEmbeddings(SampleEmbeddings::decode(f, &h)?)
            }
            (MsgType::EmbeddingReply, kind::PS_VALUES) => Message::PsValues(PsValues::decode(f, &h)?),
            (MsgType::PushGradient, kind::SAMPLE_GRADIENTS) => {
                Message::SampleGradients(SampleGradients::decode(f, &h)?)
            }
            (MsgType::PushGradient, kind::PS_STAGE) => Message::PsStage(PsStage::decode(f, &h)?),
            (MsgType::PushGradient, kind::PS_COMMIT) => {
                if h.len() < 3 {
                    return Err(bad());
                }
                Message::PsCommit(PsCommit {
                    step: h[1],
                    lr: f32::from_bits(h[2] as u32),
                })
            }
            (MsgType::DenseSync, _) => Message::DenseSync(DenseSync::decode(f, &h)?),
            _ => return Err(bad()),
        })
    }

    pub fn decode_bytes(bytes: Vec<u8>) -> Result<Message> {
        Message::decode(&decode_frame(bytes)?)
    }
}
