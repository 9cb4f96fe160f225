//! Identifiers and per-sample feature types shared by every component, plus
//! the deterministic id-to-shard routing used by the embedding tier.
//!
//! Bit layouts and mixer constants here are part of the wire and checkpoint
//! contract (see `docs/wire.md`); changing them breaks compatibility.

use std::fmt;

use crate::error::{Error, Result};

/// Number of low bits of a [`SampleId`] used for the per-worker counter.
pub const SAMPLE_COUNTER_BITS: u32 = 56;
/// Largest counter value a [`SampleId`] can carry.
pub const MAX_SAMPLE_COUNTER: u64 = (1 << SAMPLE_COUNTER_BITS) - 1;
/// Maximum number of embedding workers addressable through the rank byte.
pub const MAX_EMBEDDING_WORKERS: usize = 256;

/// Sample identifier: embedding-worker rank in the top byte, a per-worker
/// monotonic counter in the low 56 bits.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct SampleId(pub u64);

impl SampleId {
    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn rank(self) -> usize {
        decode_rank(self)
    }

    pub fn counter(self) -> u64 {
        self.0 & MAX_SAMPLE_COUNTER
    }
}

impl fmt::Debug for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SampleId({}:{})", self.rank(), self.counter())
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.rank(), self.counter())
    }
}

pub fn encode_sample_id(rank: usize, counter: u64) -> Result<SampleId> {
    if rank >= MAX_EMBEDDING_WORKERS {
        return Err(Error::precondition(format!(
            "embedding worker rank {rank} does not fit in one byte"
        )));
    }
    if counter > MAX_SAMPLE_COUNTER {
        return Err(Error::precondition(format!(
            "sample counter {counter} exceeds 56 bits"
        )));
    }
    Ok(SampleId(((rank as u64) << SAMPLE_COUNTER_BITS) | counter))
}

pub fn decode_rank(id: SampleId) -> usize {
    (id.0 >> SAMPLE_COUNTER_BITS) as usize
}

// SplitMix64 finalizer constants.
pub const MIX_MUL_1: u64 = 0xbf58_476d_1ce4_e5b9;
pub const MIX_MUL_2: u64 = 0x94d0_49bb_1331_11eb;
pub const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64-bit avalanche mixer (SplitMix64 finalizer). Bijective on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Deterministic stream of uniform draws keyed by a 64-bit seed; used for
/// lazy embedding initialization and synthetic latent vectors.
#[derive(Clone, Debug)]
pub struct MixStream {
    state: u64,
}

impl MixStream {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in the open interval (-1, 1), from the top 24 bits.
    #[inline]
    pub fn next_symmetric(&mut self) -> f32 {
        let bits = (self.next_u64() >> 40) as u32; // 24 bits
        ((bits as f64 + 0.5) / (1u64 << 23) as f64 - 1.0) as f32
    }

    /// Standard normal draw (Box-Muller, f64 precision).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        let u2 = ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Pure routing of feature ids onto embedding shards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardRouter {
    shard_count: usize,
}

impl ShardRouter {
    pub fn new(shard_count: usize) -> Result<Self> {
        if shard_count == 0 {
            return Err(Error::precondition("shard_count must be at least 1"));
        }
        Ok(Self { shard_count })
    }

    pub fn shard_count(&self) -> usize {
        self.shard_count
    }

    #[inline]
    pub fn route(&self, id: u64) -> usize {
        (mix64(id) % self.shard_count as u64) as usize
    }
}

pub fn route_shard(id: u64, shard_count: usize) -> Result<usize> {
    Ok(ShardRouter::new(shard_count)?.route(id))
}

/// Sparse categorical features of one sample, grouped by feature group.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdFeatures {
    pub groups: Vec<Vec<u64>>,
}

impl IdFeatures {
    pub fn new(groups: Vec<Vec<u64>>) -> Self {
        Self { groups }
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn id_count(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, group_count: usize, vocab_bound: u64) -> Result<()> {
        if self.groups.len() != group_count {
            return Err(Error::precondition(format!(
                "expected {group_count} feature groups, got {}",
                self.groups.len()
            )));
        }
        if let Some(id) = self.groups.iter().flatten().find(|&&id| id >= vocab_bound) {
            return Err(Error::precondition(format!(
                "feature id {id} outside vocabulary bound {vocab_bound}"
            )));
        }
        Ok(())
    }
}

/// Dense numeric features fed straight into the network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NonIdFeatures {
    pub dense: Vec<f32>,
}

impl NonIdFeatures {
    pub fn new(dense: Vec<f32>) -> Result<Self> {
        if dense.iter().any(|v| !v.is_finite()) {
            return Err(Error::precondition("non-id features must be finite"));
        }
        Ok(Self { dense })
    }
}

/// Binary click label.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Label(f32);

impl Label {
    pub fn new(y: f32) -> Result<Self> {
        if y == 0.0 || y == 1.0 {
            Ok(Self(y))
        } else {
            Err(Error::precondition(format!("label {y} is not binary")))
        }
    }

    pub fn positive(positive: bool) -> Self {
        Self(if positive { 1.0 } else { 0.0 })
    }

    pub fn value(self) -> f32 {
        self.0
    }
}
