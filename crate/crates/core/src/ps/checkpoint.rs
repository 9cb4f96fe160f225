//! Flat checkpoint format for one PS shard. Layout is specified byte for
//! byte in `docs/checkpoint.md`: a fixed little-endian header, the slot
//! arrays copied verbatim, the index as key-sorted parallel arrays, the
//! free list, and a CRC-32 trailer.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::le::{as_bytes, to_vec as from_bytes};
use crate::ps::lru::LruStore;
use crate::ps::shard::{EmbeddingOptimizer, PsShard};

pub const MAGIC: &[u8; 4] = b"HPS1";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 64;

/// Serialize the shard. The caller holds the shard lock for the duration,
/// which makes the snapshot consistent. Returns the number of bytes written.
pub fn save_checkpoint(shard: &PsShard, sink: &mut impl Write) -> Result<u64> {
    let buf = encode(shard)?;
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}

pub fn encode(shard: &PsShard) -> Result<Vec<u8>> {
    let s = &shard.store;
    let hw = s.high_water_mark();
    let live = s.len();
    let mut buf = Vec::with_capacity(HEADER_LEN + hw * (16 + 8 * s.dim()) + live * 12 + 8);
    buf.extend_from_slice(MAGIC);
    buf.push(FORMAT_VERSION);
    buf.push(shard.optimizer.code());
    buf.extend_from_slice(&[0, 0]);
    for v in [s.dim(), s.capacity(), live, hw, s.free.len()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&s.head.to_le_bytes());
    buf.extend_from_slice(&s.tail.to_le_bytes());
    for v in [shard.rng_salt, shard.eviction_count, shard.miss_count] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&[0u8; 4]);
    debug_assert_eq!(buf.len(), HEADER_LEN);

    buf.extend_from_slice(&as_bytes(&s.prev));
    buf.extend_from_slice(&as_bytes(&s.next));
    buf.extend_from_slice(&as_bytes(&s.keys));
    buf.extend_from_slice(&as_bytes(&s.values));
    buf.extend_from_slice(&as_bytes(&s.opt));
    let mut pairs: Vec<(u64, u32)> = s.index.iter().map(|(&k, &v)| (k, v)).collect();
    pairs.sort_unstable();
    let (keys, slots): (Vec<u64>, Vec<u32>) = pairs.into_iter().unzip();
    buf.extend_from_slice(&as_bytes(&keys));
    buf.extend_from_slice(&as_bytes(&slots));
    buf.extend_from_slice(&as_bytes(&s.free));
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn load_checkpoint(source: &mut impl Read) -> Result<PsShard> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    decode(&buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CheckpointCorrupt(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn array<T: bytemuck::Pod>(&mut self, count: usize, what: &str) -> Result<Vec<T>> {
        let n = count
            .checked_mul(std::mem::size_of::<T>())
            .ok_or_else(|| Error::CheckpointCorrupt(format!("{what} length overflows")))?;
        Ok(from_bytes(self.take(n, what)?))
    }
}

pub fn decode(buf: &[u8]) -> Result<PsShard> {
    let corrupt = |m: String| Error::CheckpointCorrupt(m);
    if buf.len() < HEADER_LEN + 4 {
        return Err(corrupt(format!("{} bytes is shorter than the header", buf.len())));
    }
    if &buf[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    if buf[4] != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", buf[4])));
    }
    let (body, trailer) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch".into()));
    }
    let optimizer = EmbeddingOptimizer::from_code(buf[5])
        .ok_or_else(|| corrupt(format!("unknown optimizer code {}", buf[5])))?;
    let mut c = Cursor { buf: body, pos: 8 };
    let dim = c.u32("dim")? as usize;
    let capacity = c.u32("capacity")? as usize;
    let live = c.u32("live count")? as usize;
    let hw = c.u32("high water mark")? as usize;
    let free_len = c.u32("free length")? as usize;
    let head = c.u32("head")?;
    let tail = c.u32("tail")?;
    let rng_salt = c.u64("rng salt")?;
    let eviction_count = c.u64("eviction count")?;
    let miss_count = c.u64("miss count")?;
    c.take(4, "padding")?;
    if hw > capacity || live > hw || dim == 0 {
        return Err(corrupt(format!("inconsistent header: dim {dim} cap {capacity} live {live} hw {hw}")));
    }
    let prev = c.array::<u32>(hw, "prev links")?;
    let next = c.array::<u32>(hw, "next links")?;
    let keys = c.array::<u64>(hw, "keys")?;
    let values = c.array::<f32>(hw * dim, "values")?;
    let opt = c.array::<f32>(hw * dim, "optimizer state")?;
    let index_keys = c.array::<u64>(live, "index keys")?;
    let index_slots = c.array::<u32>(live, "index slots")?;
    let free = c.array::<u32>(free_len, "free list")?;
    if c.pos != body.len() {
        return Err(corrupt(format!("{} trailing bytes", body.len() - c.pos)));
    }
    if index_keys.windows(2).any(|w| w[0] >= w[1]) {
        return Err(corrupt("index keys not strictly ascending".into()));
    }
    let index: HashMap<u64, u32> = index_keys.into_iter().zip(index_slots).collect();
    let store = LruStore::from_parts(dim, capacity, prev, next, keys, values, opt, index, head, tail, free)?;
    Ok(PsShard {
        store,
        rng_salt,
        optimizer,
        eviction_count,
        miss_count,
        op_log: None,
    })
}
