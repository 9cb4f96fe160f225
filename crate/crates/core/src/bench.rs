//! Micro-benchmarks for the codecs and the LRU store.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codec::{compress_indices, compress_values, decompress_indices, decompress_values, raw_index_bytes};
use crate::data::{generate_synthetic, SynthConfig};
use crate::error::{Error, Result};
use crate::ps::lru::{EmbeddingEntry, LruStore};

#[derive(Clone, Debug, Serialize)]
pub struct CodecBench {
    pub batches: usize,
    pub batch_size: usize,
    pub raw_index_bytes: usize,
    pub compressed_index_bytes: usize,
    pub index_ratio: f64,
    pub index_encode_us: f64,
    pub index_decode_us: f64,
    pub value_blocks: usize,
    pub block_len: usize,
    /// Largest roundtrip error relative to the block's max magnitude.
    pub value_max_rel_error: f64,
    pub value_encode_us: f64,
    pub value_decode_us: f64,
}

/// Index codec on batches drawn from the synthetic generator, value codec
/// on gaussian blocks.
pub fn bench_codec(data: &SynthConfig, batch_size: usize, batches: usize, block_len: usize, kappa: f32, seed: u64) -> Result<CodecBench> {
    let mut cfg = data.clone();
    cfg.samples = batch_size * batches;
    let ds = generate_synthetic(&cfg, seed)?;
    let (mut raw, mut packed) = (0, 0);
    let (mut enc, mut dec) = (0.0, 0.0);
    for b in 0..batches {
        let batch: Vec<_> = (b * batch_size..(b + 1) * batch_size).map(|i| ds.id_features(i)).collect();
        let t0 = Instant::now();
        let c = compress_indices(&batch)?;
        let t1 = Instant::now();
        let back = decompress_indices(&c, batch.len())?;
        enc += (t1 - t0).as_secs_f64();
        dec += t1.elapsed().as_secs_f64();
        let sorted: Vec<_> = batch
            .iter()
            .map(|f| {
                let mut f = f.clone();
                f.groups.iter_mut().for_each(|g| g.sort_unstable());
                f
            })
            .collect();
        if back != sorted {
            return Err(Error::Internal("index codec roundtrip mismatch".into()));
        }
        raw += raw_index_bytes(&batch);
        packed += c.payload_bytes();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = batches.max(1) * 4;
    let (mut venc, mut vdec, mut worst) = (0.0, 0.0, 0.0f64);
    for _ in 0..blocks {
        let scale: f32 = 10f32.powf(rng.gen_range(-4.0..4.0));
        let v: Vec<f32> = (0..block_len).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        let t0 = Instant::now();
        let c = compress_values(&v, kappa)?;
        let t1 = Instant::now();
        let back = decompress_values(&c)?;
        venc += (t1 - t0).as_secs_f64();
        vdec += t1.elapsed().as_secs_f64();
        let max = v.iter().fold(0.0f32, |m, x| m.max(x.abs())) as f64;
        if max > 0.0 {
            for (a, b) in v.iter().zip(&back) {
                worst = worst.max((*a as f64 - *b as f64).abs() / max);
            }
        }
    }
    Ok(CodecBench {
        batches,
        batch_size,
        raw_index_bytes: raw,
        compressed_index_bytes: packed,
        index_ratio: raw as f64 / packed.max(1) as f64,
        index_encode_us: enc * 1e6 / batches.max(1) as f64,
        index_decode_us: dec * 1e6 / batches.max(1) as f64,
        value_blocks: blocks,
        block_len,
        value_max_rel_error: worst,
        value_encode_us: venc * 1e6 / blocks as f64,
        value_decode_us: vdec * 1e6 / blocks as f64,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LruBench {
    pub ops: usize,
    pub capacity: usize,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub grow_events_after_warmup: u64,
    pub ops_per_sec: f64,
}

/// Random get/put mix over a key space twice the capacity.
pub fn bench_lru(capacity: usize, ops: usize, dim: usize, seed: u64) -> Result<LruBench> {
    let mut store = LruStore::new(capacity, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = (capacity as u64 * 2).max(1);
    for k in 0..capacity as u64 {
        store.put(k, EmbeddingEntry::zeros(dim))?;
    }
    let warm = store.grow_events();
    let (mut hits, mut misses, mut evictions) = (0, 0, 0);
    let t0 = Instant::now();
    for _ in 0..ops {
        let k = rng.gen_range(0..keys);
        if rng.gen_bool(0.5) {
            if store.get(k).is_some() {
                hits += 1;
            } else {
                misses += 1;
            }
        } else if store.put(k, EmbeddingEntry::zeros(dim))?.is_some() {
            evictions += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64().max(1e-9);
    Ok(LruBench {
        ops,
        capacity,
        hits,
        misses,
        evictions,
        grow_events_after_warmup: store.grow_events() - warm,
        ops_per_sec: ops as f64 / secs,
    })
}
