//! Communication compression.
//!
//! Index codec: a batch of per-sample id lists becomes, per feature group,
//! the sorted unique ids plus for each one the 16-bit sample positions that
//! contain it. Value codec: each block is scaled so its largest magnitude
//! equals `kappa`, then stored as binary16.

use half::f16;

use crate::error::{Error, Result};
use crate::ids::IdFeatures;

pub const DEFAULT_KAPPA: f32 = 1024.0;
/// Largest batch whose sample positions fit in a `u16`.
pub const MAX_BATCH: usize = u16::MAX as usize;

/// One feature group of a compressed batch in CSR form: `unique_ids[i]` is
/// contained in samples `postings[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupPostings {
    pub unique_ids: Vec<u64>,
    pub offsets: Vec<u32>,
    pub postings: Vec<u16>,
}

impl GroupPostings {
    pub fn postings_of(&self, i: usize) -> &[u16] {
        &self.postings[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CompressedIndices {
    pub batch_size: usize,
    pub groups: Vec<GroupPostings>,
}

impl CompressedIndices {
    /// Bytes this structure occupies on the wire, section length prefixes
    /// excluded: per group 8 bytes per unique id, 4 per count, 2 per posting.
    pub fn payload_bytes(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.unique_ids.len() * 12 + g.postings.len() * 2)
            .sum()
    }
}

/// Uncompressed wire size of the same batch (8 bytes per id occurrence).
pub fn raw_index_bytes(batch: &[IdFeatures]) -> usize {
    batch.iter().map(|s| s.id_count() * 8).sum()
}

pub fn compress_indices(batch: &[IdFeatures]) -> Result<CompressedIndices> {
    if batch.len() > MAX_BATCH {
        return Err(Error::precondition(format!(
            "batch of {} samples exceeds the 16-bit index limit {MAX_BATCH}",
            batch.len()
        )));
    }
    let Some(first) = batch.first() else {
        return Ok(CompressedIndices::default());
    };
    let group_count = first.group_count();
    if let Some(bad) = batch.iter().position(|s| s.group_count() != group_count) {
        return Err(Error::precondition(format!(
            "sample {bad} has {} groups, expected {group_count}",
            batch[bad].group_count()
        )));
    }
    let mut groups = Vec::with_capacity(group_count);
    let mut pairs: Vec<(u64, u16)> = Vec::new();
    for g in 0..group_count {
        pairs.clear();
        for (pos, sample) in batch.iter().enumerate() {
            pairs.extend(sample.groups[g].iter().map(|&id| (id, pos as u16)));
        }
        pairs.sort_unstable();
        let mut out = GroupPostings {
            unique_ids: Vec::new(),
            offsets: vec![0],
            postings: Vec::with_capacity(pairs.len()),
        };
        for &(id, pos) in &pairs {
            if out.unique_ids.last() != Some(&id) {
                if !out.unique_ids.is_empty() {
                    out.offsets.push(out.postings.len() as u32);
                }
                out.unique_ids.push(id);
            }
            out.postings.push(pos);
        }
        if !out.unique_ids.is_empty() {
            out.offsets.push(out.postings.len() as u32);
        }
        groups.push(out);
    }
    Ok(CompressedIndices {
        batch_size: batch.len(),
        groups,
    })
}

/// Inverse of [`compress_indices`]; ids within each sample group come back
/// in ascending order, duplicates preserved.
pub fn decompress_indices(c: &CompressedIndices, batch_size: usize) -> Result<Vec<IdFeatures>> {
    let mut out = vec![IdFeatures::new(vec![Vec::new(); c.groups.len()]); batch_size];
    for (g, group) in c.groups.iter().enumerate() {
        let n = group.unique_ids.len();
        let well_formed = if n == 0 {
            group.postings.is_empty() && group.offsets.len() <= 1
        } else {
            group.offsets.len() == n + 1
                && group.offsets[0] == 0
                && group.offsets[n] as usize == group.postings.len()
                && group.offsets.windows(2).all(|w| w[0] <= w[1])
        };
        if !well_formed {
            return Err(Error::CorruptPayload(format!("group {g}: posting offsets are inconsistent")));
        }
        if group.unique_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::CorruptPayload(format!("group {g}: unique ids not strictly ascending")));
        }
        for (i, &id) in group.unique_ids.iter().enumerate() {
            for &pos in group.postings_of(i) {
                let pos = pos as usize;
                if pos >= batch_size {
                    return Err(Error::CorruptPayload(format!(
                        "group {g}: posting {pos} outside batch of {batch_size}"
                    )));
                }
                // Unique ids are visited in ascending order, so each sample's
                // list is built already sorted.
                out[pos].groups[g].push(id);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedBlock {
    pub scale: f32,
    /// binary16 bit patterns.
    pub payload: Vec<u16>,
}

impl CompressedBlock {
    pub fn block_len(&self) -> usize {
        self.payload.len()
    }
}

fn block_scale(v: &[f32], kappa: f32) -> f32 {
    let max = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    if max == 0.0 {
        1.0
    } else {
        kappa / max
    }
}

fn check_kappa(kappa: f32) -> Result<()> {
    if !(kappa > 0.0 && kappa <= 32768.0) {
        return Err(Error::precondition(format!("kappa {kappa} outside (0, 32768]")));
    }
    Ok(())
}

pub fn compress_values(v: &[f32], kappa: f32) -> Result<CompressedBlock> {
    check_kappa(kappa)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::precondition("value block contains a non-finite entry"));
    }
    let scale = block_scale(v, kappa);
    let payload = v.iter().map(|&x| f16::from_f32(x * scale).to_bits()).collect();
    Ok(CompressedBlock { scale, payload })
}

pub fn decompress_values(c: &CompressedBlock) -> Result<Vec<f32>> {
    let mut out = vec![0.0; c.payload.len()];
    decompress_into(c.scale, &c.payload, &mut out)?;
    Ok(out)
}

fn decompress_into(scale: f32, payload: &[u16], out: &mut [f32]) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::CorruptPayload(format!("block scale {scale} is not a positive finite number")));
    }
    for (o, &bits) in out.iter_mut().zip(payload) {
        let h = f16::from_bits(bits);
        if !h.is_finite() {
            return Err(Error::CorruptPayload("binary16 payload holds a non-finite value".into()));
        }
        *o = h.to_f32() / scale;
    }
    Ok(())
}

/// Compress a flat buffer as consecutive blocks of `block_len` values.
pub fn compress_blocks(values: &[f32], block_len: usize, kappa: f32) -> Result<(Vec<f32>, Vec<u16>)> {
    check_kappa(kappa)?;
    if block_len == 0 || !values.len().is_multiple_of(block_len) {
        return Err(Error::precondition(format!(
            "{} values do not split into blocks of {block_len}",
            values.len()
        )));
    }
    let mut scales = Vec::with_capacity(values.len() / block_len);
    let mut payload = Vec::with_capacity(values.len());
    for block in values.chunks_exact(block_len) {
        let c = compress_values(block, kappa)?;
        scales.push(c.scale);
        payload.extend_from_slice(&c.payload);
    }
    Ok((scales, payload))
}

pub fn decompress_blocks(scales: &[f32], payload: &[u16]) -> Result<Vec<f32>> {
    if scales.is_empty() {
        return if payload.is_empty() {
            Ok(Vec::new())
        } else {
            Err(Error::CorruptPayload("payload without block scales".into()))
        };
    }
    if !payload.len().is_multiple_of(scales.len()) {
        return Err(Error::CorruptPayload(format!(
            "{} payload values do not split into {} blocks",
            payload.len(),
            scales.len()
        )));
    }
    let block_len = payload.len() / scales.len();
    let mut out = vec![0.0; payload.len()];
    if block_len > 0 {
        for ((&scale, p), o) in scales.iter().zip(payload.chunks_exact(block_len)).zip(out.chunks_exact_mut(block_len)) {
            decompress_into(scale, p, o)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_group(samples: &[&[u64]]) -> Vec<IdFeatures> {
        samples.iter().map(|s| IdFeatures::new(vec![s.to_vec()])).collect()
    }

    #[test]
    fn index_example() {
        let batch = one_group(&[&[5, 7], &[7]]);
        let c = compress_indices(&batch).unwrap();
        let g = &c.groups[0];
        assert_eq!(g.unique_ids, vec![5, 7]);
        assert_eq!(g.postings_of(0), &[0]);
        assert_eq!(g.postings_of(1), &[0, 1]);
        assert_eq!(decompress_indices(&c, 2).unwrap(), batch);
    }

    #[test]
    fn empty_batch() {
        let c = compress_indices(&[]).unwrap();
        assert!(c.groups.is_empty());
        assert!(decompress_indices(&c, 0).unwrap().is_empty());
    }

    #[test]
    fn shared_id_is_smaller_than_raw() {
        let batch = one_group(&[&[99u64][..]; 100]);
        let c = compress_indices(&batch).unwrap();
        assert_eq!(c.payload_bytes(), 8 + 4 + 100 * 2);
        assert!(raw_index_bytes(&batch) >= 3 * c.payload_bytes());
    }

    #[test]
    fn oversized_batch_rejected() {
        let batch = vec![IdFeatures::new(vec![vec![1]]); MAX_BATCH + 1];
        assert!(matches!(compress_indices(&batch), Err(Error::Precondition(_))));
        assert!(compress_indices(&batch[..MAX_BATCH]).is_ok());
    }

    #[test]
    fn posting_outside_batch_is_corrupt() {
        let c = compress_indices(&one_group(&[&[1], &[2]])).unwrap();
        assert!(matches!(decompress_indices(&c, 1), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn duplicates_and_order_canonicalized() {
        let batch = one_group(&[&[9, 3, 9]]);
        let back = decompress_indices(&compress_indices(&batch).unwrap(), 1).unwrap();
        assert_eq!(back[0].groups[0], vec![3, 9, 9]);
    }

    #[test]
    fn value_examples() {
        let z = compress_values(&[0.0; 4], DEFAULT_KAPPA).unwrap();
        assert_eq!(z.scale, 1.0);
        assert_eq!(decompress_values(&z).unwrap(), vec![0.0; 4]);

        let c = compress_values(&[1.0, -2.0, 4.0], DEFAULT_KAPPA).unwrap();
        let scaled: Vec<f32> = c.payload.iter().map(|&b| f16::from_bits(b).to_f32()).collect();
        assert_eq!(scaled, vec![256.0, -512.0, 1024.0]);
        assert_eq!(decompress_values(&c).unwrap(), vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn non_finite_rejected_both_ways() {
        assert!(matches!(compress_values(&[f32::NAN], 1024.0), Err(Error::Precondition(_))));
        let bad = CompressedBlock { scale: 1.0, payload: vec![f16::INFINITY.to_bits()] };
        assert!(matches!(decompress_values(&bad), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn blocks_roundtrip_matches_single() {
        let v: Vec<f32> = (0..24).map(|i| (i as f32 - 11.5) * 0.37).collect();
        let (scales, payload) = compress_blocks(&v, 8, DEFAULT_KAPPA).unwrap();
        let back = decompress_blocks(&scales, &payload).unwrap();
        for (chunk, out) in v.chunks(8).zip(back.chunks(8)) {
            assert_eq!(decompress_values(&compress_values(chunk, DEFAULT_KAPPA).unwrap()).unwrap(), out);
        }
    }
}
