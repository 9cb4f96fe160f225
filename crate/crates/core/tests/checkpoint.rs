use hybrid_ps::ps::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use hybrid_ps::ps::shard::{EmbeddingOptimizer, PsShard};
use hybrid_ps::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A shard that has seen lookups, updates, evictions and removals.
fn worked_shard(seed: u64, capacity: usize) -> PsShard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = PsShard::new(capacity, 4, seed, EmbeddingOptimizer::Adagrad).unwrap();
    let mut out = [0.0f32; 4];
    for _ in 0..capacity * 20 {
        let id = rng.gen_range(0..capacity as u64 * 3);
        match rng.gen_range(0..10) {
            0..=5 => s.lookup_into(id, &mut out),
            6..=8 => {
                let g: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                s.apply(id, &g, 0.1);
            }
            _ => {
                s.store.remove(id);
            }
        }
    }
    s
}

#[test]
fn save_load_save_is_byte_identical() {
    for seed in 0..20 {
        let shard = worked_shard(seed, 64 + seed as usize * 13);
        let mut first = Vec::new();
        let n = save_checkpoint(&shard, &mut first).unwrap();
        assert_eq!(n as usize, first.len());
        let restored = load_checkpoint(&mut first.as_slice()).unwrap();
        assert_eq!(restored.store.keys_mru(), shard.store.keys_mru());
        for k in shard.store.keys_mru() {
            assert_eq!(restored.store.peek_entry(k), shard.store.peek_entry(k));
        }
        assert_eq!(encode(&restored).unwrap(), first, "seed {seed}");
    }
}

#[test]
fn restored_shard_continues_identically() {
    let a = worked_shard(5, 100);
    let mut b = decode(&encode(&a).unwrap()).unwrap();
    let mut a = a;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut oa, mut ob) = ([0.0f32; 4], [0.0f32; 4]);
    for _ in 0..5_000 {
        let id = rng.gen_range(0..400);
        a.lookup_into(id, &mut oa);
        b.lookup_into(id, &mut ob);
        assert_eq!(oa, ob);
    }
    assert_eq!(encode(&a).unwrap(), encode(&b).unwrap());
}

#[test]
fn every_corrupted_byte_is_reported() {
    let bytes = encode(&worked_shard(3, 16)).unwrap();
    for pos in 0..bytes.len() {
        for bit in [0x01u8, 0x80] {
            let mut bad = bytes.clone();
            bad[pos] ^= bit;
            match decode(&bad) {
                Err(Error::CheckpointCorrupt(_)) => {}
                other => panic!("byte {pos} bit {bit:#x}: {:?}", other.map(|_| ())),
            }
        }
    }
    for cut in 0..bytes.len() {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::CheckpointCorrupt(_))), "cut at {cut}");
    }
}
