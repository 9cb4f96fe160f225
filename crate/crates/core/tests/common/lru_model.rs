//! LRU store against an independent ordered-map model.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use hybrid_ps::ps::lru::{EmbeddingEntry, LruStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Recency is a global tick; the smallest live tick is least recent.
#[derive(Default)]
struct Model {
    capacity: usize,
    tick: u64,
    by_key: HashMap<u64, (u64, f32)>,
    by_tick: BTreeMap<u64, u64>,
}

impl Model {
    fn touch(&mut self, key: u64, value: f32) {
        self.tick += 1;
        if let Some((old, _)) = self.by_key.insert(key, (self.tick, value)) {
            self.by_tick.remove(&old);
        }
        self.by_tick.insert(self.tick, key);
    }

    fn get(&mut self, key: u64) -> Option<f32> {
        let (_, v) = *self.by_key.get(&key)?;
        self.touch(key, v);
        Some(v)
    }

    fn put(&mut self, key: u64, value: f32) -> Option<(u64, f32)> {
        let mut evicted = None;
        if !self.by_key.contains_key(&key) && self.by_key.len() == self.capacity {
            let (&t, &victim) = self.by_tick.iter().next().unwrap();
            self.by_tick.remove(&t);
            evicted = Some((victim, self.by_key.remove(&victim).unwrap().1));
        }
        self.touch(key, value);
        evicted
    }

    fn remove(&mut self, key: u64) -> Option<f32> {
        let (t, v) = self.by_key.remove(&key)?;
        self.by_tick.remove(&t);
        Some(v)
    }

    fn keys_mru(&self) -> Vec<u64> {
        self.by_tick.values().rev().copied().collect()
    }
}

fn entry(v: f32) -> EmbeddingEntry {
    EmbeddingEntry {
        vector: vec![v, v + 1.0],
        opt_state: vec![-v, 0.5],
    }
}

#[derive(Debug, Default, PartialEq)]
struct Tally {
    hits: u64,
    misses: u64,
    evictions: u64,
}

/// `seeds` random sequences of `ops` operations each.
pub fn check_sequences(seeds: u64, ops: u32) -> Result<(), String> {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let capacity = rng.gen_range(1..=512);
        let keys = capacity as u64 * 2 + 1;
        let mut store = LruStore::new(capacity, 2).unwrap();
        let mut model = Model { capacity, ..Model::default() };
        let (mut ours, mut theirs) = (Tally::default(), Tally::default());
        let mut warm_grow = None;
        for op in 0..ops {
            let key = rng.gen_range(0..keys);
            match rng.gen_range(0..10) {
                0..=4 => {
                    let got = store.get(key);
                    let want = model.get(key);
                    if got != want.map(entry) {
                        return Err(format!("seed {seed} op {op}: get {key} returned {got:?}, model {want:?}"));
                    }
                    let t = if got.is_some() { &mut ours.hits } else { &mut ours.misses };
                    *t += 1;
                    let t = if want.is_some() { &mut theirs.hits } else { &mut theirs.misses };
                    *t += 1;
                }
                5..=8 => {
                    let v = op as f32;
                    let got = store.put(key, entry(v)).unwrap();
                    let want = model.put(key, v);
                    if got != want.map(|(k, v)| (k, entry(v))) {
                        return Err(format!("seed {seed} op {op}: put {key} evicted {got:?}, model {want:?}"));
                    }
                    ours.evictions += got.is_some() as u64;
                    theirs.evictions += want.is_some() as u64;
                }
                _ => {
                    if store.remove(key) != model.remove(key).map(entry) {
                        return Err(format!("seed {seed} op {op}: remove {key} disagrees"));
                    }
                }
            }
            if warm_grow.is_none() && store.len() == capacity {
                warm_grow = Some(store.grow_events());
            }
        }
        if ours != theirs {
            return Err(format!("seed {seed}: tallies {ours:?} vs model {theirs:?}"));
        }
        if store.keys_mru() != model.keys_mru() {
            return Err(format!("seed {seed}: final recency order differs"));
        }
        for k in model.keys_mru() {
            if store.peek_entry(k) != Some(entry(model.by_key[&k].1)) {
                return Err(format!("seed {seed}: final value of {k} differs"));
            }
        }
        store.check_invariants().map_err(|e| format!("seed {seed}: {e}"))?;
        if let Some(g) = warm_grow {
            if store.grow_events() != g {
                return Err(format!("seed {seed}: arrays grew after warm-up"));
            }
        }
    }
    Ok(())
}

/// Fill to capacity, then `ops` mixed operations must not grow any array.
pub fn check_no_growth(ops: usize) -> Result<(), String> {
    let capacity = 4096;
    let mut store = LruStore::new(capacity, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for k in 0..capacity as u64 {
        store.put(k, EmbeddingEntry::zeros(8)).unwrap();
    }
    let grown = store.grow_events();
    let hwm = store.high_water_mark();
    for _ in 0..ops {
        let k = rng.gen_range(0..3 * capacity as u64);
        if rng.gen_bool(0.3) {
            store.remove(k);
        } else if store.get(k).is_none() {
            store.put(k, EmbeddingEntry::zeros(8)).unwrap();
        }
    }
    if store.grow_events() != grown || store.high_water_mark() != hwm || store.len() > capacity {
        return Err(format!(
            "grow events {} -> {}, high water {hwm} -> {}",
            grown,
            store.grow_events(),
            store.high_water_mark()
        ));
    }
    Ok(())
}
