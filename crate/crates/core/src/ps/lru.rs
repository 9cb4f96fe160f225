//! LRU store backed by a hash map of key -> slot index and a fixed array of
//! slots linked by index. Slot storage is struct-of-arrays so that each
//! array can be written to and read from a checkpoint as one flat copy.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Link value meaning "no slot".
pub const NIL: u32 = u32::MAX;

/// One embedding vector together with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingEntry {
    pub vector: Vec<f32>,
    pub opt_state: Vec<f32>,
}

impl EmbeddingEntry {
    pub fn zeros(dim: usize) -> Self {
        Self {
            vector: vec![0.0; dim],
            opt_state: vec![0.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LruStore {
    pub(crate) dim: usize,
    pub(crate) capacity: usize,
    pub(crate) prev: Vec<u32>,
    pub(crate) next: Vec<u32>,
    pub(crate) keys: Vec<u64>,
    pub(crate) values: Vec<f32>,
    pub(crate) opt: Vec<f32>,
    pub(crate) index: HashMap<u64, u32>,
    pub(crate) head: u32,
    pub(crate) tail: u32,
    pub(crate) free: Vec<u32>,
    grow_events: u64,
}

impl LruStore {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("LRU capacity must be positive".into()));
        }
        if capacity >= NIL as usize {
            return Err(Error::Config(format!("LRU capacity {capacity} too large")));
        }
        if dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        Ok(Self {
            dim,
            capacity,
            prev: Vec::with_capacity(capacity),
            next: Vec::with_capacity(capacity),
            keys: Vec::with_capacity(capacity),
            values: Vec::with_capacity(capacity * dim),
            opt: Vec::with_capacity(capacity * dim),
            index: HashMap::with_capacity(capacity),
            head: NIL,
            tail: NIL,
            free: Vec::new(),
            grow_events: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Number of slots ever materialized in the array.
    pub fn high_water_mark(&self) -> usize {
        self.keys.len()
    }

    /// How many times any slot array had to reallocate.
    pub fn grow_events(&self) -> u64 {
        self.grow_events
    }

    pub fn contains(&self, key: u64) -> bool {
        self.index.contains_key(&key)
    }

    /// Look up `key`, promoting it to most-recently-used on a hit.
    pub fn get(&mut self, key: u64) -> Option<EmbeddingEntry> {
        let slot = self.touch(key)?;
        Some(self.entry_at(slot))
    }

    /// Mutable access to vector and optimizer state, promoting to MRU.
    pub fn get_mut(&mut self, key: u64) -> Option<(&mut [f32], &mut [f32])> {
        let slot = self.touch(key)? as usize;
        let d = self.dim;
        Some((
            &mut self.values[slot * d..(slot + 1) * d],
            &mut self.opt[slot * d..(slot + 1) * d],
        ))
    }

    /// Read without changing recency.
    pub fn peek(&self, key: u64) -> Option<&[f32]> {
        let slot = *self.index.get(&key)? as usize;
        Some(&self.values[slot * self.dim..(slot + 1) * self.dim])
    }

    pub fn peek_entry(&self, key: u64) -> Option<EmbeddingEntry> {
        self.index.get(&key).map(|&s| self.entry_at(s))
    }

    /// Insert or overwrite `key` as most-recently-used. Returns the evicted
    /// least-recently-used entry when the store was full.
    pub fn put(&mut self, key: u64, entry: EmbeddingEntry) -> Result<Option<(u64, EmbeddingEntry)>> {
        if entry.vector.len() != self.dim || entry.opt_state.len() != self.dim {
            return Err(Error::precondition(format!(
                "entry width {}/{} != dim {}",
                entry.vector.len(),
                entry.opt_state.len(),
                self.dim
            )));
        }
        let (slot, evicted) = self.slot_for(key);
        let d = self.dim;
        let s = slot as usize;
        self.values[s * d..(s + 1) * d].copy_from_slice(&entry.vector);
        self.opt[s * d..(s + 1) * d].copy_from_slice(&entry.opt_state);
        Ok(evicted)
    }

    /// Return the slot for `key`, creating it with `init` on a miss. The key
    /// ends up most-recently-used either way.
    pub(crate) fn get_or_insert_with(
        &mut self,
        key: u64,
        init: impl FnOnce(&mut [f32], &mut [f32]),
    ) -> (usize, bool, Option<(u64, EmbeddingEntry)>) {
        if let Some(slot) = self.touch(key) {
            return (slot as usize, true, None);
        }
        let (slot, evicted) = self.slot_for(key);
        let d = self.dim;
        let s = slot as usize;
        let (v, o) = (
            &mut self.values[s * d..(s + 1) * d],
            &mut self.opt[s * d..(s + 1) * d],
        );
        init(v, o);
        (s, false, evicted)
    }

    pub(crate) fn slot_slices(&mut self, slot: usize) -> (&mut [f32], &mut [f32]) {
        let d = self.dim;
        (
            &mut self.values[slot * d..(slot + 1) * d],
            &mut self.opt[slot * d..(slot + 1) * d],
        )
    }

    pub(crate) fn slot_vector(&self, slot: usize) -> &[f32] {
        &self.values[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn remove(&mut self, key: u64) -> Option<EmbeddingEntry> {
        let slot = self.index.remove(&key)?;
        self.unlink(slot);
        let entry = self.entry_at(slot);
        self.free.push(slot);
        Some(entry)
    }

    /// Keys from most- to least-recently-used.
    pub fn keys_mru(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.len());
        let mut cur = self.head;
        while cur != NIL && out.len() <= self.len() {
            out.push(self.keys[cur as usize]);
            cur = self.next[cur as usize];
        }
        out
    }

    /// Key that the next over-capacity insert would evict.
    pub fn lru_key(&self) -> Option<u64> {
        (self.tail != NIL).then(|| self.keys[self.tail as usize])
    }

    /// Verify every structural invariant of the store.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Internal(m));
        let hw = self.keys.len();
        if self.prev.len() != hw || self.next.len() != hw {
            return bad("link arrays disagree with key array".into());
        }
        if self.values.len() != hw * self.dim || self.opt.len() != hw * self.dim {
            return bad("value arrays disagree with slot count".into());
        }
        if hw > self.capacity || self.index.len() > self.capacity {
            return bad(format!("{hw} slots exceed capacity {}", self.capacity));
        }
        if self.index.len() + self.free.len() != hw {
            return bad(format!(
                "live {} + free {} != high water mark {hw}",
                self.index.len(),
                self.free.len()
            ));
        }
        let mut seen = vec![false; hw];
        for &f in &self.free {
            if f as usize >= hw || std::mem::replace(&mut seen[f as usize], true) {
                return bad(format!("free slot {f} out of range or repeated"));
            }
        }
        for (&k, &s) in &self.index {
            if s as usize >= hw || seen[s as usize] || self.keys[s as usize] != k {
                return bad(format!("index entry {k} -> {s} inconsistent"));
            }
        }
        let mut count = 0usize;
        let mut prev = NIL;
        let mut cur = self.head;
        while cur != NIL {
            if cur as usize >= hw || seen[cur as usize] || count >= self.index.len() {
                return bad("recency list visits a free, repeated or foreign slot".into());
            }
            if self.prev[cur as usize] != prev {
                return bad(format!("prev link of slot {cur} broken"));
            }
            if self.index.get(&self.keys[cur as usize]) != Some(&cur) {
                return bad(format!("slot {cur} on the list but not indexed"));
            }
            seen[cur as usize] = true;
            count += 1;
            prev = cur;
            cur = self.next[cur as usize];
        }
        if prev != self.tail || count != self.index.len() {
            return bad("recency list does not cover every live slot".into());
        }
        if self.values.iter().chain(&self.opt).any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }

    fn entry_at(&self, slot: u32) -> EmbeddingEntry {
        let s = slot as usize;
        let d = self.dim;
        EmbeddingEntry {
            vector: self.values[s * d..(s + 1) * d].to_vec(),
            opt_state: self.opt[s * d..(s + 1) * d].to_vec(),
        }
    }

    fn touch(&mut self, key: u64) -> Option<u32> {
        let slot = *self.index.get(&key)?;
        if self.head != slot {
            self.unlink(slot);
            self.push_front(slot);
        }
        Some(slot)
    }

    /// Slot for `key` placed at the head; on a new key the slot comes from
    /// the free list, fresh array space, or eviction of the tail.
    fn slot_for(&mut self, key: u64) -> (u32, Option<(u64, EmbeddingEntry)>) {
        if let Some(slot) = self.touch(key) {
            return (slot, None);
        }
        let mut evicted = None;
        if self.index.len() == self.capacity {
            let victim = self.tail;
            let vkey = self.keys[victim as usize];
            evicted = Some((vkey, self.entry_at(victim)));
            self.index.remove(&vkey);
            self.unlink(victim);
            self.free.push(victim);
        }
        let slot = match self.free.pop() {
            Some(s) => s,
            None => self.grow(),
        };
        self.keys[slot as usize] = key;
        self.index.insert(key, slot);
        self.push_front(slot);
        (slot, evicted)
    }

    fn grow(&mut self) -> u32 {
        let caps = (
            self.prev.capacity(),
            self.keys.capacity(),
            self.values.capacity(),
        );
        let slot = self.keys.len() as u32;
        self.prev.push(NIL);
        self.next.push(NIL);
        self.keys.push(0);
        self.values.extend(std::iter::repeat_n(0.0, self.dim));
        self.opt.extend(std::iter::repeat_n(0.0, self.dim));
        if caps != (self.prev.capacity(), self.keys.capacity(), self.values.capacity()) {
            self.grow_events += 1;
        }
        slot
    }

    fn unlink(&mut self, slot: u32) {
        let (p, n) = (self.prev[slot as usize], self.next[slot as usize]);
        if p != NIL {
            self.next[p as usize] = n;
        } else {
            self.head = n;
        }
        if n != NIL {
            self.prev[n as usize] = p;
        } else {
            self.tail = p;
        }
        self.prev[slot as usize] = NIL;
        self.next[slot as usize] = NIL;
    }

    fn push_front(&mut self, slot: u32) {
        self.prev[slot as usize] = NIL;
        self.next[slot as usize] = self.head;
        if self.head != NIL {
            self.prev[self.head as usize] = slot;
        }
        self.head = slot;
        if self.tail == NIL {
            self.tail = slot;
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        dim: usize,
        capacity: usize,
        prev: Vec<u32>,
        next: Vec<u32>,
        keys: Vec<u64>,
        values: Vec<f32>,
        opt: Vec<f32>,
        index: HashMap<u64, u32>,
        head: u32,
        tail: u32,
        free: Vec<u32>,
    ) -> Result<Self> {
        let mut store = Self::new(capacity, dim)
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        store.prev.extend_from_slice(&prev);
        store.next.extend_from_slice(&next);
        store.keys.extend_from_slice(&keys);
        store.values.extend_from_slice(&values);
        store.opt.extend_from_slice(&opt);
        store.index = index;
        store.head = head;
        store.tail = tail;
        store.free = free;
        store
            .check_invariants()
            .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        Ok(store)
    }
}
