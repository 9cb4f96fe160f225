use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{mix64, MixStream, ShardRouter};
use crate::ps::lru::{EmbeddingEntry, LruStore};

/// Adagrad denominator epsilon.
pub const ADAGRAD_EPS: f32 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingOptimizer {
    #[default]
    Adagrad,
    Sgd,
}

impl EmbeddingOptimizer {
    pub fn code(self) -> u8 {
        match self {
            EmbeddingOptimizer::Adagrad => 0,
            EmbeddingOptimizer::Sgd => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EmbeddingOptimizer::Adagrad),
            1 => Some(EmbeddingOptimizer::Sgd),
            _ => None,
        }
    }

    /// Update `w` in place with gradient `g`.
    #[inline]
    pub fn apply(self, w: &mut [f32], acc: &mut [f32], g: &[f32], lr: f32) {
        match self {
            EmbeddingOptimizer::Sgd => {
                for (w, &g) in w.iter_mut().zip(g) {
                    *w -= lr * g;
                }
            }
            EmbeddingOptimizer::Adagrad => {
                for ((w, a), &g) in w.iter_mut().zip(acc.iter_mut()).zip(g) {
                    *a += g * g;
                    *w -= lr * g / (a.sqrt() + ADAGRAD_EPS);
                }
            }
        }
    }
}

/// Deterministic initial value for `id`: uniform in `(-1/sqrt(dim), 1/sqrt(dim))`
/// from a stream seeded by mixing the id with the salt.
pub fn init_vector(id: u64, rng_salt: u64, out: &mut [f32]) {
    let bound = 1.0 / (out.len() as f32).sqrt();
    let mut s = MixStream::new(mix64(id ^ mix64(rng_salt)));
    for v in out.iter_mut() {
        *v = s.next_symmetric() * bound;
    }
}

/// One lock-guarded partition of the embedding table.
#[derive(Clone, Debug)]
pub struct PsShard {
    pub store: LruStore,
    pub rng_salt: u64,
    pub optimizer: EmbeddingOptimizer,
    pub eviction_count: u64,
    pub miss_count: u64,
    /// Keys this shard handled, when op logging is enabled.
    pub op_log: Option<Vec<u64>>,
}

impl PsShard {
    pub fn new(capacity: usize, dim: usize, rng_salt: u64, optimizer: EmbeddingOptimizer) -> Result<Self> {
        Ok(Self {
            store: LruStore::new(capacity, dim)?,
            rng_salt,
            optimizer,
            eviction_count: 0,
            miss_count: 0,
            op_log: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    fn log(&mut self, id: u64) {
        if let Some(log) = &mut self.op_log {
            log.push(id);
        }
    }

    /// Slot for `id`, lazily initialized on a miss.
    fn resolve(&mut self, id: u64) -> usize {
        self.log(id);
        let salt = self.rng_salt;
        let (slot, hit, evicted) = self.store.get_or_insert_with(id, |v, o| {
            init_vector(id, salt, v);
            o.fill(0.0);
        });
        if !hit {
            self.miss_count += 1;
        }
        if evicted.is_some() {
            self.eviction_count += 1;
        }
        slot
    }

    pub fn lookup_into(&mut self, id: u64, out: &mut [f32]) {
        let slot = self.resolve(id);
        out.copy_from_slice(self.store.slot_vector(slot));
    }

    pub fn apply(&mut self, id: u64, grad: &[f32], lr: f32) {
        let slot = self.resolve(id);
        let opt = self.optimizer;
        let (w, acc) = self.store.slot_slices(slot);
        opt.apply(w, acc, grad, lr);
    }

    /// Stored value or the value a lookup would initialize, without touching
    /// recency or inserting.
    pub fn peek_value(&self, id: u64, out: &mut [f32]) {
        match self.store.peek(id) {
            Some(v) => out.copy_from_slice(v),
            None => init_vector(id, self.rng_salt, out),
        }
    }

    pub fn peek_entry(&self, id: u64) -> Option<EmbeddingEntry> {
        self.store.peek_entry(id)
    }
}

/// The shards hosted by one embedding PS instance: global shards
/// `first_shard .. first_shard + shards.len()` of a router over
/// `total_shards`.
#[derive(Debug)]
pub struct ShardSet {
    shards: Vec<Mutex<PsShard>>,
    router: ShardRouter,
    first_shard: usize,
    dim: usize,
}

/// Parameters shared by every shard of a deployment.
#[derive(Clone, Copy, Debug)]
pub struct ShardSpec {
    pub capacity: usize,
    pub dim: usize,
    pub rng_salt: u64,
    pub optimizer: EmbeddingOptimizer,
}

impl ShardSet {
    pub fn new(spec: ShardSpec, total_shards: usize, first_shard: usize, local_shards: usize) -> Result<Self> {
        let router = ShardRouter::new(total_shards)?;
        if local_shards == 0 || first_shard + local_shards > total_shards {
            return Err(Error::Config(format!(
                "shards {first_shard}..{} outside 0..{total_shards}",
                first_shard + local_shards
            )));
        }
        let shards = (0..local_shards)
            .map(|_| PsShard::new(spec.capacity, spec.dim, spec.rng_salt, spec.optimizer).map(Mutex::new))
            .collect::<Result<_>>()?;
        Ok(Self {
            shards,
            router,
            first_shard,
            dim: spec.dim,
        })
    }

    pub fn from_shards(shards: Vec<PsShard>, total_shards: usize, first_shard: usize) -> Result<Self> {
        let dim = shards
            .first()
            .map(PsShard::dim)
            .ok_or_else(|| Error::Config("empty shard set".into()))?;
        if shards.iter().any(|s| s.dim() != dim) {
            return Err(Error::Config("shards disagree on embedding dim".into()));
        }
        Ok(Self {
            router: ShardRouter::new(total_shards)?,
            first_shard,
            dim,
            shards: shards.into_iter().map(Mutex::new).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn router(&self) -> ShardRouter {
        self.router
    }

    pub fn first_shard(&self) -> usize {
        self.first_shard
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, local: usize) -> &Mutex<PsShard> {
        &self.shards[local]
    }

    fn local_of(&self, id: u64) -> Result<usize> {
        let g = self.router.route(id);
        g.checked_sub(self.first_shard)
            .filter(|&l| l < self.shards.len())
            .ok_or_else(|| {
                Error::precondition(format!("id {id} routes to shard {g}, not hosted here"))
            })
    }

    /// Group positions of `ids` by local shard, preserving order.
    fn group_by_shard(&self, ids: &[u64]) -> Result<Vec<Vec<usize>>> {
        let mut groups = vec![Vec::new(); self.shards.len()];
        for (pos, &id) in ids.iter().enumerate() {
            groups[self.local_of(id)?].push(pos);
        }
        Ok(groups)
    }

    /// Resolve every id to its vector (row-major, `ids.len() x dim`); misses
    /// are lazily initialized and inserted. Each shard is locked once.
    pub fn lookup(&self, ids: &[u64]) -> Result<Vec<f32>> {
        let d = self.dim;
        let mut out = vec![0.0; ids.len() * d];
        for (local, positions) in self.group_by_shard(ids)?.into_iter().enumerate() {
            if positions.is_empty() {
                continue;
            }
            let mut shard = self.shards[local].lock();
            for pos in positions {
                shard.lookup_into(ids[pos], &mut out[pos * d..(pos + 1) * d]);
            }
        }
        Ok(out)
    }

    /// Apply one gradient row per id (row-major `ids.len() x dim`), in
    /// order within each shard. Non-finite input is rejected before any
    /// shard is touched.
    pub fn apply_gradients(&self, ids: &[u64], grads: &[f32], lr: f32) -> Result<()> {
        let d = self.dim;
        if grads.len() != ids.len() * d {
            return Err(Error::precondition(format!(
                "{} gradient values for {} ids of dim {d}",
                grads.len(),
                ids.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence("non-finite embedding gradient".into()));
        }
        for (local, positions) in self.group_by_shard(ids)?.into_iter().enumerate() {
            if positions.is_empty() {
                continue;
            }
            let mut shard = self.shards[local].lock();
            for pos in positions {
                shard.apply(ids[pos], &grads[pos * d..(pos + 1) * d], lr);
            }
        }
        Ok(())
    }

    pub fn peek(&self, ids: &[u64]) -> Result<Vec<f32>> {
        let d = self.dim;
        let mut out = vec![0.0; ids.len() * d];
        for (pos, &id) in ids.iter().enumerate() {
            let local = self.local_of(id)?;
            self.shards[local].lock().peek_value(id, &mut out[pos * d..(pos + 1) * d]);
        }
        Ok(out)
    }

    pub fn eviction_count(&self) -> u64 {
        self.shards.iter().map(|s| s.lock().eviction_count).sum()
    }

    pub fn miss_count(&self) -> u64 {
        self.shards.iter().map(|s| s.lock().miss_count).sum()
    }

    pub fn live_entries(&self) -> usize {
        self.shards.iter().map(|s| s.lock().store.len()).sum()
    }

    pub fn enable_op_log(&self) {
        for s in &self.shards {
            s.lock().op_log = Some(Vec::new());
        }
    }
}

/// Library form of the embedding lookup: one vector per id.
pub fn ps_lookup(set: &ShardSet, ids: &[u64]) -> Result<Vec<Vec<f32>>> {
    let flat = set.lookup(ids)?;
    Ok(flat.chunks(set.dim()).map(<[f32]>::to_vec).collect())
}

/// Library form of the embedding update: one gradient per id.
pub fn ps_apply_gradients(set: &ShardSet, grads: &[(u64, Vec<f32>)], lr: f32) -> Result<()> {
    let ids: Vec<u64> = grads.iter().map(|(id, _)| *id).collect();
    if grads.iter().any(|(_, g)| g.len() != set.dim()) {
        return Err(Error::precondition("gradient width != embedding dim"));
    }
    let flat: Vec<f32> = grads.iter().flat_map(|(_, g)| g.iter().copied()).collect();
    set.apply_gradients(&ids, &flat, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(opt: EmbeddingOptimizer) -> ShardSet {
        let spec = ShardSpec {
            capacity: 1024,
            dim: 2,
            rng_salt: 7,
            optimizer: opt,
        };
        ShardSet::new(spec, 4, 0, 4).unwrap()
    }

    #[test]
    fn lookup_is_deterministic_and_seeded() {
        let a = set(EmbeddingOptimizer::Adagrad);
        let b = set(EmbeddingOptimizer::Adagrad);
        let first = ps_lookup(&a, &[42]).unwrap();
        assert_eq!(first, ps_lookup(&a, &[42]).unwrap());
        assert_eq!(first, ps_lookup(&b, &[42]).unwrap());
        let bound = 1.0 / 2f32.sqrt();
        assert!(first[0].iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn zero_gradient_is_noop() {
        let s = set(EmbeddingOptimizer::Adagrad);
        let before = ps_lookup(&s, &[3]).unwrap();
        ps_apply_gradients(&s, &[(3, vec![0.0, 0.0])], 0.5).unwrap();
        assert_eq!(before, ps_lookup(&s, &[3]).unwrap());
        let local = s.local_of(3).unwrap();
        assert_eq!(s.shard(local).lock().peek_entry(3).unwrap().opt_state, vec![0.0, 0.0]);
    }

    #[test]
    fn sgd_arithmetic() {
        let s = set(EmbeddingOptimizer::Sgd);
        let local = s.local_of(5).unwrap();
        s.shard(local)
            .lock()
            .store
            .put(5, EmbeddingEntry { vector: vec![1.0, 1.0], opt_state: vec![0.0, 0.0] })
            .unwrap();
        ps_apply_gradients(&s, &[(5, vec![2.0, 4.0])], 0.5).unwrap();
        assert_eq!(ps_lookup(&s, &[5]).unwrap()[0], vec![0.0, -1.0]);
    }

    #[test]
    fn adagrad_arithmetic() {
        let mut w = [0.25f32];
        let mut acc = [0.0f32];
        EmbeddingOptimizer::Adagrad.apply(&mut w, &mut acc, &[3.0], 0.1);
        assert_eq!(acc, [9.0]);
        assert!((w[0] - (0.25 - 0.1)).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let s = set(EmbeddingOptimizer::Sgd);
        let before = ps_lookup(&s, &[1, 2]).unwrap();
        let err = ps_apply_gradients(&s, &[(1, vec![1.0, 1.0]), (2, vec![f32::INFINITY, 0.0])], 0.1);
        assert!(matches!(err, Err(Error::Divergence(_))));
        assert_eq!(before, ps_lookup(&s, &[1, 2]).unwrap());
    }

    #[test]
    fn missing_id_is_initialized_then_updated() {
        let s = set(EmbeddingOptimizer::Sgd);
        ps_apply_gradients(&s, &[(77, vec![1.0, -1.0])], 0.1).unwrap();
        let mut init = [0.0f32; 2];
        init_vector(77, 7, &mut init);
        let got = ps_lookup(&s, &[77]).unwrap();
        assert!((got[0][0] - (init[0] - 0.1)).abs() < 1e-7);
        assert!((got[0][1] - (init[1] + 0.1)).abs() < 1e-7);
    }

    #[test]
    fn foreign_ids_are_rejected() {
        let spec = ShardSpec { capacity: 8, dim: 2, rng_salt: 0, optimizer: EmbeddingOptimizer::Sgd };
        let half = ShardSet::new(spec, 4, 0, 2).unwrap();
        let foreign = (0..100u64).find(|&id| ShardRouter::new(4).unwrap().route(id) >= 2).unwrap();
        assert!(half.lookup(&[foreign]).is_err());
    }

    #[test]
    fn eviction_then_lookup_reinitializes() {
        let spec = ShardSpec { capacity: 1, dim: 2, rng_salt: 3, optimizer: EmbeddingOptimizer::Sgd };
        let s = ShardSet::new(spec, 1, 0, 1).unwrap();
        let init = ps_lookup(&s, &[10]).unwrap();
        ps_apply_gradients(&s, &[(10, vec![1.0, 1.0])], 1.0).unwrap();
        ps_lookup(&s, &[11]).unwrap();
        assert_eq!(s.eviction_count(), 1);
        assert_eq!(ps_lookup(&s, &[10]).unwrap(), init);
    }
}
