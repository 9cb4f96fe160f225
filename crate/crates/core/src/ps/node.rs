//! PS node service: a group of shards behind one endpoint. Lookups are
//! answered immediately; gradients are staged per training step and applied
//! when the step clock commits that step, in a fixed key order.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::error::{Error, Result};
use crate::ps::checkpoint;
use crate::ps::shard::{PsShard, ShardSet, ShardSpec};
use crate::staleness::StalenessTracker;
use crate::wire::msg::{encode_ack, encode_error, Message, PsValues};
use crate::wire::transport::Inbox;

#[derive(Clone, Debug)]
pub struct PsNodeConfig {
    pub node_index: usize,
    pub spec: ShardSpec,
    pub total_shards: usize,
    pub first_shard: usize,
    pub local_shards: usize,
    /// Value codec for lookup replies.
    pub reply_kappa: Option<f32>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Default)]
struct StagedStep {
    keys: Vec<u64>,
    ids: Vec<u64>,
    read_versions: Vec<u32>,
    grads: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct NodeCheckpoint {
    pub step: u64,
    pub shards: Vec<Vec<u8>>,
}

pub struct PsNode {
    cfg: PsNodeConfig,
    shards: RwLock<ShardSet>,
    staged: Mutex<BTreeMap<u64, StagedStep>>,
    tracker: Arc<StalenessTracker>,
    checkpoint: Mutex<Option<NodeCheckpoint>>,
    applied: AtomicU64,
}

impl PsNode {
    pub fn new(cfg: PsNodeConfig, tracker: Arc<StalenessTracker>) -> Result<Arc<Self>> {
        let set = ShardSet::new(cfg.spec, cfg.total_shards, cfg.first_shard, cfg.local_shards)?;
        Ok(Arc::new(Self {
            cfg,
            shards: RwLock::new(set),
            staged: Mutex::new(BTreeMap::new()),
            tracker,
            checkpoint: Mutex::new(None),
            applied: AtomicU64::new(0),
        }))
    }

    pub fn config(&self) -> &PsNodeConfig {
        &self.cfg
    }

    pub fn serve(self: Arc<Self>, inbox: Inbox) {
        for req in inbox {
            let reply = self.handle(&req.frame);
            req.responder.respond(reply);
        }
    }

    /// Handle one request frame; failures become error frames.
    pub fn handle(&self, frame: &[u8]) -> Vec<u8> {
        self.dispatch(frame).unwrap_or_else(|e| encode_error(&e))
    }

    fn dispatch(&self, frame: &[u8]) -> Result<Vec<u8>> {
        match Message::decode_bytes(frame.to_vec())? {
            Message::PsLookup(m) => {
                let set = self.shards.read();
                let values = if m.peek { set.peek(&m.ids)? } else { set.lookup(&m.ids)? };
                let versions = if m.peek {
                    m.ids.iter().map(|&id| self.tracker.version(id)).collect()
                } else {
                    self.tracker.read(&m.ids)
                };
                PsValues {
                    dim: set.dim(),
                    values,
                    versions,
                }
                .encode(self.cfg.reply_kappa)
            }
            Message::PsStage(m) => {
                if m.dim != self.cfg.spec.dim {
                    return Err(Error::protocol(0, format!("staged gradient dim {} != {}", m.dim, self.cfg.spec.dim)));
                }
                let n = m.ids.len();
                let mut staged = self.staged.lock();
                let s = staged.entry(m.step).or_default();
                s.keys.extend_from_slice(&m.order_keys);
                s.ids.extend_from_slice(&m.ids);
                s.read_versions.extend_from_slice(&m.read_versions);
                s.grads.extend_from_slice(&m.grads);
                Ok(encode_ack(&[n as u64]))
            }
            Message::PsCommit(c) => {
                let (applied, max_delay) = self.commit(c.step, c.lr)?;
                Ok(encode_ack(&[applied, max_delay]))
            }
            other => Err(Error::protocol(0, format!("PS node cannot handle {other:?}"))),
        }
    }

    /// Apply the gradients staged for `step` in ascending order-key order.
    pub fn commit(&self, step: u64, lr: f32) -> Result<(u64, u64)> {
        let Some(s) = self.staged.lock().remove(&step) else {
            return Ok((0, 0));
        };
        let d = self.cfg.spec.dim;
        let mut order: Vec<usize> = (0..s.ids.len()).collect();
        order.sort_by_key(|&i| s.keys[i]);
        let ids: Vec<u64> = order.iter().map(|&i| s.ids[i]).collect();
        let rv: Vec<u32> = order.iter().map(|&i| s.read_versions[i]).collect();
        let mut grads = Vec::with_capacity(s.grads.len());
        for &i in &order {
            grads.extend_from_slice(&s.grads[i * d..(i + 1) * d]);
        }
        self.shards.read().apply_gradients(&ids, &grads, lr)?;
        let stats = self.tracker.commit(step, &ids, &rv)?;
        self.applied.fetch_add(ids.len() as u64, Ordering::Relaxed);
        Ok((ids.len() as u64, stats.max))
    }

    fn shard_path(&self, local: usize) -> Option<PathBuf> {
        self.cfg
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("ps{}-shard{}.hps", self.cfg.node_index, self.cfg.first_shard + local)))
    }

    /// Snapshot every local shard; each shard is held locked while it is
    /// serialized. Returns total bytes.
    pub fn save_checkpoint(&self, step: u64) -> Result<u64> {
        let set = self.shards.read();
        let mut shards = Vec::with_capacity(set.shard_count());
        for local in 0..set.shard_count() {
            let bytes = checkpoint::encode(&set.shard(local).lock())?;
            if let Some(path) = self.shard_path(local) {
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir)?;
                }
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, &bytes)?;
                fs::rename(&tmp, &path)?;
            }
            shards.push(bytes);
        }
        let total = shards.iter().map(|b| b.len() as u64).sum();
        *self.checkpoint.lock() = Some(NodeCheckpoint { step, shards });
        Ok(total)
    }

    pub fn last_checkpoint_step(&self) -> Option<u64> {
        self.checkpoint.lock().as_ref().map(|c| c.step)
    }

    fn load_shards(&self) -> Result<Vec<PsShard>> {
        let ck = self.checkpoint.lock();
        let Some(ck) = ck.as_ref() else {
            return Err(Error::Unrecoverable(format!(
                "PS node {} has no checkpoint to recover from",
                self.cfg.node_index
            )));
        };
        (0..ck.shards.len())
            .map(|local| match self.shard_path(local) {
                Some(path) => checkpoint::decode(&fs::read(path)?),
                None => checkpoint::decode(&ck.shards[local]),
            })
            .collect()
    }

    /// Simulated process loss: in-memory shards and staged gradients are
    /// discarded and the node restarts from its last checkpoint.
    pub fn crash_and_recover(&self) -> Result<()> {
        let restored = self.load_shards()?;
        let mut set = self.shards.write();
        *set = ShardSet::from_shards(restored, self.cfg.total_shards, self.cfg.first_shard)?;
        self.staged.lock().clear();
        Ok(())
    }

    /// Current values without touching recency.
    pub fn probe(&self, ids: &[u64]) -> Result<Vec<f32>> {
        self.shards.read().peek(ids)
    }

    /// Values as stored in the last checkpoint, decoded independently of
    /// the live shards.
    pub fn checkpoint_probe(&self, ids: &[u64]) -> Result<Vec<f32>> {
        let set = ShardSet::from_shards(self.load_shards()?, self.cfg.total_shards, self.cfg.first_shard)?;
        set.peek(ids)
    }

    pub fn hosts(&self, id: u64) -> bool {
        let g = self.shards.read().router().route(id);
        g >= self.cfg.first_shard && g < self.cfg.first_shard + self.cfg.local_shards
    }

    pub fn eviction_count(&self) -> u64 {
        self.shards.read().eviction_count()
    }

    pub fn miss_count(&self) -> u64 {
        self.shards.read().miss_count()
    }

    pub fn live_entries(&self) -> usize {
        self.shards.read().live_entries()
    }

    pub fn applied_count(&self) -> u64 {
        self.applied.load(Ordering::Relaxed)
    }

    pub fn with_shards<R>(&self, f: impl FnOnce(&ShardSet) -> R) -> R {
        f(&self.shards.read())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ps::shard::EmbeddingOptimizer;
    use crate::wire::msg::{PsCommit, PsLookup, PsStage};

    fn node() -> Arc<PsNode> {
        let cfg = PsNodeConfig {
            node_index: 0,
            spec: ShardSpec {
                capacity: 256,
                dim: 2,
                rng_salt: 5,
                optimizer: EmbeddingOptimizer::Sgd,
            },
            total_shards: 1,
            first_shard: 0,
            local_shards: 1,
            reply_kappa: None,
            checkpoint_dir: None,
        };
        PsNode::new(cfg, Arc::new(StalenessTracker::new())).unwrap()
    }

    fn lookup(n: &PsNode, ids: &[u64]) -> PsValues {
        match Message::decode_bytes(n.handle(&PsLookup { ids: ids.to_vec(), peek: false }.encode())).unwrap() {
            Message::PsValues(v) => v,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn staged_gradients_apply_only_on_commit_in_key_order() {
        let n = node();
        let before = lookup(&n, &[1]).values;
        let stage = |key, g: f32| {
            n.handle(
                &PsStage {
                    step: 0,
                    dim: 2,
                    order_keys: vec![key],
                    ids: vec![1],
                    grads: vec![g, 0.0],
                    read_versions: vec![0],
                }
                .encode(None)
                .unwrap(),
            )
        };
        stage(2, 1.0);
        stage(1, 3.0);
        assert_eq!(lookup(&n, &[1]).values, before);
        n.handle(&PsCommit { step: 0, lr: 0.5 }.encode());
        let after = lookup(&n, &[1]);
        assert_eq!(after.values[0], before[0] - 0.5 * 3.0 - 0.5 * 1.0);
        assert_eq!(after.versions, vec![1]);
    }

    #[test]
    fn crash_without_checkpoint_is_unrecoverable() {
        assert!(matches!(node().crash_and_recover(), Err(Error::Unrecoverable(_))));
    }

    #[test]
    fn crash_reverts_to_checkpoint() {
        let n = node();
        lookup(&n, &[4, 9]);
        n.save_checkpoint(0).unwrap();
        let saved = n.probe(&[4, 9]).unwrap();
        n.with_shards(|s| s.apply_gradients(&[4], &[1.0, 1.0], 1.0)).unwrap();
        assert_ne!(n.probe(&[4, 9]).unwrap(), saved);
        n.crash_and_recover().unwrap();
        assert_eq!(n.probe(&[4, 9]).unwrap(), saved);
        assert_eq!(n.checkpoint_probe(&[4, 9]).unwrap(), saved);
    }
}
