//! Embedding worker: buffers the id features of registered samples, serves
//! aggregated embeddings on pull, and turns returned activation gradients
//! into per-id PS updates. PS round-trips never run under the buffer lock.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::bounded;
use num_traits::Float;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{encode_sample_id, IdFeatures, SampleId, ShardRouter, MAX_SAMPLE_COUNTER};
use crate::wire::msg::{
    encode_ack, encode_error, Message, PsCommit, PsLookup, PsStage, SampleEmbeddings, SampleGradients, STATUS_MISSING,
    STATUS_OK,
};
use crate::wire::transport::{call, call_idempotent, DelayLine, Endpoint, Inbox, ReplyTo};
use crate::wire::{decode_frame, MsgType};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug)]
struct Buffered {
    features: IdFeatures,
    insert_step: u64,
}

/// Id features of in-flight samples keyed by sample id.
#[derive(Debug)]
pub struct FeatureBuffer {
    rank: usize,
    capacity: usize,
    counter: u64,
    registrations: u64,
    map: HashMap<SampleId, Buffered>,
}

impl FeatureBuffer {
    pub fn new(rank: usize, capacity: usize) -> Result<Self> {
        encode_sample_id(rank, 0)?;
        if capacity == 0 {
            return Err(Error::Config("feature buffer capacity must be positive".into()));
        }
        Ok(Self {
            rank,
            capacity,
            counter: 0,
            registrations: 0,
            map: HashMap::with_capacity(capacity),
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Register a batch atomically: either every sample gets an id or none
    /// does and the caller sees backpressure.
    pub fn register_batch(&mut self, batch: Vec<IdFeatures>) -> Result<Vec<SampleId>> {
        if self.map.len() + batch.len() > self.capacity {
            return Err(Error::Backpressure(format!(
                "embedding worker {} buffer holds {} of {}",
                self.rank,
                self.map.len(),
                self.capacity
            )));
        }
        if self.counter + batch.len() as u64 > MAX_SAMPLE_COUNTER {
            return Err(Error::precondition("sample counter exhausted"));
        }
        let step = self.registrations;
        self.registrations += 1;
        let mut out = Vec::with_capacity(batch.len());
        for features in batch {
            let id = encode_sample_id(self.rank, self.counter)?;
            self.counter += 1;
            self.map.insert(id, Buffered { features, insert_step: step });
            out.push(id);
        }
        Ok(out)
    }

    pub fn register(&mut self, features: IdFeatures) -> Result<SampleId> {
        Ok(self.register_batch(vec![features])?[0])
    }

    pub fn get(&self, id: SampleId) -> Option<&IdFeatures> {
        self.map.get(&id).map(|b| &b.features)
    }

    pub fn insert_step(&self, id: SampleId) -> Option<u64> {
        self.map.get(&id).map(|b| b.insert_step)
    }

    pub fn remove(&mut self, id: SampleId) -> Option<IdFeatures> {
        self.map.remove(&id).map(|b| b.features)
    }

    pub fn clear(&mut self) -> usize {
        let n = self.map.len();
        self.map.clear();
        n
    }
}

/// Client view of the PS tier: routes ids to the node hosting their shard.
pub struct PsClient {
    nodes: Vec<Arc<dyn Endpoint>>,
    node_of_shard: Vec<usize>,
    router: ShardRouter,
    dim: usize,
    timeout: Duration,
    retries: u32,
}

impl PsClient {
    /// `shards_per_node[i]` consecutive shards live on node `i`.
    pub fn new(nodes: Vec<Arc<dyn Endpoint>>, shards_per_node: &[usize], dim: usize, timeout: Duration, retries: u32) -> Result<Self> {
        if nodes.len() != shards_per_node.len() || nodes.is_empty() {
            return Err(Error::Config("one shard count per PS node required".into()));
        }
        let node_of_shard: Vec<usize> = shards_per_node
            .iter()
            .enumerate()
            .flat_map(|(n, &k)| std::iter::repeat_n(n, k))
            .collect();
        Ok(Self {
            router: ShardRouter::new(node_of_shard.len())?,
            nodes,
            node_of_shard,
            dim,
            timeout,
            retries,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_of(&self, id: u64) -> usize {
        self.node_of_shard[self.router.route(id)]
    }

    fn split_by_node(&self, ids: &[u64]) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.nodes.len()];
        for (i, &id) in ids.iter().enumerate() {
            parts[self.node_of(id)].push(i);
        }
        parts
    }

    /// Values (row-major) and versions for `ids`, in the order given. All
    /// nodes are queried concurrently; failed nodes are retried.
    pub fn lookup(&self, ids: &[u64], peek: bool) -> Result<(Vec<f32>, Vec<u32>)> {
        let d = self.dim;
        let parts = self.split_by_node(ids);
        let (tx, rx) = bounded(self.nodes.len());
        let mut frames = vec![Vec::new(); self.nodes.len()];
        let mut outstanding = 0;
        for (n, pos) in parts.iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            let frame = PsLookup {
                ids: pos.iter().map(|&i| ids[i]).collect(),
                peek,
            }
            .encode();
            frames[n] = frame.clone();
            if self.nodes[n].send(frame, Some(ReplyTo::new(tx.clone(), n as u64))).is_ok() {
                outstanding += 1;
            }
        }
        let mut replies: Vec<Option<Vec<u8>>> = vec![None; self.nodes.len()];
        for _ in 0..outstanding {
            match rx.recv_timeout(self.timeout) {
                Ok(r) => {
                    if let Ok(bytes) = r.result {
                        replies[r.tag as usize] = Some(bytes);
                    }
                }
                Err(_) => break,
            }
        }
        let mut values = vec![0.0; ids.len() * d];
        let mut versions = vec![0; ids.len()];
        for (n, pos) in parts.iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            let frame = match replies[n].take().map(decode_frame) {
                Some(Ok(f)) if f.msg_type != MsgType::Error => f,
                _ => call_idempotent(self.nodes[n].as_ref(), frames[n].clone(), self.timeout, self.retries)?,
            };
            let Message::PsValues(v) = Message::decode(&frame)? else {
                return Err(Error::protocol(0, "PS lookup answered with an unexpected message"));
            };
            if v.versions.len() != pos.len() || v.dim != d {
                return Err(Error::protocol(0, "PS lookup reply does not match the request"));
            }
            for (k, &i) in pos.iter().enumerate() {
                values[i * d..(i + 1) * d].copy_from_slice(&v.values[k * d..(k + 1) * d]);
                versions[i] = v.versions[k];
            }
        }
        Ok((values, versions))
    }

    /// Stage per-id gradients for `step`. Not retried: a lost push is an
    /// accepted loss.
    pub fn stage(&self, step: u64, keys: &[u64], ids: &[u64], grads: &[f32], read_versions: &[u32]) -> Result<()> {
        let d = self.dim;
        for (n, pos) in self.split_by_node(ids).into_iter().enumerate() {
            if pos.is_empty() {
                continue;
            }
            let mut g = Vec::with_capacity(pos.len() * d);
            for &i in &pos {
                g.extend_from_slice(&grads[i * d..(i + 1) * d]);
            }
            let frame = PsStage {
                step,
                dim: d,
                order_keys: pos.iter().map(|&i| keys[i]).collect(),
                ids: pos.iter().map(|&i| ids[i]).collect(),
                grads: g,
                read_versions: pos.iter().map(|&i| read_versions[i]).collect(),
            }
            .encode(None)?;
            call(self.nodes[n].as_ref(), frame, self.timeout)?;
        }
        Ok(())
    }

    /// Ask every node to apply what it staged for `step`. Returns the number
    /// of applied gradients and the largest delay among them.
    pub fn commit(&self, step: u64, lr: f32) -> Result<(u64, u64)> {
        let mut applied = 0;
        let mut max_delay = 0;
        for ep in &self.nodes {
            let f = call(ep.as_ref(), PsCommit { step, lr }.encode(), self.timeout)?;
            if let Message::Ack(v) = Message::decode(&f)? {
                applied += v.first().copied().unwrap_or(0);
                max_delay = max_delay.max(v.get(1).copied().unwrap_or(0));
            }
        }
        Ok((applied, max_delay))
    }
}

/// Per-id gradients for one sample: group `g` with `n` ids sends `grad_g / n`
/// (mean) or `grad_g` (sum) to each id; repeated ids accumulate. Result is
/// sorted by id.
pub fn fan_out<T: Float>(features: &IdFeatures, group_grads: &[T], dim: usize, aggregation: Aggregation) -> Vec<(u64, Vec<T>)> {
    let mut acc: Vec<(u64, Vec<T>)> = Vec::new();
    for (g, ids) in features.groups.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let grad = &group_grads[g * dim..(g + 1) * dim];
        let factor = match aggregation {
            Aggregation::Mean => T::one() / T::from(ids.len()).expect("group size fits a float"),
            Aggregation::Sum => T::one(),
        };
        for &id in ids {
            let slot = match acc.iter().position(|(k, _)| *k == id) {
                Some(p) => p,
                None => {
                    acc.push((id, vec![T::zero(); dim]));
                    acc.len() - 1
                }
            };
            for (a, &v) in acc[slot].1.iter_mut().zip(grad) {
                *a = *a + v * factor;
            }
        }
    }
    acc.sort_by_key(|(id, _)| *id);
    acc
}

/// Aggregate looked-up vectors per group. `lookup(id)` returns the row for
/// an id. Empty groups produce zeros.
pub fn aggregate<'a, T: Float + 'a>(features: &IdFeatures, dim: usize, aggregation: Aggregation, lookup: impl Fn(u64) -> &'a [T], out: &mut [T]) {
    out.fill(T::zero());
    for (g, ids) in features.groups.iter().enumerate() {
        let o = &mut out[g * dim..(g + 1) * dim];
        for &id in ids {
            for (a, &v) in o.iter_mut().zip(lookup(id)) {
                *a = *a + v;
            }
        }
        if aggregation == Aggregation::Mean && !ids.is_empty() {
            let inv = T::one() / T::from(ids.len()).expect("group size fits a float");
            o.iter_mut().for_each(|a| *a = *a * inv);
        }
    }
}

pub type ReadObserver = Arc<dyn Fn(u64, usize) + Send + Sync>;

#[derive(Clone, Debug)]
pub struct EmbeddingWorkerConfig {
    pub rank: usize,
    pub buffer_capacity: usize,
    pub group_count: usize,
    pub dim: usize,
    pub aggregation: Aggregation,
    /// Value codec on embedding replies.
    pub reply_kappa: Option<f32>,
    /// Simulated link latency added to every pull reply.
    pub fetch_latency: Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WorkerCounters {
    pub registered: u64,
    /// Samples removed from the buffer by a backward pass.
    pub trained: u64,
    /// Samples removed by `drop_buffer`.
    pub buffer_dropped: u64,
    /// Backward passes for samples no longer buffered.
    pub late_gradients: u64,
    /// Pulls answered with a missing status.
    pub missing_pulls: u64,
}

pub struct PulledBatch {
    pub status: Vec<u8>,
    pub values: Vec<f32>,
    pub version_offsets: Vec<u32>,
    pub versions: Vec<u32>,
}

pub struct EmbeddingWorker {
    cfg: EmbeddingWorkerConfig,
    buffer: Mutex<FeatureBuffer>,
    ps: PsClient,
    delay: Option<DelayLine>,
    on_read: Option<ReadObserver>,
    registered: AtomicU64,
    trained: AtomicU64,
    buffer_dropped: AtomicU64,
    late_gradients: AtomicU64,
    missing_pulls: AtomicU64,
}

impl EmbeddingWorker {
    pub fn new(cfg: EmbeddingWorkerConfig, ps: PsClient, delay: Option<DelayLine>, on_read: Option<ReadObserver>) -> Result<Arc<Self>> {
        Ok(Arc::new(Self {
            buffer: Mutex::new(FeatureBuffer::new(cfg.rank, cfg.buffer_capacity)?),
            cfg,
            ps,
            delay,
            on_read,
            registered: AtomicU64::new(0),
            trained: AtomicU64::new(0),
            buffer_dropped: AtomicU64::new(0),
            late_gradients: AtomicU64::new(0),
            missing_pulls: AtomicU64::new(0),
        }))
    }

    pub fn rank(&self) -> usize {
        self.cfg.rank
    }

    pub fn counters(&self) -> WorkerCounters {
        WorkerCounters {
            registered: self.registered.load(Ordering::SeqCst),
            trained: self.trained.load(Ordering::SeqCst),
            buffer_dropped: self.buffer_dropped.load(Ordering::SeqCst),
            late_gradients: self.late_gradients.load(Ordering::SeqCst),
            missing_pulls: self.missing_pulls.load(Ordering::SeqCst),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buffer.lock().len()
    }

    pub fn register_batch(&self, batch: Vec<IdFeatures>) -> Result<Vec<SampleId>> {
        for f in &batch {
            if f.group_count() != self.cfg.group_count {
                return Err(Error::precondition(format!(
                    "sample has {} feature groups, expected {}",
                    f.group_count(),
                    self.cfg.group_count
                )));
            }
        }
        let ids = self.buffer.lock().register_batch(batch)?;
        self.registered.fetch_add(ids.len() as u64, Ordering::SeqCst);
        Ok(ids)
    }

    pub fn register_sample(&self, features: IdFeatures) -> Result<SampleId> {
        Ok(self.register_batch(vec![features])?[0])
    }

    /// Aggregated embeddings (`group_count × dim` per present sample) and
    /// the versions of every id read, for a batch of samples.
    pub fn pull_batch(&self, sample_ids: &[SampleId]) -> Result<PulledBatch> {
        let features: Vec<Option<IdFeatures>> = {
            let buf = self.buffer.lock();
            sample_ids.iter().map(|&id| buf.get(id).cloned()).collect()
        };
        let mut unique: Vec<u64> = features.iter().flatten().flat_map(|f| f.groups.iter().flatten().copied()).collect();
        unique.sort_unstable();
        unique.dedup();
        let (table, table_versions) = self.ps.lookup(&unique, false)?;
        let d = self.cfg.dim;
        let row = |id: u64| {
            let i = unique.binary_search(&id).expect("id was looked up");
            &table[i * d..(i + 1) * d]
        };
        let width = self.cfg.group_count * d;
        let present = features.iter().filter(|f| f.is_some()).count();
        let mut out = PulledBatch {
            status: Vec::with_capacity(sample_ids.len()),
            values: vec![0.0; present * width],
            version_offsets: vec![0],
            versions: Vec::new(),
        };
        let mut k = 0;
        for f in &features {
            match f {
                None => out.status.push(STATUS_MISSING),
                Some(f) => {
                    out.status.push(STATUS_OK);
                    aggregate(f, d, self.cfg.aggregation, row, &mut out.values[k * width..(k + 1) * width]);
                    for &id in f.groups.iter().flatten() {
                        out.versions.push(table_versions[unique.binary_search(&id).unwrap()]);
                    }
                    out.version_offsets.push(out.versions.len() as u32);
                    k += 1;
                }
            }
        }
        self.missing_pulls.fetch_add((sample_ids.len() - present) as u64, Ordering::SeqCst);
        Ok(out)
    }

    /// Single-sample pull: per-group aggregated vectors.
    pub fn serve_pull(&self, sample_id: SampleId) -> Result<Vec<Vec<f32>>> {
        let p = self.pull_batch(&[sample_id])?;
        if p.status[0] != STATUS_OK {
            return Err(Error::StaleSample(sample_id));
        }
        Ok(p.values.chunks(self.cfg.dim).map(<[f32]>::to_vec).collect())
    }

    /// Fan gradients out to ids and stage them at the PS for `step`. Returns
    /// `(applied, dropped)` sample counts.
    pub fn apply_backward(&self, msg: &SampleGradients) -> Result<(u64, u64)> {
        let d = self.cfg.dim;
        let width = msg.group_count * d;
        if msg.group_count != self.cfg.group_count || msg.dim != d || msg.grads.len() != msg.sample_ids.len() * width {
            return Err(Error::protocol(0, "gradient shape does not match the model"));
        }
        let features: Vec<Option<IdFeatures>> = {
            let mut buf = self.buffer.lock();
            msg.sample_ids.iter().map(|&id| buf.remove(id)).collect()
        };
        let mut keys = Vec::new();
        let mut ids = Vec::new();
        let mut grads = Vec::new();
        let mut read_versions = Vec::new();
        let mut applied = 0;
        for (s, f) in features.iter().enumerate() {
            let Some(f) = f else { continue };
            applied += 1;
            let versions = &msg.versions[msg.version_offsets[s] as usize..msg.version_offsets[s + 1] as usize];
            let flat: Vec<u64> = f.groups.iter().flatten().copied().collect();
            if versions.len() != flat.len() {
                return Err(Error::protocol(0, "version stamps do not match the buffered sample"));
            }
            for (j, (id, g)) in fan_out(f, &msg.grads[s * width..(s + 1) * width], d, self.cfg.aggregation)
                .into_iter()
                .enumerate()
            {
                let rv = versions[flat.iter().position(|&x| x == id).unwrap()];
                keys.push(((msg.nn_rank as u64) << 40) | ((msg.positions[s] as u64) << 24) | j as u64);
                ids.push(id);
                grads.extend_from_slice(&g);
                read_versions.push(rv);
            }
        }
        let dropped = (features.len() - applied) as u64;
        self.late_gradients.fetch_add(dropped, Ordering::SeqCst);
        self.trained.fetch_add(applied as u64, Ordering::SeqCst);
        self.ps.stage(msg.step, &keys, &ids, &grads, &read_versions)?;
        Ok((applied as u64, dropped))
    }

    /// Abandon every buffered sample. Returns how many were dropped.
    pub fn drop_buffer(&self) -> usize {
        let n = self.buffer.lock().clear();
        self.buffer_dropped.fetch_add(n as u64, Ordering::SeqCst);
        n
    }

    pub fn serve(self: Arc<Self>, inbox: Inbox) {
        for req in inbox {
            let msg = match Message::decode_bytes(req.frame) {
                Ok(m) => m,
                Err(e) => {
                    req.responder.respond_error(&e);
                    continue;
                }
            };
            match msg {
                Message::RegisterIds(r) => match self.register_batch(r.features) {
                    Ok(ids) => req.responder.respond(encode_ack(&ids.iter().map(|s| s.0).collect::<Vec<_>>())),
                    Err(e) => req.responder.respond_error(&e),
                },
                Message::SamplePull(p) => {
                    let reply = self.pull_batch(&p.sample_ids).and_then(|b| {
                        SampleEmbeddings {
                            step: p.step,
                            group_count: self.cfg.group_count,
                            dim: self.cfg.dim,
                            status: b.status,
                            values: b.values,
                            version_offsets: b.version_offsets,
                            versions: b.versions,
                        }
                        .encode(self.cfg.reply_kappa)
                    });
                    // The PS read has happened; only the reply is in flight.
                    if let Some(obs) = &self.on_read {
                        obs(p.step, p.sample_ids.len());
                    }
                    let frame = reply.unwrap_or_else(|e| encode_error(&e));
                    match &self.delay {
                        Some(line) => line.respond_after(self.cfg.fetch_latency, req.responder, frame),
                        None => req.responder.respond(frame),
                    }
                }
                Message::SampleGradients(g) => match self.apply_backward(&g) {
                    Ok((applied, dropped)) => req.responder.respond(encode_ack(&[applied, dropped])),
                    Err(e) => req.responder.respond_error(&e),
                },
                other => req
                    .responder
                    .respond_error(&Error::protocol(0, format!("embedding worker cannot handle {other:?}"))),
            }
        }
    }
}
