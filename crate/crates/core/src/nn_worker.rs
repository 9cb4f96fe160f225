//! NN worker: buffers non-id inputs, pulls embeddings ahead of training
//! within the staleness window, trains the dense tower, synchronizes dense
//! gradients with its peers and returns activation gradients to the
//! embedding workers.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};
use num_traits::Float;
use parking_lot::{Condvar, Mutex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::{bce_loss, DenseGrads, DenseModel, DenseOptimizer, DenseOptimizerKind, GradientBundle, Layer, Matrix};
use crate::error::{Error, Result};
use crate::gate::StepGate;
use crate::ids::{decode_rank, mix64, SampleId};
use crate::wire::msg::{encode_ack, DenseSync, Message, SampleGradients, SamplePull, SyncPayload, STATUS_OK};
use crate::wire::transport::{Endpoint, Inbox, InProcEndpoint, ReplyTo};
use crate::wire::{decode_frame, inproc_pair};

/// How dense gradients are combined across replicas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseSyncMode {
    /// One allreduce of the whole gradient after backward.
    Barrier,
    /// One allreduce per layer, started while backward is still running.
    Bucketed,
    /// No synchronization; every replica applies its own gradient.
    Local,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arrived {
    pub embedding: Vec<f32>,
    pub versions: Vec<u32>,
}

/// Non-id inputs keyed by sample id, plus the queue of samples whose
/// embeddings have arrived.
#[derive(Debug, Default)]
pub struct InputBuffer {
    capacity: usize,
    inputs: HashMap<SampleId, (Vec<f32>, f32)>,
    batches: VecDeque<Vec<SampleId>>,
    eligible: VecDeque<(SampleId, Arrived)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Minibatch {
    pub sample_ids: Vec<SampleId>,
    /// `group_count * dim` aggregated embedding values per sample.
    pub embeddings: Vec<f32>,
    pub non_id: Vec<f32>,
    pub labels: Vec<f32>,
    pub version_offsets: Vec<u32>,
    pub versions: Vec<u32>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

impl InputBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn buffer_input(&mut self, id: SampleId, non_id: Vec<f32>, label: f32) -> Result<()> {
        if self.inputs.contains_key(&id) {
            return Err(Error::protocol(0, format!("sample {id} dispatched twice")));
        }
        self.inputs.insert(id, (non_id, label));
        Ok(())
    }

    /// Buffer one dispatched batch, all or nothing.
    pub fn push_batch(&mut self, ids: &[SampleId], non_id: &[f32], labels: &[f32]) -> Result<()> {
        if self.inputs.len() + ids.len() > self.capacity {
            return Err(Error::Backpressure(format!(
                "input buffer holds {} of {}",
                self.inputs.len(),
                self.capacity
            )));
        }
        if let Some(id) = ids.iter().find(|id| self.inputs.contains_key(id)) {
            return Err(Error::protocol(0, format!("sample {id} dispatched twice")));
        }
        let d = if ids.is_empty() { 0 } else { non_id.len() / ids.len() };
        for (i, &id) in ids.iter().enumerate() {
            self.buffer_input(id, non_id[i * d..(i + 1) * d].to_vec(), labels[i])?;
        }
        self.batches.push_back(ids.to_vec());
        Ok(())
    }

    pub fn pop_batch(&mut self) -> Option<Vec<SampleId>> {
        self.batches.pop_front()
    }

    pub fn mark_arrived(&mut self, id: SampleId, arrived: Arrived) -> Result<()> {
        if !self.inputs.contains_key(&id) {
            return Err(Error::StaleSample(id));
        }
        self.eligible.push_back((id, arrived));
        Ok(())
    }

    /// Forget a sample whose embeddings will never arrive.
    pub fn discard(&mut self, id: SampleId) -> bool {
        self.inputs.remove(&id).is_some()
    }

    pub fn eligible(&self) -> usize {
        self.eligible.len()
    }

    /// Pop the `b` oldest eligible samples.
    pub fn assemble(&mut self, b: usize) -> Result<Minibatch> {
        if self.eligible.len() < b {
            return Err(Error::WouldBlock(format!("{} of {b} samples eligible", self.eligible.len())));
        }
        let mut batch = Minibatch {
            version_offsets: vec![0],
            ..Minibatch::default()
        };
        for (id, arrived) in self.eligible.drain(..b) {
            let (non_id, label) = self.inputs.remove(&id).ok_or(Error::StaleSample(id))?;
            batch.sample_ids.push(id);
            batch.embeddings.extend_from_slice(&arrived.embedding);
            batch.non_id.extend_from_slice(&non_id);
            batch.labels.push(label);
            batch.versions.extend_from_slice(&arrived.versions);
            batch.version_offsets.push(batch.versions.len() as u32);
        }
        Ok(batch)
    }
}

/// Rows of `[embeddings | non_id]`.
pub fn build_input<T: Float>(embeddings: &[T], non_id: &[T], rows: usize) -> Result<Matrix<T>> {
    if rows == 0 || !embeddings.len().is_multiple_of(rows) || !non_id.len().is_multiple_of(rows) {
        return Err(Error::precondition("batch parts disagree on the sample count"));
    }
    let (e, n) = (embeddings.len() / rows, non_id.len() / rows);
    let mut m = Matrix::zeros(rows, e + n);
    for i in 0..rows {
        let r = m.row_mut(i);
        r[..e].copy_from_slice(&embeddings[i * e..(i + 1) * e]);
        r[e..].copy_from_slice(&non_id[i * n..(i + 1) * n]);
    }
    Ok(m)
}

/// Forward and backward of one batch; `on_layer` sees each layer's
/// gradient as soon as it is final.
pub fn train_step_with<T: Float>(
    model: &DenseModel<T>,
    embeddings: &[T],
    non_id: &[T],
    labels: &[T],
    on_layer: impl FnMut(usize, &Layer<T>),
) -> Result<(T, GradientBundle<T>)> {
    let input = build_input(embeddings, non_id, labels.len())?;
    let (pred, cache) = model.forward(&input)?;
    let loss = bce_loss(&pred, labels)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss at model version {}",
            model.version
        )));
    }
    let order: Vec<usize> = (0..labels.len()).collect();
    let bundle = model.backward_with(&cache, labels, &order, on_layer)?;
    Ok((loss, bundle))
}

pub fn train_step<T: Float>(model: &DenseModel<T>, embeddings: &[T], non_id: &[T], labels: &[T]) -> Result<(T, GradientBundle<T>)> {
    train_step_with(model, embeddings, non_id, labels, |_, _| {})
}

/// Order-sensitive fingerprint of every parameter bit.
pub fn model_hash(model: &DenseModel<f32>) -> u64 {
    let mut h = 0u64;
    for l in &model.layers {
        for v in l.weight.iter().chain(&l.bias) {
            h = mix64(h ^ v.to_bits() as u64);
        }
    }
    h
}

fn layer_flat(l: &Layer<f32>) -> Vec<f32> {
    let mut v = l.weight.clone();
    v.extend_from_slice(&l.bias);
    v
}

/// Reference arithmetic of the reduction tree: at stride `s`, rank `r`
/// with `r % 2s == 0` adds rank `r + s`'s partial to its own; the root
/// divides by `K` and rounds once.
pub fn tree_mean(parts: &[&[f32]]) -> Result<Vec<f32>> {
    let k = parts.len();
    if k == 0 || parts.iter().any(|p| p.len() != parts[0].len()) {
        return Err(Error::precondition("allreduce needs equally shaped contributions"));
    }
    let mut partials: Vec<Vec<f64>> = parts.iter().map(|p| p.iter().map(|&v| v as f64).collect()).collect();
    let mut s = 1;
    while s < k {
        for r in (0..k).step_by(2 * s) {
            if r + s < k {
                let child = std::mem::take(&mut partials[r + s]);
                partials[r].iter_mut().zip(child).for_each(|(a, c)| *a += c);
            }
        }
        s *= 2;
    }
    Ok(partials[0].iter().map(|&v| (v / k as f64) as f32).collect())
}

/// One replica's side of the dense allreduce.
pub struct SyncGroup {
    rank: usize,
    peers: Vec<Arc<dyn Endpoint>>,
    inbox: Receiver<DenseSync>,
    stash: HashMap<(u64, u32, bool, u32), DenseSync>,
    timeout: Duration,
    gate: Option<Arc<StepGate>>,
}

impl SyncGroup {
    /// `peers[r]` reaches rank `r`; the entry for this rank is unused.
    pub fn new(
        rank: usize,
        peers: Vec<Arc<dyn Endpoint>>,
        inbox: Receiver<DenseSync>,
        timeout: Duration,
        gate: Option<Arc<StepGate>>,
    ) -> Self {
        Self {
            rank,
            peers,
            inbox,
            stash: HashMap::new(),
            timeout,
            gate,
        }
    }

    pub fn size(&self) -> usize {
        self.peers.len()
    }

    fn send(&self, to: usize, msg: DenseSync) -> Result<()> {
        self.peers[to]
            .send(msg.encode(), None)
            .map_err(|e| Error::SyncFailure(format!("rank {} cannot reach rank {to}: {e}", self.rank)))
    }

    fn recv(&mut self, step: u64, bucket: u32, result: bool, from: u32) -> Result<DenseSync> {
        let key = (step, bucket, result, from);
        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some(m) = self.stash.remove(&key) {
                return Ok(m);
            }
            if let Some(g) = &self.gate {
                g.check()?;
            }
            let wait = deadline.saturating_duration_since(Instant::now()).min(Duration::from_millis(50));
            match self.inbox.recv_timeout(wait) {
                Ok(m) => {
                    let k = (m.step, m.bucket, matches!(m.payload, SyncPayload::Result(_)), m.from_rank);
                    self.stash.insert(k, m);
                }
                Err(RecvTimeoutError::Timeout) if Instant::now() < deadline => {}
                Err(_) => {
                    return Err(Error::SyncFailure(format!(
                        "rank {} waited {:?} for rank {from} at step {step}",
                        self.rank, self.timeout
                    )))
                }
            }
        }
    }

    /// Leaves of the first tree level can ship their contribution before
    /// the rest of the gradient exists. Returns whether it was sent.
    pub fn send_early(&self, step: u64, bucket: u32, grads: &[f32], hash: Option<u64>) -> Result<bool> {
        if self.rank.is_multiple_of(2) {
            return Ok(false);
        }
        self.send(
            self.rank - 1,
            DenseSync {
                step,
                bucket,
                from_rank: self.rank as u32,
                contributors: 1,
                hashes: hash.into_iter().collect(),
                payload: SyncPayload::Partial(grads.iter().map(|&v| v as f64).collect()),
            },
        )?;
        Ok(true)
    }

    /// Elementwise mean over all ranks, identical bits on every rank. When
    /// hashes are given, the root fails if any replica differs.
    pub fn allreduce_mean(&mut self, step: u64, bucket: u32, grads: &[f32], hash: Option<u64>, sent_early: bool) -> Result<Vec<f32>> {
        let k = self.size();
        let r = self.rank;
        let mut partial: Vec<f64> = grads.iter().map(|&v| v as f64).collect();
        let mut hashes: Vec<u64> = hash.into_iter().collect();
        let mut contributors = 1;
        let mut s = 1;
        while s < k {
            if r.is_multiple_of(2 * s) {
                if r + s < k {
                    let m = self.recv(step, bucket, false, (r + s) as u32)?;
                    let SyncPayload::Partial(child) = m.payload else { unreachable!() };
                    if child.len() != partial.len() {
                        return Err(Error::SyncFailure(format!("rank {} sent a gradient of another shape", r + s)));
                    }
                    partial.iter_mut().zip(child).for_each(|(a, c)| *a += c);
                    hashes.extend(m.hashes);
                    contributors += m.contributors;
                }
            } else {
                if !(sent_early && s == 1) {
                    self.send(
                        r - s,
                        DenseSync {
                            step,
                            bucket,
                            from_rank: r as u32,
                            contributors,
                            hashes,
                            payload: SyncPayload::Partial(partial),
                        },
                    )?;
                }
                let m = self.recv(step, bucket, true, 0)?;
                let SyncPayload::Result(mean) = m.payload else { unreachable!() };
                return Ok(mean);
            }
            s *= 2;
        }
        if contributors as usize != k {
            return Err(Error::SyncFailure(format!("{contributors} of {k} replicas reached the root")));
        }
        if hash.is_some() && hashes.iter().any(|&h| h != hashes[0]) {
            return Err(Error::Consistency(format!(
                "dense replicas diverged before step {step}: hashes {hashes:x?}"
            )));
        }
        let mean: Vec<f32> = partial.iter().map(|&v| (v / k as f64) as f32).collect();
        for to in 1..k {
            self.send(
                to,
                DenseSync {
                    step,
                    bucket,
                    from_rank: 0,
                    contributors: k as u32,
                    hashes: Vec::new(),
                    payload: SyncPayload::Result(mean.clone()),
                },
            )?;
        }
        Ok(mean)
    }
}

/// In-process sync groups wired to each other, for `k` replicas.
pub fn sync_mesh(k: usize, timeout: Duration) -> Vec<SyncGroup> {
    let mut eps: Vec<Arc<dyn Endpoint>> = Vec::new();
    let mut inboxes = Vec::new();
    for r in 0..k {
        let (ep, inbox): (InProcEndpoint, Inbox) = inproc_pair(&format!("sync-{r}"));
        eps.push(Arc::new(ep));
        let (tx, rx) = unbounded();
        thread::spawn(move || forward_sync(inbox, tx));
        inboxes.push(rx);
    }
    inboxes
        .into_iter()
        .enumerate()
        .map(|(r, rx)| SyncGroup::new(r, eps.clone(), rx, timeout, None))
        .collect()
}

fn forward_sync(inbox: Inbox, tx: Sender<DenseSync>) {
    for req in inbox {
        if let Ok(Message::DenseSync(m)) = Message::decode_bytes(req.frame) {
            if tx.send(m).is_err() {
                break;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct NnWorkerConfig {
    pub rank: usize,
    pub batch_size: usize,
    pub group_count: usize,
    pub dim: usize,
    pub non_id_dim: usize,
    pub total_steps: u64,
    pub sync: DenseSyncMode,
    pub lr: f32,
    pub optimizer: DenseOptimizerKind,
    /// Value codec on returned activation gradients.
    pub grad_kappa: Option<f32>,
    /// Verify replica hashes every this many steps; 0 disables.
    pub hash_every: u64,
    pub input_capacity: usize,
    /// Seeded permutation of samples within windows of this many steps.
    pub shuffle: Option<(u64, usize)>,
    pub checkpoint_every: u64,
    pub timeout: Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NnCounters {
    pub trained: u64,
    /// Samples whose embeddings came back missing.
    pub missing: u64,
    /// Samples whose gradients could not be delivered.
    pub emit_failures: u64,
    pub hash_checks: u64,
    pub reloads: u64,
}

struct StepPlan {
    step: u64,
    ids: Vec<SampleId>,
    ranks: Vec<usize>,
}

pub struct NnWorker {
    cfg: NnWorkerConfig,
    inputs: Mutex<InputBuffer>,
    arrived: Condvar,
    model: Arc<Mutex<DenseModel<f32>>>,
    trained: AtomicU64,
    missing: AtomicU64,
    emit_failures: AtomicU64,
    hash_checks: AtomicU64,
    reloads: AtomicU64,
}

impl NnWorker {
    pub fn new(cfg: NnWorkerConfig, model: DenseModel<f32>) -> Result<Arc<Self>> {
        if cfg.batch_size == 0 || cfg.batch_size > crate::codec::MAX_BATCH {
            return Err(Error::Config(format!("batch size {} outside 1..=65535", cfg.batch_size)));
        }
        if model.input_dim() != cfg.group_count * cfg.dim + cfg.non_id_dim {
            return Err(Error::Config("dense input width does not match the features".into()));
        }
        Ok(Arc::new(Self {
            inputs: Mutex::new(InputBuffer::new(cfg.input_capacity)),
            cfg,
            arrived: Condvar::new(),
            model: Arc::new(Mutex::new(model)),
            trained: AtomicU64::new(0),
            missing: AtomicU64::new(0),
            emit_failures: AtomicU64::new(0),
            hash_checks: AtomicU64::new(0),
            reloads: AtomicU64::new(0),
        }))
    }

    pub fn rank(&self) -> usize {
        self.cfg.rank
    }

    pub fn model(&self) -> Arc<Mutex<DenseModel<f32>>> {
        self.model.clone()
    }

    pub fn buffered(&self) -> usize {
        self.inputs.lock().len()
    }

    pub fn counters(&self) -> NnCounters {
        NnCounters {
            trained: self.trained.load(Ordering::SeqCst),
            missing: self.missing.load(Ordering::SeqCst),
            emit_failures: self.emit_failures.load(Ordering::SeqCst),
            hash_checks: self.hash_checks.load(Ordering::SeqCst),
            reloads: self.reloads.load(Ordering::SeqCst),
        }
    }

    /// Serve loader dispatches; dense sync frames go to `sync_tx`.
    pub fn serve(self: Arc<Self>, inbox: Inbox, sync_tx: Sender<DenseSync>) {
        for req in inbox {
            match Message::decode_bytes(req.frame) {
                Ok(Message::RegisterInputs(m)) => {
                    let r = self.inputs.lock().push_batch(&m.sample_ids, &m.non_id, &m.labels);
                    self.arrived.notify_all();
                    match r {
                        Ok(()) => req.responder.respond(encode_ack(&[m.sample_ids.len() as u64])),
                        Err(e) => req.responder.respond_error(&e),
                    }
                }
                Ok(Message::DenseSync(m)) => {
                    let _ = sync_tx.send(m);
                }
                Ok(other) => req
                    .responder
                    .respond_error(&Error::protocol(0, format!("NN worker cannot handle {other:?}"))),
                Err(e) => req.responder.respond_error(&e),
            }
        }
    }

    fn next_batch(&self, gate: &StepGate) -> Result<Vec<SampleId>> {
        let deadline = Instant::now() + self.cfg.timeout;
        let mut inputs = self.inputs.lock();
        loop {
            if let Some(b) = inputs.pop_batch() {
                return Ok(b);
            }
            gate.check()?;
            if Instant::now() > deadline {
                return Err(Error::SyncFailure(format!("NN worker {} starved of input", self.cfg.rank)));
            }
            self.arrived.wait_for(&mut inputs, Duration::from_millis(50));
        }
    }

    fn pull_loop(&self, gate: &StepGate, ews: &[Arc<dyn Endpoint>], plans: Sender<StepPlan>, replies: Sender<crate::wire::transport::Reply>) -> Result<()> {
        let t = self.cfg.total_steps;
        let b = self.cfg.batch_size;
        let window = self.cfg.shuffle.map_or(1, |(_, w)| w.max(1)) as u64;
        let mut start = 0;
        while start < t {
            let w = window.min(t - start) as usize;
            let mut order = Vec::with_capacity(w * b);
            for _ in 0..w {
                order.extend(self.next_batch(gate)?);
            }
            if let Some((seed, _)) = self.cfg.shuffle {
                let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(((self.cfg.rank as u64) << 40) ^ start)));
                order.shuffle(&mut rng);
            }
            for (j, ids) in order.chunks(b).enumerate() {
                let step = start + j as u64;
                gate.wait_pull(step)?;
                let mut ranks: Vec<usize> = ids.iter().map(|&id| decode_rank(id)).collect();
                ranks.sort_unstable();
                ranks.dedup();
                for &r in &ranks {
                    let sample_ids: Vec<SampleId> = ids.iter().copied().filter(|&id| decode_rank(id) == r).collect();
                    let tag = (step << 16) | r as u64;
                    let frame = SamplePull { step, sample_ids }.encode();
                    let sent = match ews.get(r) {
                        Some(ep) => ep.send(frame, Some(ReplyTo::new(replies.clone(), tag))),
                        None => Err(Error::protocol(0, format!("no embedding worker of rank {r}"))),
                    };
                    if let Err(e) = sent {
                        let _ = replies.send(crate::wire::transport::Reply { tag, result: Err(e) });
                    }
                }
                if plans
                    .send(StepPlan {
                        step,
                        ids: ids.to_vec(),
                        ranks,
                    })
                    .is_err()
                {
                    return Ok(());
                }
            }
            start += w as u64;
        }
        Ok(())
    }

    /// Train all planned steps. Blocks until done or the run aborts.
    pub fn run(self: &Arc<Self>, gate: Arc<StepGate>, ews: Vec<Arc<dyn Endpoint>>, mut sync: SyncGroup) -> Result<()> {
        let (plan_tx, plan_rx) = unbounded();
        let (reply_tx, reply_rx) = unbounded();
        let puller = {
            let me = self.clone();
            let gate = gate.clone();
            let ews = ews.clone();
            thread::Builder::new()
                .name(format!("nn{}-pull", self.cfg.rank))
                .spawn(move || {
                    let r = me.pull_loop(&gate, &ews, plan_tx, reply_tx);
                    if let Err(e) = &r {
                        gate.abort(format!("NN worker {} puller: {e}", me.cfg.rank));
                    }
                    r
                })?
        };
        let trained = self.train_loop(&gate, &ews, &mut sync, plan_rx, reply_rx);
        if let Err(e) = &trained {
            gate.abort(format!("NN worker {}: {e}", self.cfg.rank));
        }
        let pulled = puller.join().unwrap_or_else(|_| Err(Error::Internal("puller panicked".into())));
        match (trained, pulled) {
            (Err(Error::Aborted(_)), Err(e)) => Err(e),
            (Err(e), _) => Err(e),
            (Ok(()), r) => r,
        }
    }

    fn recv_checked<T>(&self, rx: &Receiver<T>, gate: &StepGate, what: &str) -> Result<T> {
        let deadline = Instant::now() + self.cfg.timeout;
        loop {
            gate.check()?;
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(v) => return Ok(v),
                Err(RecvTimeoutError::Timeout) if Instant::now() < deadline => {}
                Err(_) => {
                    return Err(Error::SyncFailure(format!(
                        "NN worker {} timed out waiting for {what}",
                        self.cfg.rank
                    )))
                }
            }
        }
    }

    fn train_loop(
        &self,
        gate: &StepGate,
        ews: &[Arc<dyn Endpoint>],
        sync: &mut SyncGroup,
        plans: Receiver<StepPlan>,
        replies: Receiver<crate::wire::transport::Reply>,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let width = cfg.group_count * cfg.dim;
        let mut optimizer = DenseOptimizer::new(cfg.optimizer, self.model.lock().param_count());
        let mut early: HashMap<u64, crate::wire::transport::Reply> = HashMap::new();
        for u in 0..cfg.total_steps {
            if u > 0 && gate.is_hook(u - 1) {
                gate.wait_committed(u - 1)?;
            }
            if gate.take_reload(cfg.rank) {
                let Some((_, params)) = gate.dense_checkpoint() else {
                    return Err(Error::Unrecoverable("no dense checkpoint to reload".into()));
                };
                self.model.lock().load_flat(&params)?;
                optimizer = DenseOptimizer::new(cfg.optimizer, params.len());
                self.reloads.fetch_add(1, Ordering::SeqCst);
            }
            let plan = self.recv_checked(&plans, gate, "a step plan")?;
            debug_assert_eq!(plan.step, u);

            // Join the pulled embeddings with the buffered inputs.
            let mut by_rank: HashMap<usize, (Vec<SampleId>, Option<Message>)> = HashMap::new();
            for &r in &plan.ranks {
                let tag = (u << 16) | r as u64;
                let reply = loop {
                    if let Some(rep) = early.remove(&tag) {
                        break rep;
                    }
                    let rep = self.recv_checked(&replies, gate, "embeddings")?;
                    early.insert(rep.tag, rep);
                };
                let msg = reply.result.and_then(decode_frame).and_then(|f| Message::decode(&f)).ok();
                let ids: Vec<SampleId> = plan.ids.iter().copied().filter(|&id| decode_rank(id) == r).collect();
                by_rank.insert(r, (ids, msg));
            }
            let mut arrived: HashMap<SampleId, Arrived> = HashMap::new();
            for (ids, msg) in by_rank.values() {
                let Some(Message::SampleEmbeddings(m)) = msg else { continue };
                if m.status.len() != ids.len() || m.group_count * m.dim != width {
                    return Err(Error::protocol(0, "embedding reply does not match the pull"));
                }
                let mut k = 0;
                for (i, &id) in ids.iter().enumerate() {
                    if m.status[i] != STATUS_OK {
                        continue;
                    }
                    arrived.insert(
                        id,
                        Arrived {
                            embedding: m.values[k * width..(k + 1) * width].to_vec(),
                            versions: m.versions[m.version_offsets[k] as usize..m.version_offsets[k + 1] as usize].to_vec(),
                        },
                    );
                    k += 1;
                }
            }
            let batch = {
                let mut inputs = self.inputs.lock();
                for &id in &plan.ids {
                    match arrived.remove(&id) {
                        Some(a) => inputs.mark_arrived(id, a)?,
                        None => {
                            inputs.discard(id);
                            self.missing.fetch_add(1, Ordering::SeqCst);
                        }
                    }
                }
                let n = inputs.eligible();
                inputs.assemble(n)?
            };

            let mut model = self.model.lock();
            let hash = (cfg.sync != DenseSyncMode::Local && cfg.hash_every > 0 && u % cfg.hash_every == 0)
                .then(|| model_hash(&model));
            if hash.is_some() {
                self.hash_checks.fetch_add(1, Ordering::SeqCst);
            }
            let mut sent_early = vec![false; model.layers.len()];
            let (loss, bundle) = if batch.is_empty() {
                let zero = DenseGrads::zeros_like(&model);
                (
                    0.0,
                    GradientBundle {
                        dense: zero,
                        input: Matrix::zeros(0, model.input_dim()),
                    },
                )
            } else {
                let mut stream_err = None;
                let r = train_step_with(&model, &batch.embeddings, &batch.non_id, &batch.labels, |l, g| {
                    if cfg.sync == DenseSyncMode::Bucketed && stream_err.is_none() {
                        match sync.send_early(u, l as u32, &layer_flat(g), hash) {
                            Ok(s) => sent_early[l] = s,
                            Err(e) => stream_err = Some(e),
                        }
                    }
                })?;
                if let Some(e) = stream_err {
                    return Err(e);
                }
                r
            };
            let grads = match cfg.sync {
                DenseSyncMode::Local => bundle.dense.clone(),
                DenseSyncMode::Barrier => {
                    let mean = sync.allreduce_mean(u, 0, &bundle.dense.flatten(), hash, false)?;
                    let mut g = DenseGrads::zeros_like(&model);
                    g.load_flat(&mean);
                    g
                }
                DenseSyncMode::Bucketed => {
                    let mut g = DenseGrads::zeros_like(&model);
                    for l in (0..model.layers.len()).rev() {
                        let mean = sync.allreduce_mean(u, l as u32, &layer_flat(&bundle.dense.layers[l]), hash, sent_early[l])?;
                        let n = g.layers[l].weight.len();
                        g.layers[l].weight.copy_from_slice(&mean[..n]);
                        g.layers[l].bias.copy_from_slice(&mean[n..]);
                    }
                    g
                }
            };
            optimizer.step(&mut model, &grads, cfg.lr)?;
            if cfg.rank == 0 && cfg.checkpoint_every > 0 && (u + 1) % cfg.checkpoint_every == 0 {
                gate.store_dense_checkpoint(u, model.flatten());
            }
            drop(model);

            self.emit_embedding_grads(u, &batch, &bundle, ews)?;
            self.trained.fetch_add(batch.len() as u64, Ordering::SeqCst);
            gate.staged(u, loss as f64 * batch.len() as f64, batch.len());
        }
        Ok(())
    }

    /// Send each sample's activation gradient to the embedding worker that
    /// buffered it and wait for the acknowledgements. Failures are counted,
    /// not retried.
    fn emit_embedding_grads(&self, step: u64, batch: &Minibatch, bundle: &GradientBundle<f32>, ews: &[Arc<dyn Endpoint>]) -> Result<()> {
        let cfg = &self.cfg;
        let width = cfg.group_count * cfg.dim;
        let mut parts: Vec<(usize, Vec<usize>)> = Vec::new();
        for (pos, &id) in batch.sample_ids.iter().enumerate() {
            let r = decode_rank(id);
            match parts.iter_mut().find(|(rank, _)| *rank == r) {
                Some((_, v)) => v.push(pos),
                None => parts.push((r, vec![pos])),
            }
        }
        let (tx, rx) = bounded(parts.len().max(1));
        let mut pending = 0;
        for (r, positions) in &parts {
            let mut msg = SampleGradients {
                step,
                nn_rank: cfg.rank as u32,
                group_count: cfg.group_count,
                dim: cfg.dim,
                sample_ids: Vec::with_capacity(positions.len()),
                positions: Vec::with_capacity(positions.len()),
                grads: Vec::with_capacity(positions.len() * width),
                version_offsets: vec![0],
                versions: Vec::new(),
            };
            for &p in positions {
                msg.sample_ids.push(batch.sample_ids[p]);
                msg.positions.push(p as u32);
                msg.grads.extend_from_slice(&bundle.input.row(p)[..width]);
                let vs = &batch.versions[batch.version_offsets[p] as usize..batch.version_offsets[p + 1] as usize];
                msg.versions.extend_from_slice(vs);
                msg.version_offsets.push(msg.versions.len() as u32);
            }
            let frame = msg.encode(cfg.grad_kappa)?;
            let sent = ews
                .get(*r)
                .ok_or_else(|| Error::protocol(0, "unknown embedding worker"))
                .and_then(|ep| ep.send(frame, Some(ReplyTo::new(tx.clone(), positions.len() as u64))));
            match sent {
                Ok(()) => pending += 1,
                Err(_) => {
                    self.emit_failures.fetch_add(positions.len() as u64, Ordering::SeqCst);
                }
            }
        }
        for _ in 0..pending {
            match rx.recv_timeout(cfg.timeout) {
                Ok(rep) => {
                    let ok = rep
                        .result
                        .and_then(decode_frame)
                        .and_then(|f| Message::decode(&f))
                        .is_ok();
                    if !ok {
                        self.emit_failures.fetch_add(rep.tag, Ordering::SeqCst);
                    }
                }
                Err(_) => {
                    return Err(Error::SyncFailure(format!(
                        "NN worker {} got no gradient acknowledgement at step {step}",
                        cfg.rank
                    )))
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arrived(v: f32) -> Arrived {
        Arrived {
            embedding: vec![v],
            versions: vec![0],
        }
    }

    #[test]
    fn fifo_assembly() {
        let mut b = InputBuffer::new(10);
        let ids: Vec<SampleId> = (1..=3).map(SampleId).collect();
        b.push_batch(&ids, &[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(b.assemble(1), Err(Error::WouldBlock(_))));
        for (i, &id) in ids.iter().enumerate() {
            b.mark_arrived(id, arrived(i as f32)).unwrap();
        }
        let m = b.assemble(2).unwrap();
        assert_eq!(m.sample_ids, ids[..2].to_vec());
        assert_eq!(m.non_id, vec![1.0, 2.0]);
        assert_eq!(m.version_offsets, vec![0, 1, 2]);
        assert_eq!(b.assemble(1).unwrap().sample_ids, vec![ids[2]]);
        assert!(b.is_empty());
    }

    #[test]
    fn duplicate_dispatch_is_protocol_error() {
        let mut b = InputBuffer::new(10);
        b.buffer_input(SampleId(5), vec![], 1.0).unwrap();
        assert!(matches!(b.buffer_input(SampleId(5), vec![], 1.0), Err(Error::Protocol { .. })));
        assert!(matches!(b.push_batch(&[SampleId(1); 11], &[], &[0.0; 11]), Err(Error::Backpressure(_))));
    }

    #[test]
    fn zero_label_at_half_gives_half_bias_grad() {
        let mut m = DenseModel::<f64>::zeros(&[2, 1]).unwrap();
        m.layers[0].weight = vec![0.0, 0.0];
        let (loss, g) = train_step(&m, &[0.3], &[0.7], &[0.0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g.dense.layers[0].bias, vec![0.5]);
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let m = DenseModel::<f64>::new(&[3, 4, 1], 1).unwrap();
        let (_, one) = train_step(&m, &[0.1, -0.2], &[0.5], &[1.0]).unwrap();
        let (_, two) = train_step(&m, &[0.1, -0.2, 0.1, -0.2], &[0.5, 0.5], &[1.0, 1.0]).unwrap();
        for (a, b) in one.dense.flatten().iter().zip(two.dense.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mesh_allreduce_matches_tree_and_is_identical() {
        for k in [1usize, 2, 3, 4] {
            let groups = sync_mesh(k, Duration::from_secs(5));
            let parts: Vec<Vec<f32>> = (0..k).map(|r| vec![r as f32 + 0.1, -(r as f32) * 3.3, 1e-3]).collect();
            let expect = tree_mean(&parts.iter().map(Vec::as_slice).collect::<Vec<_>>()).unwrap();
            let handles: Vec<_> = groups
                .into_iter()
                .zip(parts.clone())
                .map(|(mut g, p)| thread::spawn(move || g.allreduce_mean(0, 0, &p, Some(1), false).unwrap()))
                .collect();
            for h in handles {
                let got = h.join().unwrap();
                assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn mismatched_replica_hash_is_consistency_error() {
        let groups = sync_mesh(2, Duration::from_secs(1));
        let handles: Vec<_> = groups
            .into_iter()
            .enumerate()
            .map(|(r, mut g)| thread::spawn(move || g.allreduce_mean(3, 0, &[1.0], Some(r as u64), false)))
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(matches!(results[0], Err(Error::Consistency(_))));
        assert!(matches!(results[1], Err(Error::SyncFailure(_))));
    }

    #[test]
    fn missing_peer_is_sync_failure() {
        let mut groups = sync_mesh(2, Duration::from_millis(200));
        let err = groups[0].allreduce_mean(0, 0, &[1.0], None, false).unwrap_err();
        assert!(matches!(err, Error::SyncFailure(_)));
    }
}
