//! Builds a cluster (PS nodes, embedding workers, NN workers, loader) over
//! either transport, runs one training job in one of the four modes, and
//! reports metrics. The orchestrator also owns the step clock: it commits
//! embedding updates step by step and runs evaluation, checkpoints and
//! fault injection between steps.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;
use parking_lot::Mutex;
use serde::Serialize;

use crate::config::{ClusterConfig, FaultSpec, FaultTarget, Mode, TrainConfig, TransportKind};
use crate::data::{dispatch, generate_synthetic, Dataset, DispatchPlan, DispatchStats};
use crate::dense::{auc, bce_loss, DenseModel, Matrix};
use crate::embedding_worker::{aggregate, EmbeddingWorker, EmbeddingWorkerConfig, PsClient, ReadObserver, WorkerCounters};
use crate::error::{Error, Result};
use crate::gate::{GatePlan, StepGate};
use crate::nn_worker::{model_hash, DenseSyncMode, NnCounters, NnWorker, NnWorkerConfig, SyncGroup};
use crate::ps::node::{PsNode, PsNodeConfig};
use crate::ps::ShardSpec;
use crate::staleness::{ClockEvent, StalenessStats, StalenessTracker};
use crate::wire::tcp::{TcpEndpoint, TcpServer};
use crate::wire::transport::{DelayLine, Endpoint, Inbox, InProcEndpoint};
use crate::wire::inproc_pair;

/// Step size from the convergence bound of the hybrid algorithm:
/// `1 / (L + sqrt(T L) sigma + 4 tau L alpha)`. `sigma`, `tau` and `alpha`
/// may be zero.
pub fn hybrid_lr(l: f64, sigma: f64, t: u64, tau: f64, alpha: f64) -> Result<f64> {
    let finite = [l, sigma, tau, alpha].iter().all(|v| v.is_finite());
    if !finite || l <= 0.0 || t == 0 || sigma < 0.0 || tau < 0.0 || alpha < 0.0 {
        return Err(Error::precondition(format!(
            "hybrid_lr needs L > 0, T >= 1 and non-negative sigma, tau, alpha; got L={l} sigma={sigma} T={t} tau={tau} alpha={alpha}"
        )));
    }
    Ok(1.0 / (l + (t as f64 * l).sqrt() * sigma + 4.0 * tau * l * alpha))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DropCounters {
    /// Samples abandoned with an embedding worker's buffer.
    pub buffer_dropped: u64,
    /// Backward passes that found their sample gone.
    pub late_gradients: u64,
    /// Samples whose pull came back missing.
    pub missing_pulls: u64,
    /// Samples whose gradients never reached an embedding worker.
    pub emit_failures: u64,
    /// Samples still buffered when the run ended.
    pub drained_at_end: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FaultRecord {
    pub fault: FaultSpec,
    pub dropped: Option<u64>,
    pub checkpoint_step: Option<u64>,
    /// PS drill: ids probed on the recovered node.
    pub probed: usize,
    /// PS drill: probes equal to the checkpointed values.
    pub matched: usize,
    /// PS drill: probes whose live value had moved past the checkpoint.
    pub changed_since_checkpoint: usize,
    /// NN drill: every replica equals the checkpoint after recovery.
    pub replicas_match_checkpoint: Option<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PhaseSeconds {
    pub generate: f64,
    pub setup: f64,
    pub train: f64,
    pub hooks: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunMetrics {
    pub mode: Option<Mode>,
    pub steps: u64,
    pub samples_per_step: usize,
    /// Mean training loss of every step; `None` when no sample trained.
    pub loss: Vec<Option<f64>>,
    /// `(step, held-out AUC)` after the step.
    pub auc: Vec<(u64, f64)>,
    pub final_auc: f64,
    pub final_test_loss: f64,
    pub samples_per_sec: f64,
    /// Cumulative training throughput after each step.
    pub step_samples_per_sec: Vec<f64>,
    pub step_max_staleness: Vec<u64>,
    /// Cumulative drops after each step.
    pub step_drops: Vec<u64>,
    pub staleness: StalenessStats,
    pub registered: u64,
    pub trained: u64,
    pub drops: DropCounters,
    pub evictions: u64,
    pub misses: u64,
    pub checkpoints: Vec<u64>,
    pub faults: Vec<FaultRecord>,
    pub hash_checks: u64,
    pub dense_reloads: u64,
    pub alpha_hat: Option<f64>,
    pub dispatch: DispatchStats,
    pub phases: PhaseSeconds,
    /// Parameter hash of every replica at the end.
    pub final_replica_hashes: Vec<u64>,
    #[serde(skip)]
    pub final_models: Vec<DenseModel<f32>>,
    #[serde(skip)]
    pub event_log: Option<Vec<ClockEvent>>,
}

impl RunMetrics {
    pub fn max_staleness(&self) -> u64 {
        self.staleness.max
    }

    pub fn total_drops(&self) -> u64 {
        self.drops.buffer_dropped + self.drops.drained_at_end
    }
}

pub const METRICS_CSV_HEADER: &str = "step,loss,auc,samples_per_sec,max_staleness,drops";

/// One row per step; `auc` is empty on steps without an evaluation.
pub fn metrics_csv(m: &RunMetrics) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    let mut evals = m.auc.iter().peekable();
    for s in 0..m.loss.len() {
        let loss = m.loss[s].map(|l| format!("{l:.6}")).unwrap_or_default();
        let auc = match evals.peek() {
            Some(&&(step, a)) if step == s as u64 => {
                evals.next();
                format!("{a:.6}")
            }
            _ => String::new(),
        };
        let _ = writeln!(
            out,
            "{s},{loss},{auc},{:.1},{},{}",
            m.step_samples_per_sec.get(s).copied().unwrap_or(0.0),
            m.step_max_staleness.get(s).copied().unwrap_or(0),
            m.step_drops.get(s).copied().unwrap_or(0)
        );
    }
    out
}

/// Write `metrics.csv` and `report.json` into `dir`.
pub fn write_run_outputs(dir: &Path, cfg: &TrainConfig, m: &RunMetrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(m))?;
    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a TrainConfig,
        metrics: &'a RunMetrics,
    }
    let json = serde_json::to_string_pretty(&Report { config: cfg, metrics: m })
        .map_err(|e| Error::Internal(format!("report serialization: {e}")))?;
    fs::write(dir.join("report.json"), json)?;
    Ok(())
}

enum Listener {
    InProc(InProcEndpoint),
    Tcp(TcpServer),
}

impl Listener {
    /// `slot` numbers the listeners of a run; with a fixed port in
    /// `listen_addr` listener `slot` binds port + slot.
    fn open(c: &ClusterConfig, slot: usize, name: &str) -> Result<(Listener, Inbox)> {
        Ok(match c.transport {
            TransportKind::Inproc => {
                let (ep, inbox) = inproc_pair(name);
                (Listener::InProc(ep), inbox)
            }
            TransportKind::Tcp => {
                let (server, inbox) = TcpServer::bind(&c.listener_addr(slot)?)?;
                (Listener::Tcp(server), inbox)
            }
        })
    }

    fn connect(&self, name: &str) -> Result<Arc<dyn Endpoint>> {
        Ok(match self {
            Listener::InProc(ep) => Arc::new(ep.clone()),
            Listener::Tcp(server) => Arc::new(TcpEndpoint::connect(server.local_addr(), name)?),
        })
    }
}

fn spawn<T: Send + 'static>(name: String, f: impl FnOnce() -> T + Send + 'static) -> Result<thread::JoinHandle<T>> {
    Ok(thread::Builder::new().name(name).spawn(f)?)
}

/// Optional knobs that are not part of the run configuration.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Also write PS checkpoints as files here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Skip the α estimate (it scans the whole training split).
    pub skip_alpha: bool,
}

/// Generate the configured dataset and train on it.
pub fn run_training(cfg: &TrainConfig) -> Result<RunMetrics> {
    run_training_with(cfg, &RunOptions::default())
}

/// [`run_training`] with explicit options, e.g. a directory that receives
/// every PS checkpoint.
pub fn run_training_with(cfg: &TrainConfig, opts: &RunOptions) -> Result<RunMetrics> {
    cfg.validate()?;
    let started = Instant::now();
    let ds = generate_synthetic(&cfg.data, cfg.train.data_seed)?;
    let generate = started.elapsed().as_secs_f64();
    let mut m = run_training_on(cfg, &ds, opts)?;
    m.phases.generate = generate;
    Ok(m)
}

/// Number of steps a config trains for on a dataset of `n` samples.
pub fn planned_steps(cfg: &TrainConfig, n: usize) -> Result<(usize, u64)> {
    let n_train = ((n as f64) * (1.0 - cfg.train.holdout_fraction)).floor() as usize;
    let per_step = cfg.cluster.nn_workers * cfg.train.batch_size;
    let available = (n_train / per_step) as u64;
    let steps = if cfg.train.steps == 0 { available } else { cfg.train.steps };
    if steps == 0 || steps > available {
        return Err(Error::Config(format!(
            "{n_train} training samples allow {available} steps of {per_step}; {steps} requested"
        )));
    }
    Ok((n_train, steps))
}

struct Hooks<'a> {
    cfg: &'a TrainConfig,
    ds: &'a Dataset,
    test: std::ops::Range<usize>,
    test_ids: Vec<u64>,
    gate: &'a StepGate,
    ps: &'a PsClient,
    nodes: &'a [Arc<PsNode>],
    ews: &'a [Arc<EmbeddingWorker>],
    models: Vec<Arc<Mutex<DenseModel<f32>>>>,
    faults: Vec<FaultSpec>,
    m: &'a mut RunMetrics,
}

impl Hooks<'_> {
    fn run(&mut self, s: u64, last: bool) -> Result<()> {
        let t = &self.cfg.train;
        for f in self.faults.clone().iter().filter(|f| f.step == s) {
            let rec = self.inject(f)?;
            self.m.faults.push(rec);
        }
        if self.cfg.train.mode == Mode::Async && (s + 1).is_multiple_of(t.average_every) {
            self.average_replicas()?;
        }
        if t.checkpoint_every > 0 && (s + 1).is_multiple_of(t.checkpoint_every) {
            for n in self.nodes {
                n.save_checkpoint(s)?;
            }
            self.m.checkpoints.push(s);
        }
        if last || (t.eval_every > 0 && (s + 1).is_multiple_of(t.eval_every)) {
            let (a, loss) = self.evaluate()?;
            self.m.auc.push((s, a));
            self.m.final_auc = a;
            self.m.final_test_loss = loss;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<(f64, f64)> {
        let model = self.models[0].lock().clone();
        evaluate_model(&model, self.ds, self.test.clone(), &self.test_ids, self.ps, self.cfg)
    }

    fn average_replicas(&self) -> Result<()> {
        let flats: Vec<Vec<f32>> = self.models.iter().map(|m| m.lock().flatten()).collect();
        let k = flats.len() as f64;
        let mean: Vec<f32> = (0..flats[0].len())
            .map(|i| (flats.iter().map(|f| f[i] as f64).sum::<f64>() / k) as f32)
            .collect();
        for m in &self.models {
            m.lock().load_flat(&mean)?;
        }
        Ok(())
    }

    fn inject(&mut self, f: &FaultSpec) -> Result<FaultRecord> {
        let mut rec = FaultRecord {
            fault: *f,
            dropped: None,
            checkpoint_step: None,
            probed: 0,
            matched: 0,
            changed_since_checkpoint: 0,
            replicas_match_checkpoint: None,
        };
        let out_of_range = || Error::Config(format!("fault {} names a component that does not exist", String::from(*f)));
        match f.target {
            FaultTarget::EmbeddingWorker => {
                let ew = self.ews.get(f.index).ok_or_else(out_of_range)?;
                rec.dropped = Some(ew.drop_buffer() as u64);
            }
            FaultTarget::EmbeddingPs => {
                let node = self.nodes.get(f.index).ok_or_else(out_of_range)?;
                rec.checkpoint_step = node.last_checkpoint_step();
                let mut ids: Vec<u64> = (0..self.test.start.min(4000))
                    .flat_map(|i| self.ds.id_features(i).groups.into_iter().flatten())
                    .filter(|&id| node.hosts(id))
                    .collect();
                ids.sort_unstable();
                ids.dedup();
                let live = node.probe(&ids)?;
                node.crash_and_recover()?;
                let saved = node.checkpoint_probe(&ids)?;
                let after = node.probe(&ids)?;
                let d = self.cfg.model.embedding_dim;
                rec.probed = ids.len();
                for i in 0..ids.len() {
                    let r = i * d..(i + 1) * d;
                    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                    if bits(&after[r.clone()]) == bits(&saved[r.clone()]) {
                        rec.matched += 1;
                    }
                    if bits(&live[r.clone()]) != bits(&saved[r]) {
                        rec.changed_since_checkpoint += 1;
                    }
                }
            }
            FaultTarget::NnWorker => {
                let victim = self.models.get(f.index).ok_or_else(out_of_range)?;
                let Some((step, params)) = self.gate.dense_checkpoint() else {
                    return Err(Error::Unrecoverable("NN worker lost before any dense checkpoint".into()));
                };
                // The lost replica's state is gone; every replica restarts
                // from the checkpoint.
                victim.lock().load_flat(&vec![0.0; params.len()])?;
                for m in &self.models {
                    m.lock().load_flat(&params)?;
                }
                self.gate.request_reload();
                let want: Vec<u32> = params.iter().map(|v| v.to_bits()).collect();
                rec.checkpoint_step = Some(step);
                rec.replicas_match_checkpoint = Some(
                    self.models
                        .iter()
                        .all(|m| m.lock().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>() == want),
                );
            }
            FaultTarget::ReplicaBitflip => {
                let m = self.models.get(f.index.max(1)).ok_or_else(out_of_range)?;
                let mut m = m.lock();
                let w = &mut m.layers[0].weight[0];
                *w = f32::from_bits(w.to_bits() ^ 1);
            }
        }
        Ok(rec)
    }
}

/// Held-out AUC and loss of `model`, reading embeddings without touching
/// PS recency.
pub fn evaluate_model(
    model: &DenseModel<f32>,
    ds: &Dataset,
    range: std::ops::Range<usize>,
    unique_ids: &[u64],
    ps: &PsClient,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let d = cfg.model.embedding_dim;
    let (table, _) = ps.lookup(unique_ids, true)?;
    let row = |id: u64| {
        let i = unique_ids.binary_search(&id).expect("test ids were looked up");
        &table[i * d..(i + 1) * d]
    };
    let width = ds.group_count * d;
    let mut preds = Vec::with_capacity(range.len());
    let mut labels = Vec::with_capacity(range.len());
    let chunk = 4096;
    let mut start = range.start;
    while start < range.end {
        let end = (start + chunk).min(range.end);
        let mut input = Matrix::zeros(end - start, width + ds.non_id_dim);
        for i in start..end {
            let r = input.row_mut(i - start);
            aggregate(&ds.id_features(i), d, cfg.model.aggregation, row, &mut r[..width]);
            r[width..].copy_from_slice(ds.non_id_row(i));
            labels.push(ds.label(i));
        }
        preds.extend(model.forward(&input)?.0);
        start = end;
    }
    Ok((auc(&preds, &labels)?, bce_loss(&preds, &labels)? as f64))
}

/// Train on `ds` with the configured cluster.
pub fn run_training_on(cfg: &TrainConfig, ds: &Dataset, opts: &RunOptions) -> Result<RunMetrics> {
    cfg.validate()?;
    let setup_start = Instant::now();
    if ds.group_count != cfg.data.groups || ds.non_id_dim != cfg.data.non_id_dim {
        return Err(Error::Config("dataset shape does not match the data section".into()));
    }
    let (n_train, steps) = planned_steps(cfg, ds.len())?;
    let c = &cfg.cluster;
    let t = &cfg.train;
    let (k, e, p) = (c.nn_workers, c.embedding_workers, c.ps_nodes);
    let b = t.batch_size;
    let dim = cfg.model.embedding_dim;
    let cap = cfg.effective_cap();
    let timeout = Duration::from_millis(c.timeout_ms);
    for f in &cfg.faults.events {
        if f.step >= steps {
            return Err(Error::Config(format!("fault {} is past the last step {}", String::from(*f), steps - 1)));
        }
    }
    let mut m = RunMetrics {
        mode: Some(t.mode),
        steps,
        samples_per_step: k * b,
        ..RunMetrics::default()
    };
    if !opts.skip_alpha {
        let mut train_part = Dataset::new(ds.group_count, ds.non_id_dim);
        for i in 0..n_train.min(20_000) {
            train_part.push(&ds.id_features(i), ds.non_id_row(i), ds.label(i))?;
        }
        m.alpha_hat = Some(crate::data::estimate_alpha(&train_part)?.alpha_hat);
    }

    let mut hooks_at = vec![false; steps as usize];
    for s in 0..steps {
        let s1 = s + 1;
        hooks_at[s as usize] = s1 == steps
            || (t.eval_every > 0 && s1 % t.eval_every == 0)
            || (t.checkpoint_every > 0 && s1 % t.checkpoint_every == 0)
            || (t.mode == Mode::Async && s1 % t.average_every == 0)
            || cfg.faults.events.iter().any(|f| f.step == s);
    }
    let gate = Arc::new(StepGate::new(GatePlan {
        total_steps: steps,
        staleness_cap: cap,
        workers: k,
        samples_per_step: k * b,
        hooks: hooks_at,
        stall_timeout: timeout,
    })?);

    // PS tier.
    let tracker = Arc::new(StalenessTracker::new());
    if t.event_log {
        tracker.enable_log();
    }
    let spec = ShardSpec {
        capacity: c.shard_capacity,
        dim,
        rng_salt: t.ps_seed,
        optimizer: cfg.model.embedding_optimizer,
    };
    let mut nodes = Vec::with_capacity(p);
    let mut ps_listeners = Vec::with_capacity(p);
    for i in 0..p {
        let node = PsNode::new(
            PsNodeConfig {
                node_index: i,
                spec,
                total_shards: p * c.shards_per_node,
                first_shard: i * c.shards_per_node,
                local_shards: c.shards_per_node,
                reply_kappa: None,
                checkpoint_dir: opts.checkpoint_dir.clone(),
            },
            tracker.clone(),
        )?;
        let (l, inbox) = Listener::open(c, i, &format!("ps{i}"))?;
        let n2 = node.clone();
        spawn(format!("ps{i}"), move || n2.serve(inbox))?;
        nodes.push(node);
        ps_listeners.push(l);
    }
    let ps_client = |who: &str| -> Result<PsClient> {
        let eps = ps_listeners
            .iter()
            .enumerate()
            .map(|(i, l)| l.connect(&format!("{who}->ps{i}")))
            .collect::<Result<Vec<_>>>()?;
        PsClient::new(eps, &vec![c.shards_per_node; p], dim, timeout, 3)
    };

    // Embedding workers.
    let value_kappa = t.value_codec.then_some(t.kappa);
    let window = t.shuffle_window.max(1);
    let ahead = cap as usize + window + 4;
    let mut ews = Vec::with_capacity(e);
    let mut ew_listeners = Vec::with_capacity(e);
    for r in 0..e {
        let g = gate.clone();
        let observer: ReadObserver = Arc::new(move |step, n| g.read_done(step, n));
        let latency = Duration::from_secs_f64(c.fetch_latency_ms / 1000.0);
        let ew = EmbeddingWorker::new(
            EmbeddingWorkerConfig {
                rank: r,
                buffer_capacity: ahead * k * b,
                group_count: ds.group_count,
                dim,
                aggregation: cfg.model.aggregation,
                reply_kappa: value_kappa,
                fetch_latency: latency,
            },
            ps_client(&format!("ew{r}"))?,
            (!latency.is_zero()).then(|| DelayLine::spawn(&format!("ew{r}-link"))),
            Some(observer),
        )?;
        let (l, inbox) = Listener::open(c, c.ps_nodes + r, &format!("ew{r}"))?;
        let ew2 = ew.clone();
        spawn(format!("ew{r}"), move || ew2.serve(inbox))?;
        ews.push(ew);
        ew_listeners.push(l);
    }

    // NN workers.
    let sync_mode = match t.mode {
        Mode::Sync | Mode::HybridRaw => DenseSyncMode::Barrier,
        Mode::HybridOpt => DenseSyncMode::Bucketed,
        Mode::Async => DenseSyncMode::Local,
    };
    let init = DenseModel::<f32>::new(&cfg.dense_dims(), cfg.model.init_seed)?;
    let mut nns = Vec::with_capacity(k);
    let mut nn_listeners = Vec::with_capacity(k);
    let mut sync_inboxes = Vec::with_capacity(k);
    for r in 0..k {
        let nn = NnWorker::new(
            NnWorkerConfig {
                rank: r,
                batch_size: b,
                group_count: ds.group_count,
                dim,
                non_id_dim: ds.non_id_dim,
                total_steps: steps,
                sync: sync_mode,
                lr: t.lr,
                optimizer: cfg.model.dense_optimizer,
                grad_kappa: value_kappa,
                hash_every: t.hash_every,
                input_capacity: ahead * b,
                shuffle: (t.shuffle_window > 0).then_some((t.shuffle_seed, t.shuffle_window)),
                checkpoint_every: t.checkpoint_every,
                timeout,
            },
            init.clone(),
        )?;
        let (l, inbox) = Listener::open(c, c.ps_nodes + c.embedding_workers + r, &format!("nn{r}"))?;
        let (sync_tx, sync_rx) = unbounded();
        let nn2 = nn.clone();
        spawn(format!("nn{r}-io"), move || nn2.serve(inbox, sync_tx))?;
        nns.push(nn);
        nn_listeners.push(l);
        sync_inboxes.push(sync_rx);
    }
    let models: Vec<_> = nns.iter().map(|n| n.model()).collect();

    let orchestrator_ps = ps_client("eval")?;
    let mut test_ids: Vec<u64> = (n_train..ds.len())
        .flat_map(|i| (0..ds.group_count).flat_map(move |g| ds.group(i, g).iter().copied()))
        .collect();
    test_ids.sort_unstable();
    test_ids.dedup();
    m.phases.setup = setup_start.elapsed().as_secs_f64();

    // Start training.
    let train_start = Instant::now();
    let mut workers = Vec::with_capacity(k);
    for (r, (nn, sync_rx)) in nns.iter().zip(sync_inboxes).enumerate() {
        let peers = nn_listeners
            .iter()
            .enumerate()
            .map(|(j, l)| l.connect(&format!("nn{r}->nn{j}")))
            .collect::<Result<Vec<_>>>()?;
        let ew_eps = ew_listeners
            .iter()
            .enumerate()
            .map(|(j, l)| l.connect(&format!("nn{r}->ew{j}")))
            .collect::<Result<Vec<_>>>()?;
        let sync = SyncGroup::new(r, peers, sync_rx, timeout, Some(gate.clone()));
        let nn = nn.clone();
        let g = gate.clone();
        workers.push(spawn(format!("nn{r}-train"), move || nn.run(g, ew_eps, sync))?);
    }
    let loader = {
        let ew_eps = ew_listeners
            .iter()
            .enumerate()
            .map(|(j, l)| l.connect(&format!("loader->ew{j}")))
            .collect::<Result<Vec<_>>>()?;
        let nn_eps = nn_listeners
            .iter()
            .enumerate()
            .map(|(j, l)| l.connect(&format!("loader->nn{j}")))
            .collect::<Result<Vec<_>>>()?;
        let plan = DispatchPlan {
            first: 0,
            samples_per_step: k * b,
            steps,
            compress_indices: t.index_codec,
            retry_limit: timeout,
            timeout,
        };
        let g = gate.clone();
        let ds = ds.clone();
        spawn("loader".into(), move || {
            let r = dispatch(&ds, &plan, &ew_eps, &nn_eps, &|| g.aborted().is_some());
            if let Err(e) = &r {
                g.abort(format!("loader: {e}"));
            }
            r
        })?
    };

    let committed = {
        let mut hooks = Hooks {
            cfg,
            ds,
            test: n_train..ds.len(),
            test_ids,
            gate: &gate,
            ps: &orchestrator_ps,
            nodes: &nodes,
            ews: &ews,
            models: models.clone(),
            faults: cfg.faults.events.clone(),
            m: &mut m,
        };
        commit_loop(&mut hooks, steps, t.emb_lr, train_start)
    };
    if let Err(e) = &committed {
        gate.abort(format!("step clock: {e}"));
    }
    let mut first_err = committed.err();
    for w in workers {
        let r = w.join().unwrap_or_else(|_| Err(Error::Internal("NN worker panicked".into())));
        if let Err(e) = r {
            if first_err.is_none() || matches!(first_err, Some(Error::Aborted(_))) {
                first_err = Some(e);
            }
        }
    }
    match loader.join() {
        Ok(Ok(stats)) => m.dispatch = stats,
        Ok(Err(e)) => {
            if first_err.is_none() || matches!(first_err, Some(Error::Aborted(_))) {
                first_err = Some(e);
            }
        }
        Err(_) => first_err = first_err.or(Some(Error::Internal("loader panicked".into()))),
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    // Final accounting.
    m.staleness = tracker.stats();
    m.event_log = t.event_log.then(|| tracker.take_log());
    let nn_counts: Vec<NnCounters> = nns.iter().map(|n| n.counters()).collect();
    m.hash_checks = nn_counts.iter().map(|c| c.hash_checks).sum();
    m.dense_reloads = nn_counts.iter().map(|c| c.reloads).sum();
    m.drops.emit_failures = nn_counts.iter().map(|c| c.emit_failures).sum();
    let drained: u64 = ews.iter().map(|w| w.drop_buffer() as u64).sum();
    let ew_counts: Vec<WorkerCounters> = ews.iter().map(|w| w.counters()).collect();
    m.registered = ew_counts.iter().map(|c| c.registered).sum();
    m.trained = ew_counts.iter().map(|c| c.trained).sum();
    m.drops.drained_at_end = drained;
    m.drops.buffer_dropped = ew_counts.iter().map(|c| c.buffer_dropped).sum::<u64>() - drained;
    m.drops.late_gradients = ew_counts.iter().map(|c| c.late_gradients).sum();
    m.drops.missing_pulls = ew_counts.iter().map(|c| c.missing_pulls).sum();
    m.evictions = nodes.iter().map(|n| n.eviction_count()).sum();
    m.misses = nodes.iter().map(|n| n.miss_count()).sum();
    m.final_models = models.iter().map(|x| x.lock().clone()).collect();
    m.final_replica_hashes = m.final_models.iter().map(model_hash).collect();
    Ok(m)
}

fn commit_loop(h: &mut Hooks<'_>, steps: u64, emb_lr: f32, train_start: Instant) -> Result<()> {
    let mut hook_time = Duration::ZERO;
    for s in 0..steps {
        h.gate.wait_committable(s)?;
        let (_, max_delay) = h.ps.commit(s, emb_lr)?;
        let trained = (s + 1) as f64 * h.m.samples_per_step as f64;
        let busy = train_start.elapsed().saturating_sub(hook_time).as_secs_f64().max(1e-9);
        h.m.loss.push(h.gate.step_loss(s));
        h.m.step_max_staleness.push(max_delay);
        h.m.step_samples_per_sec.push(trained / busy);
        let drops: u64 = h.ews.iter().map(|w| w.counters().buffer_dropped).sum();
        h.m.step_drops.push(drops);
        if h.gate.is_hook(s) {
            let hook_start = Instant::now();
            h.run(s, s + 1 == steps)?;
            hook_time += hook_start.elapsed();
        }
        h.gate.mark_committed(s);
    }
    let busy = train_start.elapsed().saturating_sub(hook_time).as_secs_f64().max(1e-9);
    h.m.phases.train = busy;
    h.m.phases.hooks = hook_time.as_secs_f64();
    h.m.samples_per_sec = (steps as f64 * h.m.samples_per_step as f64) / busy;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub auc: f64,
    pub auc_gap_vs_sync: f64,
    pub samples_per_sec: f64,
    pub speedup_vs_sync: f64,
    pub max_staleness: u64,
    pub mean_staleness: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonReport {
    pub rows: Vec<ModeRow>,
    /// |gap(hybrid_opt)| < |gap(async)|.
    pub gap_ordering: bool,
    /// async >= hybrid_opt >= 1.5 * sync in samples/sec.
    pub throughput_ordering: bool,
    pub partial: bool,
}

pub const COMPARISON_CSV_HEADER: &str = "mode,auc,auc_gap_vs_sync,samples_per_sec,speedup_vs_sync,max_staleness,mean_staleness,status";

impl ComparisonReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARISON_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
            };
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.1},{:.3},{},{:.4},{}",
                r.mode, r.auc, r.auc_gap_vs_sync, r.samples_per_sec, r.speedup_vs_sync, r.max_staleness, r.mean_staleness, status
            );
        }
        let verdict = |ok: bool| if ok { "pass" } else { "fail" };
        let _ = writeln!(out, "# gap_ordering,{}", verdict(self.gap_ordering));
        let _ = writeln!(out, "# throughput_ordering,{}", verdict(self.throughput_ordering));
        if self.partial {
            out.push_str("# partial,one or more runs failed\n");
        }
        out
    }
}

/// Run sync, hybrid_opt and async on identical data and seeds.
pub fn compare_modes(base: &TrainConfig) -> Result<ComparisonReport> {
    base.validate()?;
    let ds = generate_synthetic(&base.data, base.train.data_seed)?;
    let modes = [Mode::Sync, Mode::HybridOpt, Mode::Async];
    let mut rows = Vec::new();
    for mode in modes {
        let mut cfg = base.clone();
        cfg.train.mode = mode;
        let r = run_training_on(&cfg, &ds, &RunOptions::default());
        rows.push(match r {
            Ok(m) => ModeRow {
                mode,
                auc: m.final_auc,
                auc_gap_vs_sync: 0.0,
                samples_per_sec: m.samples_per_sec,
                speedup_vs_sync: 0.0,
                max_staleness: m.staleness.max,
                mean_staleness: m.staleness.mean(),
                error: None,
            },
            Err(e) => ModeRow {
                mode,
                auc: f64::NAN,
                auc_gap_vs_sync: f64::NAN,
                samples_per_sec: f64::NAN,
                speedup_vs_sync: f64::NAN,
                max_staleness: 0,
                mean_staleness: f64::NAN,
                error: Some(e.to_string()),
            },
        });
    }
    let (sync_auc, sync_tp) = (rows[0].auc, rows[0].samples_per_sec);
    for r in &mut rows {
        r.auc_gap_vs_sync = r.auc - sync_auc;
        r.speedup_vs_sync = r.samples_per_sec / sync_tp;
    }
    let partial = rows.iter().any(|r| r.error.is_some());
    let gap_ordering = !partial && rows[1].auc_gap_vs_sync.abs() < rows[2].auc_gap_vs_sync.abs();
    let throughput_ordering =
        !partial && rows[2].samples_per_sec >= rows[1].samples_per_sec && rows[1].samples_per_sec >= 1.5 * sync_tp;
    Ok(ComparisonReport {
        rows,
        gap_ordering,
        throughput_ordering,
        partial,
    })
}

/// Distinct feature ids of a sample range, ascending.
pub fn unique_ids(ds: &Dataset, range: std::ops::Range<usize>) -> Vec<u64> {
    let set: HashSet<u64> = range
        .flat_map(|i| (0..ds.group_count).flat_map(move |g| ds.group(i, g).iter().copied()))
        .collect();
    let mut v: Vec<u64> = set.into_iter().collect();
    v.sort_unstable();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hybrid_lr_cases() {
        assert_eq!(hybrid_lr(2.0, 0.0, 10, 0.0, 0.3).unwrap(), 0.5);
        assert!((hybrid_lr(1.0, 1.0, 100, 5.0, 0.1).unwrap() - 1.0 / 13.0).abs() < 1e-15);
        assert!((hybrid_lr(1.0, 1.0, 100, 5.0, 0.0).unwrap() - 1.0 / 11.0).abs() < 1e-15);
        assert!(hybrid_lr(0.0, 1.0, 1, 1.0, 1.0).is_err());
        assert!(hybrid_lr(1.0, -1.0, 1, 1.0, 1.0).is_err());
        assert!(hybrid_lr(1.0, 1.0, 0, 1.0, 1.0).is_err());
    }

    #[test]
    fn csv_rows_follow_steps() {
        let m = RunMetrics {
            loss: vec![Some(0.7), None],
            auc: vec![(1, 0.61)],
            step_samples_per_sec: vec![10.0, 20.0],
            step_max_staleness: vec![0, 2],
            step_drops: vec![0, 1],
            ..RunMetrics::default()
        };
        assert_eq!(
            metrics_csv(&m),
            "step,loss,auc,samples_per_sec,max_staleness,drops\n0,0.700000,,10.0,0,0\n1,,0.610000,20.0,2,1\n"
        );
    }
}
