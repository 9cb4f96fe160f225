//! Synthetic CTR data with a planted teacher model, the empirical α
//! estimate, a flat dataset file, and the loader that feeds the workers.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::logistic;
use crate::error::{Error, Result};
use crate::ids::{mix64, IdFeatures, MixStream, SampleId};
use crate::wire::msg::{Message, RegisterIds, RegisterInputs};
use crate::wire::transport::{call, Endpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub samples: usize,
    pub groups: usize,
    /// Vocabulary size of every group; group `g` owns global ids
    /// `g * vocab .. (g + 1) * vocab`.
    pub vocab: u64,
    pub min_ids_per_group: usize,
    pub max_ids_per_group: usize,
    /// Zipf exponent of the id popularity; larger is more skewed.
    pub zipf_s: f64,
    pub non_id_dim: usize,
    /// Dimension of the teacher's per-id latent vectors.
    pub latent_dim: usize,
    pub id_scale: f64,
    pub dense_scale: f64,
    pub bias: f64,
    pub label_noise: f64,
    pub teacher_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 200_000,
            groups: 5,
            vocab: 100_000,
            min_ids_per_group: 1,
            max_ids_per_group: 3,
            zipf_s: 1.1,
            non_id_dim: 8,
            latent_dim: 8,
            id_scale: 1.0,
            dense_scale: 1.0,
            bias: 0.0,
            label_noise: 0.0,
            teacher_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data: {m}")));
        if self.groups == 0 || self.vocab == 0 || self.latent_dim == 0 {
            return bad("groups, vocab and latent_dim must be positive");
        }
        if self.min_ids_per_group > self.max_ids_per_group {
            return bad("min_ids_per_group exceeds max_ids_per_group");
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 0.5)");
        }
        if !(self.zipf_s.is_finite() && self.zipf_s >= 0.0) {
            return bad("zipf_s must be finite and non-negative");
        }
        if self.groups as u128 * self.vocab as u128 > u64::MAX as u128 {
            return bad("groups * vocab overflows the id space");
        }
        Ok(())
    }

    pub fn vocab_bound(&self) -> u64 {
        self.groups as u64 * self.vocab
    }
}

/// Column-oriented sample store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub group_count: usize,
    pub non_id_dim: usize,
    /// `offsets[i * group_count + g] .. offsets[i * group_count + g + 1]`
    /// indexes the ids of group `g` of sample `i`.
    pub offsets: Vec<u32>,
    pub ids: Vec<u64>,
    pub non_id: Vec<f32>,
    pub labels: Vec<f32>,
}

impl Dataset {
    pub fn new(group_count: usize, non_id_dim: usize) -> Self {
        Self {
            group_count,
            non_id_dim,
            offsets: vec![0],
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, features: &IdFeatures, non_id: &[f32], label: f32) -> Result<()> {
        if features.group_count() != self.group_count || non_id.len() != self.non_id_dim {
            return Err(Error::precondition("sample shape does not match the dataset"));
        }
        for g in &features.groups {
            self.ids.extend_from_slice(g);
            self.offsets.push(u32::try_from(self.ids.len()).map_err(|_| Error::precondition("dataset too large"))?);
        }
        self.non_id.extend_from_slice(non_id);
        self.labels.push(label);
        Ok(())
    }

    pub fn group(&self, i: usize, g: usize) -> &[u64] {
        let k = i * self.group_count + g;
        &self.ids[self.offsets[k] as usize..self.offsets[k + 1] as usize]
    }

    pub fn id_features(&self, i: usize) -> IdFeatures {
        IdFeatures::new((0..self.group_count).map(|g| self.group(i, g).to_vec()).collect())
    }

    pub fn non_id_row(&self, i: usize) -> &[f32] {
        &self.non_id[i * self.non_id_dim..(i + 1) * self.non_id_dim]
    }

    pub fn label(&self, i: usize) -> f32 {
        self.labels[i]
    }
}

/// Inverse-CDF sampler over ranks `0..n` with `P(r) ∝ (r + 1)^-s`.
struct ZipfTable {
    cdf: Vec<f64>,
}

impl ZipfTable {
    fn new(n: u64, s: f64) -> Self {
        let mut cdf = Vec::with_capacity(n as usize);
        let mut acc = 0.0;
        for r in 0..n {
            acc += ((r + 1) as f64).powf(-s);
            cdf.push(acc);
        }
        cdf.iter_mut().for_each(|c| *c /= acc);
        Self { cdf }
    }

    fn sample(&self, u: f64) -> u64 {
        (self.cdf.partition_point(|&c| c < u) as u64).min(self.cdf.len() as u64 - 1)
    }
}

/// The planted model behind the labels.
pub struct Teacher {
    latent_dim: usize,
    seed: u64,
    group_weights: Vec<Vec<f64>>,
    dense_weights: Vec<f64>,
    id_scale: f64,
    bias: f64,
}

impl Teacher {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut s = MixStream::new(mix64(cfg.teacher_seed ^ 0x7465_6163_6865_72));
        let d = cfg.latent_dim;
        let group_weights = (0..cfg.groups)
            .map(|_| (0..d).map(|_| s.next_gaussian() / (d as f64).sqrt()).collect())
            .collect();
        let dense_weights = (0..cfg.non_id_dim)
            .map(|_| s.next_gaussian() * cfg.dense_scale / (cfg.non_id_dim.max(1) as f64).sqrt())
            .collect();
        Self {
            latent_dim: d,
            seed: cfg.teacher_seed,
            group_weights,
            dense_weights,
            id_scale: cfg.id_scale,
            bias: cfg.bias,
        }
    }

    pub fn latent(&self, id: u64, out: &mut [f64]) {
        let mut s = MixStream::new(mix64(id ^ mix64(self.seed)));
        out.iter_mut().for_each(|v| *v = s.next_gaussian());
    }

    /// Teacher logit of a sample.
    pub fn score(&self, features: &IdFeatures, non_id: &[f32]) -> f64 {
        let mut z = vec![0.0; self.latent_dim];
        let mut mean = vec![0.0; self.latent_dim];
        let mut total = self.bias;
        for (g, ids) in features.groups.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            mean.fill(0.0);
            for &id in ids {
                self.latent(id, &mut z);
                mean.iter_mut().zip(&z).for_each(|(m, v)| *m += v);
            }
            let n = ids.len() as f64;
            total += self.id_scale * self.group_weights[g].iter().zip(&mean).map(|(w, m)| w * m / n).sum::<f64>();
        }
        total + self.dense_weights.iter().zip(non_id).map(|(w, &x)| w * x as f64).sum::<f64>()
    }
}

/// Deterministic given `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let teacher = Teacher::new(cfg);
    let zipf = ZipfTable::new(cfg.vocab, cfg.zipf_s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(cfg.groups, cfg.non_id_dim);
    let mut features = IdFeatures::new(vec![Vec::new(); cfg.groups]);
    let mut non_id = vec![0.0f32; cfg.non_id_dim];
    for _ in 0..cfg.samples {
        for (g, ids) in features.groups.iter_mut().enumerate() {
            ids.clear();
            let n = rng.gen_range(cfg.min_ids_per_group..=cfg.max_ids_per_group);
            for _ in 0..n {
                ids.push(g as u64 * cfg.vocab + zipf.sample(rng.gen::<f64>()));
            }
        }
        for v in non_id.iter_mut() {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            *v = ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32;
        }
        let p = logistic(teacher.score(&features, &non_id));
        let mut y = rng.gen::<f64>() < p;
        if rng.gen::<f64>() < cfg.label_noise {
            y = !y;
        }
        ds.push(&features, &non_id, if y { 1.0 } else { 0.0 })?;
    }
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaEstimate {
    /// Largest fraction of samples containing any single id.
    pub alpha_hat: f64,
    pub per_group: Vec<f64>,
}

/// Empirical containment frequency of the most common id, overall and
/// within each group. Repeats inside one sample count once.
pub fn estimate_alpha(ds: &Dataset) -> Result<AlphaEstimate> {
    if ds.is_empty() {
        return Err(Error::precondition("alpha of an empty dataset"));
    }
    let mut overall: HashMap<u64, u64> = HashMap::new();
    let mut groups: Vec<HashMap<u64, u64>> = vec![HashMap::new(); ds.group_count];
    let mut seen: Vec<u64> = Vec::new();
    for i in 0..ds.len() {
        for (g, counts) in groups.iter_mut().enumerate() {
            seen.clear();
            seen.extend_from_slice(ds.group(i, g));
            seen.sort_unstable();
            seen.dedup();
            for &id in &seen {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        seen.clear();
        seen.extend((0..ds.group_count).flat_map(|g| ds.group(i, g).iter().copied()));
        seen.sort_unstable();
        seen.dedup();
        for &id in &seen {
            *overall.entry(id).or_insert(0) += 1;
        }
    }
    let n = ds.len() as f64;
    let max = |m: &HashMap<u64, u64>| m.values().copied().max().unwrap_or(0) as f64 / n;
    Ok(AlphaEstimate {
        alpha_hat: max(&overall),
        per_group: groups.iter().map(max).collect(),
    })
}

pub const DATASET_MAGIC: [u8; 4] = *b"HDS1";

/// Write the dataset file described in `docs/dataset.md`.
pub fn save_dataset(ds: &Dataset, mut sink: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&(ds.group_count as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.non_id_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.ids.len() as u64).to_le_bytes());
    buf.extend_from_slice(&crate::le::as_bytes(&ds.offsets));
    buf.extend_from_slice(&crate::le::as_bytes(&ds.ids));
    buf.extend_from_slice(&crate::le::as_bytes(&ds.non_id));
    buf.extend_from_slice(&crate::le::as_bytes(&ds.labels));
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    sink.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(mut source: impl Read) -> Result<Dataset> {
    let mut buf = Vec::new();
    source.read_to_end(&mut buf)?;
    let corrupt = |m: &str| Error::CheckpointCorrupt(format!("dataset file: {m}"));
    if buf.len() < 28 + 4 || buf[..4] != DATASET_MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let (body, crc) = buf.split_at(buf.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as usize;
    let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap()) as usize;
    let (groups, dim, n, id_count) = (u32_at(4), u32_at(8), u64_at(12), u64_at(20));
    let sizes = (|| {
        Some([
            n.checked_mul(groups)?.checked_add(1)?.checked_mul(4)?,
            id_count.checked_mul(8)?,
            n.checked_mul(dim)?.checked_mul(4)?,
            n.checked_mul(4)?,
        ])
    })()
    .ok_or_else(|| corrupt("header sizes overflow"))?;
    let total = sizes.iter().try_fold(28usize, |a, &s| a.checked_add(s));
    if total != Some(body.len()) {
        return Err(corrupt("section lengths do not match the header"));
    }
    let mut at = 28;
    let mut take = |len: usize| {
        let s = &body[at..at + len];
        at += len;
        s
    };
    let ds = Dataset {
        group_count: groups,
        non_id_dim: dim,
        offsets: crate::le::to_vec(take(sizes[0])),
        ids: crate::le::to_vec(take(sizes[1])),
        non_id: crate::le::to_vec(take(sizes[2])),
        labels: crate::le::to_vec(take(sizes[3])),
    };
    if ds.offsets[0] != 0
        || ds.offsets.windows(2).any(|w| w[0] > w[1])
        || *ds.offsets.last().unwrap() as usize != id_count
    {
        return Err(corrupt("offsets are not monotone"));
    }
    Ok(ds)
}

/// Which samples the loader feeds and how they are split.
#[derive(Clone, Debug)]
pub struct DispatchPlan {
    /// Index of the first training sample in the dataset.
    pub first: usize,
    /// Samples per global step (`K * b`).
    pub samples_per_step: usize,
    pub steps: u64,
    pub compress_indices: bool,
    /// Give up on a backpressured worker after this long.
    pub retry_limit: Duration,
    pub timeout: Duration,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DispatchStats {
    pub registered: u64,
    pub dispatched: u64,
    pub backpressure_retries: u64,
}

/// Sample `i` of the stream goes to embedding worker `i % E` and NN worker
/// `i % K`; each step's samples are registered before their non-id part is
/// dispatched, so per-worker stream order is preserved.
pub fn dispatch(
    ds: &Dataset,
    plan: &DispatchPlan,
    embedding_workers: &[Arc<dyn Endpoint>],
    nn_workers: &[Arc<dyn Endpoint>],
    stop: &dyn Fn() -> bool,
) -> Result<DispatchStats> {
    let (e, k) = (embedding_workers.len(), nn_workers.len());
    if e == 0 || k == 0 {
        return Err(Error::Config("dispatch needs at least one worker of each kind".into()));
    }
    let mut stats = DispatchStats::default();
    let mut sample_ids = vec![SampleId(0); plan.samples_per_step];
    for step in 0..plan.steps {
        let base = plan.first + step as usize * plan.samples_per_step;
        if base + plan.samples_per_step > ds.len() {
            return Err(Error::precondition("dataset shorter than the planned steps"));
        }
        for (rank, ep) in embedding_workers.iter().enumerate() {
            let members: Vec<usize> = (rank..plan.samples_per_step).step_by(e).collect();
            if members.is_empty() {
                continue;
            }
            let frame = RegisterIds {
                features: members.iter().map(|&j| ds.id_features(base + j)).collect(),
            }
            .encode(plan.compress_indices)?;
            let ack = with_backpressure(ep.as_ref(), frame, plan, stop, &mut stats)?;
            if ack.len() != members.len() {
                return Err(Error::protocol(0, "registration ack does not match the batch"));
            }
            for (&j, id) in members.iter().zip(ack) {
                sample_ids[j] = SampleId(id);
            }
            stats.registered += members.len() as u64;
        }
        for (rank, ep) in nn_workers.iter().enumerate() {
            let members: Vec<usize> = (rank..plan.samples_per_step).step_by(k).collect();
            let frame = RegisterInputs {
                sample_ids: members.iter().map(|&j| sample_ids[j]).collect(),
                non_id_dim: ds.non_id_dim,
                non_id: members.iter().flat_map(|&j| ds.non_id_row(base + j).iter().copied()).collect(),
                labels: members.iter().map(|&j| ds.label(base + j)).collect(),
            }
            .encode();
            with_backpressure(ep.as_ref(), frame, plan, stop, &mut stats)?;
            stats.dispatched += members.len() as u64;
        }
    }
    Ok(stats)
}

fn with_backpressure(
    ep: &dyn Endpoint,
    frame: Vec<u8>,
    plan: &DispatchPlan,
    stop: &dyn Fn() -> bool,
    stats: &mut DispatchStats,
) -> Result<Vec<u64>> {
    let started = Instant::now();
    loop {
        if stop() {
            return Err(Error::Aborted("loader stopped".into()));
        }
        match call(ep, frame.clone(), plan.timeout).and_then(|f| Message::decode(&f)) {
            Ok(Message::Ack(v)) => return Ok(v),
            Ok(other) => return Err(Error::protocol(0, format!("loader expected an ack, got {other:?}"))),
            Err(Error::Backpressure(m)) => {
                if started.elapsed() > plan.retry_limit {
                    return Err(Error::Backpressure(format!("{}: gave up after {:?}: {m}", ep.name(), plan.retry_limit)));
                }
                stats.backpressure_retries += 1;
                thread::sleep(Duration::from_micros(500));
            }
            Err(e) => return Err(e),
        }
    }
}
