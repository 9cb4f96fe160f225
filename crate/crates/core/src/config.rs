//! Run configuration: TOML sections `[cluster]`, `[model]`, `[data]`,
//! `[train]`, `[faults]`, with dotted `section.key=value` overrides. Every
//! key is checked against the schema; unknown keys are rejected. See
//! `docs/config.md`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::dense::DenseOptimizerKind;
use crate::embedding_worker::Aggregation;
use crate::error::{Error, Result};
use crate::ps::EmbeddingOptimizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sync,
    HybridRaw,
    HybridOpt,
    Async,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Sync, Mode::HybridRaw, Mode::HybridOpt, Mode::Async];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Sync => "sync",
            Mode::HybridRaw => "hybrid_raw",
            Mode::HybridOpt => "hybrid_opt",
            Mode::Async => "async",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Inproc,
    Tcp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub embedding_workers: usize,
    pub nn_workers: usize,
    pub ps_nodes: usize,
    pub shards_per_node: usize,
    /// Embedding rows each shard keeps before evicting.
    pub shard_capacity: usize,
    pub transport: TransportKind,
    /// TCP bind address. Port 0 picks ephemeral ports; a fixed port is
    /// the first of a consecutive range, one per listener.
    pub listen_addr: String,
    /// Simulated latency of every embedding pull reply, in milliseconds.
    pub fetch_latency_ms: f64,
    pub timeout_ms: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            embedding_workers: 2,
            nn_workers: 4,
            ps_nodes: 2,
            shards_per_node: 4,
            shard_capacity: 65_536,
            transport: TransportKind::Inproc,
            listen_addr: "127.0.0.1:0".into(),
            fetch_latency_ms: 0.0,
            timeout_ms: 60_000,
        }
    }
}

impl ClusterConfig {
    pub fn listener_count(&self) -> usize {
        self.ps_nodes + self.embedding_workers + self.nn_workers
    }

    /// Bind address of listener `slot`: `listen_addr` itself when its port
    /// is 0, otherwise the port shifted by `slot`.
    pub fn listener_addr(&self, slot: usize) -> Result<String> {
        let bad = || Error::Config(format!("cluster.listen_addr {:?} is not host:port", self.listen_addr));
        let (host, port) = self.listen_addr.rsplit_once(':').ok_or_else(bad)?;
        let port: u16 = port.parse().map_err(|_| bad())?;
        if host.is_empty() {
            return Err(bad());
        }
        if port == 0 {
            return Ok(self.listen_addr.clone());
        }
        let port = u16::try_from(port as usize + slot).map_err(|_| {
            Error::Config(format!("cluster.listen_addr: port range {port}+{slot} passes 65535"))
        })?;
        Ok(format!("{host}:{port}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub aggregation: Aggregation,
    pub embedding_optimizer: EmbeddingOptimizer,
    pub dense_optimizer: DenseOptimizerKind,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 8,
            hidden: vec![64, 32],
            aggregation: Aggregation::Mean,
            embedding_optimizer: EmbeddingOptimizer::Adagrad,
            dense_optimizer: DenseOptimizerKind::Sgd,
            init_seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: Mode,
    /// Dense learning rate.
    pub lr: f32,
    /// Embedding learning rate.
    pub emb_lr: f32,
    /// Samples per NN worker per step.
    pub batch_size: usize,
    pub staleness_cap: u64,
    /// 0 trains on every full step the training split allows.
    pub steps: u64,
    pub holdout_fraction: f64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub hash_every: u64,
    /// Steps per shuffle window; 0 keeps arrival order.
    pub shuffle_window: usize,
    pub shuffle_seed: u64,
    /// Async mode: replicas average their parameters this often.
    pub average_every: u64,
    pub value_codec: bool,
    pub index_codec: bool,
    pub kappa: f32,
    pub data_seed: u64,
    pub ps_seed: u64,
    /// Keep the full staleness event log (memory grows with the run).
    pub event_log: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: Mode::HybridOpt,
            lr: 0.1,
            emb_lr: 0.05,
            batch_size: 64,
            staleness_cap: 5,
            steps: 0,
            holdout_fraction: 0.2,
            eval_every: 100,
            checkpoint_every: 200,
            hash_every: 50,
            shuffle_window: 0,
            shuffle_seed: 0,
            average_every: 50,
            value_codec: false,
            index_codec: false,
            kappa: crate::codec::DEFAULT_KAPPA,
            data_seed: 1,
            ps_seed: 3,
            event_log: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    EmbeddingWorker,
    EmbeddingPs,
    NnWorker,
    /// Flip one parameter bit of NN replica 1.
    ReplicaBitflip,
}

/// `target@step` or `target@step=N`, optionally `target:index@step`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FaultSpec {
    pub target: FaultTarget,
    pub index: usize,
    pub step: u64,
}

impl FromStr for FaultSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("fault {s:?} is not target[:index]@step"));
        let (lhs, rhs) = s.split_once('@').ok_or_else(bad)?;
        let (name, index) = match lhs.split_once(':') {
            Some((n, i)) => (n, i.parse().map_err(|_| bad())?),
            None => (lhs, 0),
        };
        let target = match name.trim() {
            "embedding_worker" => FaultTarget::EmbeddingWorker,
            "embedding_ps" => FaultTarget::EmbeddingPs,
            "nn_worker" => FaultTarget::NnWorker,
            "replica_bitflip" => FaultTarget::ReplicaBitflip,
            _ => return Err(bad()),
        };
        let step = rhs.trim().trim_start_matches("step=").parse().map_err(|_| bad())?;
        Ok(FaultSpec { target, index, step })
    }
}

impl TryFrom<String> for FaultSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FaultSpec> for String {
    fn from(f: FaultSpec) -> String {
        let name = match f.target {
            FaultTarget::EmbeddingWorker => "embedding_worker",
            FaultTarget::EmbeddingPs => "embedding_ps",
            FaultTarget::NnWorker => "nn_worker",
            FaultTarget::ReplicaBitflip => "replica_bitflip",
        };
        format!("{name}:{}@{}", f.index, f.step)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultsConfig {
    pub events: Vec<FaultSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub cluster: ClusterConfig,
    pub model: ModelConfig,
    pub data: SynthConfig,
    pub train: TrainSection,
    pub faults: FaultsConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let c = &self.cluster;
        if c.embedding_workers == 0 || c.nn_workers == 0 || c.ps_nodes == 0 || c.shards_per_node == 0 {
            return bad("cluster: every worker and PS count must be positive".into());
        }
        if c.embedding_workers > crate::ids::MAX_EMBEDDING_WORKERS {
            return bad(format!("cluster: at most {} embedding workers", crate::ids::MAX_EMBEDDING_WORKERS));
        }
        if !(c.fetch_latency_ms.is_finite() && c.fetch_latency_ms >= 0.0) {
            return bad("cluster.fetch_latency_ms must be a non-negative number".into());
        }
        c.listener_addr(c.listener_count() - 1)?;
        if c.shard_capacity == 0 || self.model.embedding_dim == 0 {
            return bad("shard_capacity and embedding_dim must be positive".into());
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden widths must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.batch_size > crate::codec::MAX_BATCH {
            return bad(format!("train.batch_size {} outside 1..=65535", t.batch_size));
        }
        if !(t.lr > 0.0 && t.lr.is_finite() && t.emb_lr >= 0.0 && t.emb_lr.is_finite()) {
            return bad("train.lr must be positive and train.emb_lr non-negative".into());
        }
        if !(0.0..1.0).contains(&t.holdout_fraction) {
            return bad("train.holdout_fraction must lie in [0, 1)".into());
        }
        if t.value_codec && !(t.kappa > 0.0 && t.kappa <= 32768.0) {
            return bad("train.kappa must lie in (0, 32768]".into());
        }
        if t.average_every == 0 {
            return bad("train.average_every must be positive".into());
        }
        self.data.validate()?;
        Ok(())
    }

    /// The staleness bound the runtime enforces.
    pub fn effective_cap(&self) -> u64 {
        match self.train.mode {
            Mode::Sync => 0,
            _ => self.train.staleness_cap,
        }
    }

    pub fn dense_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.data.groups * self.model.embedding_dim + self.data.non_id_dim];
        dims.extend_from_slice(&self.model.hidden);
        dims.push(1);
        dims
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse `text` and apply `section.key=value` overrides on top.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(located(text, &e)))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: TrainConfig = Self::deserialize(toml::Value::Table(table.clone())).map_err(|e| {
            // Re-parse the rendered document so the message can point at a line.
            let rendered = toml::to_string(&table).unwrap_or_default();
            match toml::from_str::<TrainConfig>(if overrides.is_empty() { text } else { &rendered }) {
                Err(e2) => Error::Config(located(if overrides.is_empty() { text } else { &rendered }, &e2)),
                Ok(_) => Error::Config(e.to_string()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }
}

fn located(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().to_string();
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}: {msg}")
        }
        None => msg,
    }
}

/// Set `section.key` (or deeper) to `value`, parsed as a TOML value when
/// possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {assignment:?}: {k} is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(TrainConfig::from_toml_str("").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = TrainConfig::from_toml_str("[train]\nmode = \"sync\"\nlearning_rate = 3\n").unwrap_err();
        let Error::Config(m) = err else { panic!() };
        assert!(m.contains("line 3"), "{m}");
        assert!(m.contains("learning_rate"), "{m}");
    }

    #[test]
    fn overrides_win() {
        let cfg = TrainConfig::from_toml_with(
            "[train]\nmode = \"hybrid_opt\"\n",
            &["train.mode=sync".into(), "cluster.nn_workers=2".into(), "faults.events=[\"nn_worker@300\"]".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.mode, Mode::Sync);
        assert_eq!(cfg.cluster.nn_workers, 2);
        assert_eq!(
            cfg.faults.events,
            vec![FaultSpec {
                target: FaultTarget::NnWorker,
                index: 0,
                step: 300
            }]
        );
        assert!(TrainConfig::from_toml_with("", &["train.nope=1".into()]).is_err());
    }

    #[test]
    fn listen_addr_ranges() {
        let mut c = ClusterConfig::default();
        assert_eq!(c.listener_addr(5).unwrap(), "127.0.0.1:0");
        c.listen_addr = "0.0.0.0:7000".into();
        assert_eq!(c.listener_addr(3).unwrap(), "0.0.0.0:7003");
        c.listen_addr = "localhost:65530".into();
        assert!(c.listener_addr(9).is_err());
        assert!(TrainConfig::from_toml_with("", &["cluster.listen_addr=nowhere".into()]).is_err());
    }

    #[test]
    fn fault_syntax() {
        let f: FaultSpec = "embedding_worker:1@step=100".parse().unwrap();
        assert_eq!((f.target, f.index, f.step), (FaultTarget::EmbeddingWorker, 1, 100));
        assert!("gpu@3".parse::<FaultSpec>().is_err());
    }
}
