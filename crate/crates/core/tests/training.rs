//! Whole-cluster runs: transports, determinism, staleness accounting.

use std::collections::HashMap;

use hybrid_ps::config::{Mode, TrainConfig, TransportKind};
use hybrid_ps::data::generate_synthetic;
use hybrid_ps::orchestrator::{run_training, run_training_on, RunMetrics, RunOptions};
use hybrid_ps::staleness::ClockEvent;

fn small(mode: Mode) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.data.samples = 40_000;
    c.data.vocab = 20_000;
    c.train.mode = mode;
    c.train.batch_size = 32;
    c.train.eval_every = 50;
    c.train.checkpoint_every = 100;
    c.train.hash_every = 10;
    c
}

fn bits(v: &[(u64, f64)]) -> Vec<(u64, u64)> {
    v.iter().map(|(s, a)| (*s, a.to_bits())).collect()
}

fn same_trajectory(a: &RunMetrics, b: &RunMetrics) {
    assert_eq!(bits(&a.auc), bits(&b.auc));
    assert_eq!(a.final_replica_hashes, b.final_replica_hashes);
    assert_eq!(
        a.loss.iter().map(|l| l.map(f64::to_bits)).collect::<Vec<_>>(),
        b.loss.iter().map(|l| l.map(f64::to_bits)).collect::<Vec<_>>()
    );
}

#[test]
fn inproc_and_tcp_train_identically() {
    let cfg = small(Mode::HybridOpt);
    let mut tcp = cfg.clone();
    tcp.cluster.transport = TransportKind::Tcp;
    let a = run_training(&cfg).unwrap();
    let b = run_training(&tcp).unwrap();
    assert_eq!(a.evictions, 0);
    same_trajectory(&a, &b);
    assert_eq!(a.staleness, b.staleness);
}

/// First port of a currently free range of `n` consecutive ports.
fn free_port_range(n: usize) -> u16 {
    (20_000u16..60_000)
        .step_by(97)
        .find(|&base| (0..n as u16).all(|k| std::net::TcpListener::bind(("127.0.0.1", base + k)).is_ok()))
        .expect("no free port range")
}

#[test]
fn tcp_binds_a_fixed_port_range() {
    let mut cfg = small(Mode::HybridOpt);
    cfg.data.samples = 4_000;
    cfg.cluster.transport = TransportKind::Tcp;
    let base = free_port_range(cfg.cluster.listener_count());
    cfg.cluster.listen_addr = format!("127.0.0.1:{base}");
    let m = run_training(&cfg).unwrap();
    assert_eq!(m.registered, m.trained + m.drops.drained_at_end);
}

#[test]
fn repeated_runs_are_identical() {
    let cfg = small(Mode::Async);
    let a = run_training(&cfg).unwrap();
    let b = run_training(&cfg).unwrap();
    same_trajectory(&a, &b);
}

#[test]
fn cap_zero_is_sync_and_raw_matches_bucketed() {
    let sync = small(Mode::Sync);
    let ds = generate_synthetic(&sync.data, sync.train.data_seed).unwrap();
    let opts = RunOptions { skip_alpha: true, ..RunOptions::default() };
    let s = run_training_on(&sync, &ds, &opts).unwrap();
    let mut cap0 = small(Mode::HybridOpt);
    cap0.train.staleness_cap = 0;
    let h0 = run_training_on(&cap0, &ds, &opts).unwrap();
    same_trajectory(&s, &h0);
    assert_eq!(s.staleness.max, 0);

    let raw = run_training_on(&small(Mode::HybridRaw), &ds, &opts).unwrap();
    let opt = run_training_on(&small(Mode::HybridOpt), &ds, &opts).unwrap();
    same_trajectory(&raw, &opt);
    assert!(opt.staleness.max > 0 && opt.staleness.max <= 5);
}

#[test]
fn sync_replicas_agree_at_every_step() {
    let mut cfg = small(Mode::HybridOpt);
    cfg.train.hash_every = 1;
    let m = run_training(&cfg).unwrap();
    assert_eq!(m.hash_checks, m.steps * cfg.cluster.nn_workers as u64);
    assert!(m.final_replica_hashes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn async_replicas_drift_between_averages() {
    let mut cfg = small(Mode::Async);
    cfg.train.steps = 130;
    cfg.train.average_every = 50;
    let m = run_training(&cfg).unwrap();
    // The last averaging was after step 99; 30 local steps followed.
    assert!(m.final_replica_hashes.windows(2).any(|w| w[0] != w[1]));
    let mut cfg2 = cfg.clone();
    cfg2.train.steps = 150;
    let m2 = run_training(&cfg2).unwrap();
    assert!(m2.final_replica_hashes.windows(2).all(|w| w[0] == w[1]));
}

/// Replays the clock log with an independent version map and recomputes
/// every delay.
#[test]
fn staleness_matches_event_log_replay() {
    for (mode, cap) in [(Mode::HybridOpt, 5), (Mode::HybridOpt, 2), (Mode::Sync, 0)] {
        let mut cfg = small(mode);
        cfg.train.staleness_cap = cap;
        cfg.train.steps = 120;
        cfg.train.event_log = true;
        let m = run_training(&cfg).unwrap();
        let log = m.event_log.as_ref().unwrap();
        let mut version: HashMap<u64, u32> = HashMap::new();
        let mut hist = vec![0u64; 1];
        let (mut reads, mut applies, mut commits) = (0, 0, 0);
        for e in log {
            match e {
                ClockEvent::Read { id, version: v } => {
                    assert_eq!(*v, version.get(id).copied().unwrap_or(0), "read saw a version the log never produced");
                    reads += 1;
                }
                ClockEvent::Apply { id, read_version } => {
                    let now = version.get(id).copied().unwrap_or(0);
                    let d = now.checked_sub(*read_version).expect("apply precedes its read") as usize;
                    if hist.len() <= d {
                        hist.resize(d + 1, 0);
                    }
                    hist[d] += 1;
                    applies += 1;
                }
                ClockEvent::Commit { ids, .. } => {
                    for id in ids {
                        *version.entry(*id).or_insert(0) += 1;
                    }
                    commits += 1;
                }
            }
        }
        assert_eq!(commits, m.steps * cfg.cluster.ps_nodes as u64, "one commit per node per step");
        assert!(reads > 0 && applies > 0);
        let max = hist.len() as u64 - 1;
        assert!(max <= cap, "{mode}: delay {max} exceeds cap {cap}");
        let mut reported = m.staleness.histogram.clone();
        while reported.last() == Some(&0) && reported.len() > 1 {
            reported.pop();
        }
        assert_eq!(reported, hist, "{mode} cap {cap}");
        assert_eq!(m.staleness.max, max);
        assert_eq!(m.step_max_staleness.iter().copied().max(), Some(max));
    }
}

#[test]
fn no_sample_is_lost_without_faults() {
    let m = run_training(&small(Mode::HybridOpt)).unwrap();
    assert_eq!(m.registered, m.steps * m.samples_per_step as u64);
    assert_eq!(m.trained, m.registered);
    assert_eq!(m.total_drops(), 0);
}

#[test]
fn shuffled_runs_still_train_every_sample() {
    let mut cfg = small(Mode::HybridOpt);
    cfg.train.shuffle_window = 4;
    cfg.train.shuffle_seed = 5;
    let m = run_training(&cfg).unwrap();
    assert_eq!(m.trained, m.registered);
    assert!(m.final_auc > 0.65, "auc {}", m.final_auc);
}
