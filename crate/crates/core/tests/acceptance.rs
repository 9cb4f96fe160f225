//! Acceptance run: every criterion at its stated tolerance, one pass/fail
//! line each. Exits nonzero if any criterion fails.

#[path = "common/gradient.rs"]
mod gradient;
#[path = "common/lru_model.rs"]
mod lru_model;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hybrid_ps::codec::{compress_indices, compress_values, decompress_indices, decompress_values, MAX_BATCH};
use hybrid_ps::config::{FaultSpec, Mode, TrainConfig};
use hybrid_ps::data::{generate_synthetic, Dataset};
use hybrid_ps::ids::IdFeatures;
use hybrid_ps::nn_worker::{sync_mesh, tree_mean};
use hybrid_ps::orchestrator::{hybrid_lr, run_training_on, RunMetrics, RunOptions};
use hybrid_ps::ps::checkpoint::{decode, encode};
use hybrid_ps::ps::shard::{EmbeddingOptimizer, PsShard};
use hybrid_ps::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn opts() -> RunOptions {
    RunOptions { skip_alpha: true, ..RunOptions::default() }
}

fn seeded(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.train.data_seed = seed;
    c.train.ps_seed = seed + 10;
    c.model.init_seed = seed + 20;
    c
}

fn run(cfg: &TrainConfig, ds: &Dataset) -> Result<RunMetrics, String> {
    run_training_on(cfg, ds, &opts()).map_err(|e| format!("{} run failed: {e}", cfg.train.mode))
}

/// Default-benchmark runs shared by several criteria.
struct Baseline {
    seed1: Dataset,
    sync: RunMetrics,
    hybrid: RunMetrics,
    /// `(seed, sync, hybrid_opt, async)` final AUCs and max staleness.
    per_seed: Vec<(u64, f64, f64, f64, u64, u64)>,
}

fn baseline() -> Result<Baseline, String> {
    let mut per_seed = Vec::new();
    let mut keep = None;
    for seed in 1..=3 {
        let base = seeded(seed);
        let ds = generate_synthetic(&base.data, seed).map_err(|e| e.to_string())?;
        let mut ms = Vec::new();
        for mode in [Mode::Sync, Mode::HybridOpt, Mode::Async] {
            let mut c = base.clone();
            c.train.mode = mode;
            ms.push(run(&c, &ds)?);
        }
        per_seed.push((seed, ms[0].final_auc, ms[1].final_auc, ms[2].final_auc, ms[1].staleness.max, ms[2].staleness.max));
        if seed == 1 {
            let hybrid = ms.swap_remove(1);
            keep = Some((ds, ms.swap_remove(0), hybrid));
        }
    }
    let (seed1, sync, hybrid) = keep.unwrap();
    Ok(Baseline { seed1, sync, hybrid, per_seed })
}

fn c1(b: &Baseline) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for &(seed, s, h, a, _, _) in &b.per_seed {
        let (gh, ga) = ((h - s).abs(), (a - s).abs());
        ok &= gh <= 0.003 && ga > gh;
        parts.push(format!("seed {seed}: sync {s:.4} |hyb-sync| {gh:.5} |async-sync| {ga:.5}"));
    }
    check(ok, parts.join("; "))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c2() -> Outcome {
    let mut base = TrainConfig::default();
    base.cluster.fetch_latency_ms = 5.0;
    base.train.steps = 200;
    let ds = generate_synthetic(&base.data, base.train.data_seed).map_err(|e| e.to_string())?;
    let mut tp = Vec::new();
    for mode in [Mode::Sync, Mode::HybridOpt, Mode::Async] {
        let mut c = base.clone();
        c.train.mode = mode;
        let mut reps = Vec::new();
        for _ in 0..3 {
            reps.push(run(&c, &ds)?.samples_per_sec);
        }
        tp.push(median(reps));
    }
    let (s, h, a) = (tp[0], tp[1], tp[2]);
    check(
        a >= h && h >= 1.5 * s,
        format!("samples/sec sync {s:.0} hybrid_opt {h:.0} ({:.2}x) async {a:.0} ({:.2}x)", h / s, a / s),
    )
}

fn c3(b: &Baseline) -> Outcome {
    let worst = b.per_seed.iter().map(|r| r.4.max(r.5)).max().unwrap_or(0);
    let mut cap0 = seeded(1);
    cap0.train.mode = Mode::HybridOpt;
    cap0.train.staleness_cap = 0;
    let h0 = run(&cap0, &b.seed1)?;
    let pairs: Vec<_> = b.sync.auc.iter().zip(&h0.auc).collect();
    let trace_ok = b.sync.auc.len() == h0.auc.len() && pairs.iter().all(|((s1, a1), (s2, a2))| s1 == s2 && (a1 - a2).abs() <= 0.001);
    let max_dev = pairs.iter().map(|((_, a1), (_, a2))| (a1 - a2).abs()).fold(0.0, f64::max);
    check(
        worst <= 5 && trace_ok,
        format!("max staleness over cap-5 runs {worst}; cap-0 vs sync trace: {} evals, max |dAUC| {max_dev:.2e}", pairs.len()),
    )
}

fn c4() -> Outcome {
    let worst = gradient::check_instances(100, 1e-4)?;
    Ok(format!("100 instances, max relative error {worst:.2e}"))
}

fn c5() -> Outcome {
    lru_model::check_sequences(50, 100_000)?;
    lru_model::check_no_growth(1_000_000)?;
    Ok("50 seeds x 1e5 ops match the model; no growth over 1e6 ops after warm-up".into())
}

fn c6(b: &Baseline) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 0..10_000 {
        let batch_len = rng.gen_range(0..200);
        let groups = rng.gen_range(1..5);
        let batch: Vec<IdFeatures> = (0..batch_len)
            .map(|_| {
                IdFeatures::new(
                    (0..groups)
                        .map(|_| {
                            let mut g: Vec<u64> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..500)).collect();
                            g.sort_unstable();
                            g
                        })
                        .collect(),
                )
            })
            .collect();
        let c = compress_indices(&batch).map_err(|e| e.to_string())?;
        if decompress_indices(&c, batch.len()).map_err(|e| e.to_string())? != batch {
            return Err(format!("index batch {n} did not roundtrip"));
        }
    }
    let big = vec![IdFeatures::new(vec![vec![1]]); MAX_BATCH + 1];
    if !matches!(compress_indices(&big), Err(Error::Precondition(_))) || compress_indices(&big[..MAX_BATCH]).is_err() {
        return Err("batch-size limit not enforced at 65535".into());
    }
    let mut worst = 0.0f64;
    for n in 0..10_000 {
        let scale = 10f32.powf(rng.gen_range(-6.0..6.0));
        let v: Vec<f32> = (0..rng.gen_range(1..512)).map(|_| rng.gen_range(-1.0f32..1.0) * scale).collect();
        let back = decompress_values(&compress_values(&v, 1024.0).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let max = v.iter().fold(0.0f32, |m, x| m.max(x.abs())) as f64;
        for (a, b) in v.iter().zip(&back) {
            let r = (*a as f64 - *b as f64).abs() / max;
            worst = worst.max(r);
            if r > 2f64.powi(-11) {
                return Err(format!("value block {n}: error {r:.3e} of max exceeds 2^-11"));
            }
        }
    }
    let mut on = seeded(1);
    on.train.value_codec = true;
    on.train.index_codec = true;
    let m = run(&on, &b.seed1)?;
    let d = (m.final_auc - b.hybrid.final_auc).abs();
    check(
        d <= 0.002,
        format!("1e4 index batches exact; value error <= {worst:.2e} of max; AUC codecs on {:.5} off {:.5} delta {d:.5}", m.final_auc, b.hybrid.final_auc),
    )
}

fn c7(b: &Baseline) -> Outcome {
    let mut msgs = Vec::new();
    for mode in [Mode::Sync, Mode::HybridOpt] {
        let mut c = seeded(1);
        c.train.mode = mode;
        c.train.steps = 500;
        c.train.hash_every = 1;
        let m = run(&c, &b.seed1)?;
        let want = 500 * c.cluster.nn_workers as u64;
        if m.hash_checks != want || m.final_replica_hashes.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("{mode}: {} of {want} step-boundary checks, final hashes {:x?}", m.hash_checks, m.final_replica_hashes));
        }
        msgs.push(format!("{mode}: {want} step-boundary hash checks equal"));
    }
    // Allreduce across 4 threads against a 64-bit mean.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for round in 0..20u64 {
        let len = rng.gen_range(1..2000);
        let parts: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..len).map(|_| rng.gen_range(-1.0f32..1.0) * 10f32.powi(rng.gen_range(-3..3))).collect())
            .collect();
        let groups = sync_mesh(4, Duration::from_secs(10));
        let handles: Vec<_> = groups
            .into_iter()
            .zip(parts.clone())
            .map(|(mut g, p)| std::thread::spawn(move || g.allreduce_mean(round, 0, &p, Some(1), false)))
            .collect();
        let outs: Vec<Vec<f32>> = handles
            .into_iter()
            .map(|h| h.join().unwrap().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&[f32]> = parts.iter().map(Vec::as_slice).collect();
        if outs.iter().any(|o| o != &outs[0]) || outs[0] != tree_mean(&refs).map_err(|e| e.to_string())? {
            return Err(format!("round {round}: ranks disagree or differ from the tree mean"));
        }
        for i in 0..len {
            let exact = parts.iter().map(|p| p[i] as f64).sum::<f64>() / 4.0;
            let scale = parts.iter().map(|p| (p[i] as f64).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            worst = worst.max((outs[0][i] as f64 - exact).abs() / exact.abs().max(scale * 1e-3));
        }
    }
    msgs.push(format!("allreduce max rel error {worst:.2e}"));
    check(worst <= 1e-6, msgs.join("; "))
}

fn c8() -> Outcome {
    let mut base = TrainConfig::default();
    base.train.steps = 300;
    let ds = generate_synthetic(&base.data, base.train.data_seed).map_err(|e| e.to_string())?;
    let with = |spec: &str| {
        let mut c = base.clone();
        c.faults.events.push(spec.parse::<FaultSpec>().unwrap());
        c
    };
    let t = Instant::now();
    let clean = run(&base, &ds)?;
    let ew = run(&with("embedding_worker:0@step=150"), &ds)?;
    let conserved = ew.registered == ew.trained + ew.drops.buffer_dropped + ew.drops.drained_at_end;
    let auc_gap = (ew.final_auc - clean.final_auc).abs();
    let a_ok = conserved && ew.drops.buffer_dropped > 0 && auc_gap <= 0.005;
    let a_time = t.elapsed();

    let t = Instant::now();
    let ps = run(&with("embedding_ps:1@step=250"), &ds)?;
    let f = &ps.faults[0];
    let b_ok = f.probed > 0 && f.matched == f.probed && f.changed_since_checkpoint > 0;
    let b_time = t.elapsed();

    let t = Instant::now();
    let nn = run(&with("nn_worker:3@step=250"), &ds)?;
    let g = &nn.faults[0];
    let c_ok = g.replicas_match_checkpoint == Some(true) && nn.final_replica_hashes.windows(2).all(|w| w[0] == w[1]);
    let c_time = t.elapsed();

    let limit = Duration::from_secs(120);
    check(
        a_ok && b_ok && c_ok && a_time.max(b_time).max(c_time) <= limit,
        format!(
            "(a) registered {} = trained {} + dropped {}, |dAUC| {auc_gap:.5} [{:.0?}]; (b) {}/{} probes equal checkpoint, {} had moved [{:.0?}]; (c) replicas equal checkpoint: {:?} [{:.0?}]",
            ew.registered, ew.trained, ew.drops.buffer_dropped, a_time, f.matched, f.probed, f.changed_since_checkpoint, b_time, g.replicas_match_checkpoint, c_time
        ),
    )
}

fn c9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut shard = PsShard::new(300, 8, 1, EmbeddingOptimizer::Adagrad).map_err(|e| e.to_string())?;
    let mut out = [0.0f32; 8];
    for _ in 0..5_000 {
        let id = rng.gen_range(0..1_000);
        if rng.gen_bool(0.5) {
            shard.lookup_into(id, &mut out);
        } else {
            let g: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            shard.apply(id, &g, 0.05);
        }
    }
    let first = encode(&shard).map_err(|e| e.to_string())?;
    let second = encode(&decode(&first).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if first != second {
        return Err("save -> load -> save changed bytes".into());
    }
    let mut caught = 0;
    for pos in 0..first.len() {
        let mut bad = first.clone();
        bad[pos] ^= 1 << (pos % 8);
        match catch_unwind(|| decode(&bad)) {
            Ok(Err(Error::CheckpointCorrupt(_))) => caught += 1,
            Ok(_) => return Err(format!("corruption at byte {pos} not reported")),
            Err(_) => return Err(format!("corruption at byte {pos} crashed the loader")),
        }
    }
    Ok(format!("{} bytes roundtrip exactly; {caught}/{} single-byte corruptions reported", first.len(), first.len()))
}

fn c10() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * b.abs();
    let lr = |l, s, t, tau, a| hybrid_lr(l, s, t, tau, a).map_err(|e| e.to_string());
    let mut ok = close(lr(1.0, 1.0, 100, 5.0, 0.1)?, 1.0 / 13.0);
    for l in [0.5, 1.0, 4.0] {
        ok &= close(lr(l, 0.0, 1000, 0.0, 0.7)?, 1.0 / l);
    }
    let grid = [0.1, 0.5, 1.0, 2.0, 8.0];
    let steps = [1u64, 10, 100, 10_000];
    let mut monotone = true;
    for &l in &grid {
        for &s in &grid {
            for &t in &steps {
                for &tau in &grid {
                    for &a in &grid {
                        let base = lr(l, s, t, tau, a)?;
                        monotone &= lr(l * 2.0, s, t, tau, a)? < base
                            && lr(l, s * 2.0, t, tau, a)? < base
                            && lr(l, s, t * 2, tau, a)? < base
                            && lr(l, s, t, tau * 2.0, a)? < base
                            && lr(l, s, t, tau, a * 2.0)? < base;
                    }
                }
            }
        }
    }
    let rejects = hybrid_lr(0.0, 1.0, 1, 1.0, 1.0).is_err() && hybrid_lr(1.0, -1.0, 1, 1.0, 1.0).is_err();
    check(ok && monotone && rejects, format!("unit cases {ok}, monotone on 2500-point grid {monotone}, rejects invalid input {rejects}"))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let base = catch_unwind(baseline).unwrap_or_else(|_| Err("baseline panicked".into()));
    println!("baseline: 9 default-benchmark runs (3 seeds x sync, hybrid_opt, async) in {:.1}s", started.elapsed().as_secs_f64());
    let needs_base = |f: fn(&Baseline) -> Outcome| -> Outcome {
        match &base {
            Ok(b) => f(b),
            Err(e) => Err(format!("baseline runs failed: {e}")),
        }
    };
    type Criterion<'a> = (&'a str, Box<dyn FnOnce() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("statistical-efficiency ordering", Box::new(|| needs_base(c1))),
        ("throughput ordering at 5 ms fetch latency", Box::new(c2)),
        ("bounded staleness", Box::new(|| needs_base(c3))),
        ("end-to-end gradient oracle", Box::new(c4)),
        ("LRU equivalence", Box::new(c5)),
        ("codec contracts", Box::new(|| needs_base(c6))),
        ("synchronous-replica invariant", Box::new(|| needs_base(c7))),
        ("fault drills", Box::new(c8)),
        ("checkpoint bit-exactness", Box::new(c9)),
        ("step-size formula", Box::new(c10)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let (tag, detail) = match r {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name} ({:.1}s): {detail}", i + 1, t.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of 10 passed in {:.0}s", 10 - failed, started.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
