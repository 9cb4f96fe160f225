use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_ps::bench::{bench_codec, bench_lru};
use hybrid_ps::config::{FaultSpec, TrainConfig};
use hybrid_ps::data::{generate_synthetic, save_dataset};
use hybrid_ps::orchestrator::{compare_modes, run_training_with, write_run_outputs, RunOptions};
use hybrid_ps::Error;

#[derive(Parser)]
#[command(name = "hybrid-ps", version, about = "Train sparse-embedding CTR models on a simulated parameter-server cluster")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override one key, e.g. `--set train.mode=sync`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Fault events, comma separated: `target[:index]@step`.
    #[arg(long)]
    faults: Option<String>,
    /// Also write PS shard checkpoints here (train only).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training job; writes metrics.csv and report.json.
    Train(RunArgs),
    /// Run sync, hybrid_opt and async on the same data; writes comparison.csv.
    Compare(RunArgs),
    /// Measure codec compression ratio, error and speed.
    BenchCodec {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        batch_size: usize,
        #[arg(long, default_value_t = 200)]
        batches: usize,
        #[arg(long, default_value_t = 256)]
        block_len: usize,
        #[arg(long, default_value_t = 1024.0)]
        kappa: f32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Measure LRU store throughput and allocation behavior.
    BenchLru {
        #[arg(long, default_value_t = 65536)]
        capacity: usize,
        #[arg(long, default_value_t = 1_000_000)]
        ops: usize,
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write the configured synthetic dataset to a file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, set: &[String], faults: Option<&str>) -> Result<TrainConfig, Error> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p, set)?,
        None => TrainConfig::from_toml_with("", set)?,
    };
    if let Some(list) = faults {
        for f in list.split(',').filter(|f| !f.trim().is_empty()) {
            cfg.faults.events.push(f.trim().parse::<FaultSpec>()?);
        }
        cfg.validate()?;
    }
    Ok(cfg)
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("bench results serialize"));
}

fn run(cmd: Cmd) -> Result<ExitCode, Error> {
    match cmd {
        Cmd::Train(a) => {
            let cfg = load_config(a.config.as_deref(), &a.set, a.faults.as_deref())?;
            let opts = RunOptions {
                checkpoint_dir: a.checkpoint_dir.clone(),
                ..RunOptions::default()
            };
            let m = run_training_with(&cfg, &opts)?;
            write_run_outputs(&a.out, &cfg, &m)?;
            println!(
                "mode {} steps {} final_auc {:.5} samples/sec {:.0} max_staleness {}",
                cfg.train.mode, m.steps, m.final_auc, m.samples_per_sec, m.staleness.max
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare(a) => {
            let cfg = load_config(a.config.as_deref(), &a.set, a.faults.as_deref())?;
            let report = compare_modes(&cfg)?;
            fs::create_dir_all(&a.out)?;
            let csv = report.to_csv();
            fs::write(a.out.join("comparison.csv"), &csv)?;
            print!("{csv}");
            Ok(if report.partial { ExitCode::from(3) } else { ExitCode::SUCCESS })
        }
        Cmd::BenchCodec { config, batch_size, batches, block_len, kappa, seed } => {
            let cfg = load_config(config.as_deref(), &[], None)?;
            print_json(&bench_codec(&cfg.data, batch_size, batches, block_len, kappa, seed)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::BenchLru { capacity, ops, dim, seed } => {
            print_json(&bench_lru(capacity, ops, dim, seed)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GenData { config, set, out } => {
            let cfg = load_config(config.as_deref(), &set, None)?;
            let ds = generate_synthetic(&cfg.data, cfg.train.data_seed)?;
            save_dataset(&ds, BufWriter::new(File::create(&out)?))?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    run(cli.cmd).unwrap_or_else(|e| exit_for(&e))
}
