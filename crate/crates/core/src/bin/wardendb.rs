//! Command-line front end: run scenario files against in-process clusters,
//! benchmark worker scaling, and inspect, damage, verify, or repair dumped
//! replica states.
//!
//! Exit codes: 0 on success, 1 on operational errors (bad arguments,
//! missing files), 2 when an invariant is violated (a stuck replica, a
//! failed script action, unexplained divergence, corrupt forests).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wardendb::crypto::Scheme;
use wardendb::harness::cluster::corrupt_rows;
use wardendb::harness::scenario::KeyDistribution;
use wardendb::harness::{report, run_scenario_dump, scenario, stateio, ScenarioConfig};

#[derive(Parser)]
#[command(name = "wardendb", version, about = "Corruption-tolerant replicated database simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file end to end and report what happened.
    Run {
        /// Scenario file, flat key = value lines.
        scenario: PathBuf,
        /// Write the line-delimited report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write a bar chart of repair sizes (or throughput) here.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Save every replica's final state and the log into this directory.
        #[arg(long)]
        dump_state: Option<PathBuf>,
    },
    /// Throughput sweep over worker counts, with and without forests.
    Bench {
        #[arg(long, default_value_t = 2000)]
        rows: u64,
        #[arg(long, default_value_t = 4000)]
        transactions: u64,
        /// Comma-separated worker counts.
        #[arg(long, default_value = "1,2,4,8")]
        workers: String,
        /// Forest maintenance: on, off, or both.
        #[arg(long, default_value = "both")]
        merkle: String,
        #[arg(long, default_value = "uniform")]
        distribution: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Signature scheme: null, ed25519, or rsa2048.
        #[arg(long, default_value = "null")]
        signatures: String,
        #[arg(long, default_value_t = 4)]
        replicas: u32,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Run a scenario and keep only the dumped states and log.
    DumpState {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check each dumped state's forests against its rows.
    VerifyDigests {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Group dumped replica states by combined digest.
    CompareStates {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Corrupt rows in one dumped replica state, in place.
    InjectCorrupt {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        replica: u32,
        #[arg(long)]
        table: String,
        #[arg(long)]
        rows: u64,
        #[arg(long)]
        leaves: u64,
        /// tm1 keeps the forest consistent with the damage; tm2 leaves it
        /// stale so only row reads can reveal the change.
        #[arg(long, default_value = "tm1")]
        mode: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Repair dumped replica states from the majority digest group.
    Recover {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Rebuild one dumped replica's forests from its rows, making any
    /// stealth damage visible to digest comparison.
    RebuildForest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        replica: u32,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Run { scenario, report, plot, dump_state } => {
            run_cmd(&scenario, report.as_deref(), plot.as_deref(), dump_state.as_deref())
        }
        Cmd::Bench {
            rows,
            transactions,
            workers,
            merkle,
            distribution,
            seed,
            signatures,
            replicas,
            report,
            plot,
        } => bench_cmd(BenchArgs {
            rows,
            transactions,
            workers,
            merkle,
            distribution,
            seed,
            signatures,
            replicas,
            report,
            plot,
        }),
        Cmd::DumpState { scenario, out } => dump_state_cmd(&scenario, &out),
        Cmd::VerifyDigests { dir } => verify_digests_cmd(&dir),
        Cmd::CompareStates { dir } => compare_states_cmd(&dir),
        Cmd::InjectCorrupt { dir, replica, table, rows, leaves, mode, seed } => {
            inject_corrupt_cmd(&dir, replica, &table, rows, leaves, &mode, seed)
        }
        Cmd::Recover { dir } => recover_cmd(&dir),
        Cmd::RebuildForest { dir, replica } => rebuild_forest_cmd(&dir, replica),
    }
}

fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    Ok(ScenarioConfig::parse(&text)?)
}

fn emit_report(r: &report::Report, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let file = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            r.write_jsonl(file)?;
        }
        None => r.write_jsonl(std::io::stdout().lock())?,
    }
    Ok(())
}

fn run_cmd(
    scenario: &Path,
    report_path: Option<&Path>,
    plot: Option<&Path>,
    dump: Option<&Path>,
) -> Result<ExitCode> {
    let cfg = load_scenario(scenario)?;
    let outcome = run_scenario_dump(&cfg, dump)?;
    emit_report(&outcome.report, report_path)?;

    if let Some(plot_path) = plot {
        let repairs = outcome.report.kind("repair");
        let (title, unit, series) = if repairs.is_empty() {
            let out = outcome.report.kind("outcome")[0];
            let tps = out["wall"]["tps"].as_f64().unwrap_or(0.0);
            ("throughput", "transactions per second", vec![("tps".to_string(), tps)])
        } else {
            let series = repairs
                .iter()
                .map(|r| {
                    (format!("r{}", r["replica"]), r["rows_transferred"].as_f64().unwrap_or(0.0))
                })
                .collect();
            ("rows copied per repair", "rows", series)
        };
        fs::write(plot_path, report::bar_chart_svg(title, unit, &series))?;
    }

    if outcome.violated() {
        eprintln!(
            "violation: ok={} agreement={} unrepaired={}",
            outcome.ok, outcome.agreement, outcome.unrepaired
        );
        return Ok(ExitCode::from(2));
    }
    eprintln!("ok");
    Ok(ExitCode::SUCCESS)
}

struct BenchArgs {
    rows: u64,
    transactions: u64,
    workers: String,
    merkle: String,
    distribution: String,
    seed: u64,
    signatures: String,
    replicas: u32,
    report: Option<PathBuf>,
    plot: Option<PathBuf>,
}

fn bench_cmd(args: BenchArgs) -> Result<ExitCode> {
    let worker_counts: Vec<usize> = args
        .workers
        .split(',')
        .map(|w| w.trim().parse().context("worker counts are numbers"))
        .collect::<Result<_>>()?;
    let merkle_modes: Vec<bool> = match args.merkle.as_str() {
        "on" => vec![true],
        "off" => vec![false],
        "both" => vec![true, false],
        other => bail!("merkle {other:?}, want on, off, or both"),
    };
    let distribution = match args.distribution.as_str() {
        "uniform" => KeyDistribution::Uniform,
        "zipfian" => KeyDistribution::Zipfian,
        other => bail!("distribution {other:?}, want uniform or zipfian"),
    };
    let scheme = Scheme::parse(&args.signatures)?;

    let mut rpt = report::Report::new();
    let mut series = Vec::new();
    for &merkle in &merkle_modes {
        for &workers in &worker_counts {
            let cfg = ScenarioConfig {
                replicas: args.replicas,
                workers,
                scheme,
                merkle,
                rows: args.rows,
                transactions: args.transactions,
                distribution,
                seed: args.seed,
                mix: scenario::OpMix { read: 40, update: 40, rmw: 10, scan: 10, insert: 0, delete: 0 },
                ..ScenarioConfig::default()
            };
            let outcome = run_scenario_dump(&cfg, None)?;
            if outcome.violated() {
                bail!("benchmark run violated an invariant (workers={workers})");
            }
            let out = outcome.report.kind("outcome")[0].clone();
            let tps = out["wall"]["tps"].as_f64().unwrap_or(0.0);
            let elapsed = out["wall"]["elapsed_s"].as_f64().unwrap_or(0.0);
            let label = format!("w{workers}{}", if merkle { "" } else { "-nf" });
            eprintln!(
                "workers={workers} merkle={} tps={tps:.0} elapsed={elapsed:.2}s",
                if merkle { "on" } else { "off" },
            );
            rpt.push(serde_json::json!({
                "kind": "bench",
                "workers": workers,
                "merkle": merkle,
                "transactions": args.transactions,
                "wall": {"tps": tps, "elapsed_s": elapsed},
            }));
            series.push((label, tps));
        }
    }
    emit_report(&rpt, args.report.as_deref())?;
    if let Some(plot_path) = &args.plot {
        fs::write(
            plot_path,
            report::bar_chart_svg(
                "throughput by worker count",
                "transactions per second",
                &series,
            ),
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn dump_state_cmd(scenario: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = load_scenario(scenario)?;
    let outcome = run_scenario_dump(&cfg, Some(out))?;
    let offset = outcome.report.kind("dump")[0]["offset"].clone();
    eprintln!("dumped {} replicas at offset {offset} to {}", cfg.replicas, out.display());
    if outcome.violated() {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn verify_digests_cmd(dir: &Path) -> Result<ExitCode> {
    let stores = stateio::load_dir(dir)?;
    let bad = stateio::verify_forests(&stores)?;
    for (id, store) in &stores {
        let snap = store.take_snapshot();
        let digest = store.digests(snap)?.combined().to_hex();
        let status = if bad.contains_key(id) { "FOREST-MISMATCH" } else { "ok" };
        println!("replica {id}: {digest} {status}");
    }
    for (id, tables) in &bad {
        println!("replica {id}: stored forest disagrees with rows in {}", tables.join(", "));
    }
    if bad.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn compare_states_cmd(dir: &Path) -> Result<ExitCode> {
    let stores = stateio::load_dir(dir)?;
    let groups = stateio::digest_groups(&stores)?;
    for (i, group) in groups.iter().enumerate() {
        println!("group {i}: replicas {group:?}");
    }
    if groups.len() == 1 {
        println!("all {} replicas agree", stores.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("divergence: {} digest groups", groups.len());
        Ok(ExitCode::from(2))
    }
}

fn inject_corrupt_cmd(
    dir: &Path,
    replica: u32,
    table: &str,
    rows: u64,
    leaves: u64,
    mode: &str,
    seed: u64,
) -> Result<ExitCode> {
    let stealth = match mode {
        "tm1" => false,
        "tm2" => true,
        other => bail!("mode {other:?}, want tm1 or tm2"),
    };
    let stores = stateio::load_dir(dir)?;
    let store = stores
        .get(&replica)
        .with_context(|| format!("no replica-{replica}.state in {}", dir.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys = corrupt_rows(store, table, rows, leaves, stealth, &mut rng)?;
    fs::write(
        stateio::state_file(dir, replica),
        store.canonical_dump(store.take_snapshot()),
    )?;
    println!("corrupted {} rows of {table} on replica {replica} ({mode})", keys.len());
    Ok(ExitCode::SUCCESS)
}

fn recover_cmd(dir: &Path) -> Result<ExitCode> {
    let stores = stateio::load_dir(dir)?;
    let result = stateio::offline_repair(&stores)?;
    for (id, rows) in &result.repaired {
        fs::write(
            stateio::state_file(dir, *id),
            stores[id].canonical_dump(stores[id].take_snapshot()),
        )?;
        println!("replica {id}: {rows} rows copied from replica {}", result.reference);
    }
    if result.repaired.is_empty() {
        println!("nothing to repair");
    }
    let groups = stateio::digest_groups(&stores)?;
    if groups.len() != 1 {
        bail!("states still diverge after repair");
    }
    println!("all {} replicas agree", stores.len());
    Ok(ExitCode::SUCCESS)
}

fn rebuild_forest_cmd(dir: &Path, replica: u32) -> Result<ExitCode> {
    let stores = stateio::load_dir(dir)?;
    let store = stores
        .get(&replica)
        .with_context(|| format!("no replica-{replica}.state in {}", dir.display()))?;
    let mut rewritten = 0;
    for table in store.protected_tables() {
        rewritten += store.rebuild_forest(&table)?;
    }
    fs::write(
        stateio::state_file(dir, replica),
        store.canonical_dump(store.take_snapshot()),
    )?;
    println!("replica {replica}: rewrote {rewritten} forest nodes");
    Ok(ExitCode::SUCCESS)
}
