//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use gossipwatch::eval::{confusion, discovery_reference_rows, gossip_reference_rows, metrics, render_markdown};
use gossipwatch::events::{discovery_to_bytes, parse_discovery, parse_traces, traces_to_bytes, Label};
use gossipwatch::experiment::{self, ExperimentConfig};
use gossipwatch::kademlia::{craft_node_id, log_distance, xor_distance, NodeId, PeerEntry, RoutingTable, TableConfig};
use gossipwatch::netsim::{run_simulation, Scenario, SimConfig};
use gossipwatch::nn::HeadKind;
use gossipwatch::pipeline::{make_windows, Scaler};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRESET_BUDGET: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for head in [HeadKind::Regression, HeadKind::Classification] {
        for seed in 0..3 {
            worst = worst.max(common::gradient_error(head, seed));
        }
    }
    let took = start.elapsed();
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("max relative error {worst:.2e} in {took:.2?}"))
}

fn cell_oracle() -> Outcome {
    let err = common::cell_oracle_error(7, 100);
    ensure(err <= 1e-12, || format!("max deviation {err:e}"))?;
    Ok(format!("max deviation {err:.1e} over 100 inputs"))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = rng.gen_range(0..80);
        let truth: Vec<Label> = (0..n).map(|_| Label::from_honest(rng.gen_bool(0.7))).collect();
        let pred: Vec<Label> = (0..n).map(|_| Label::from_honest(rng.gen_bool(0.5))).collect();
        let m = metrics(&confusion(&pred, &truth).map_err(|e| e.to_string())?);

        let (mut tp, mut fp, mut fneg, mut agree) = (0.0, 0.0, 0.0, 0.0);
        for (p, t) in pred.iter().zip(&truth) {
            match (*p == Label::Abnormal, *t == Label::Abnormal) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
            if p == t {
                agree += 1.0;
            }
        }
        let p = (tp + fp > 0.0).then(|| tp / (tp + fp));
        let r = (tp + fneg > 0.0).then(|| tp / (tp + fneg));
        let f1 = match (p, r) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        let acc = (n > 0).then(|| agree / n as f64);
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        ensure(
            close(m.precision, p) && close(m.recall, r) && close(m.f1, f1) && close(m.accuracy, acc),
            || format!("case {case}: {m:?}"),
        )?;
    }
    let md = render_markdown(&discovery_reference_rows(), None);
    for line in [
        "| LSTM top-k detector (published-reference) | — | — | 0.81 | 0.88 | 0.85 | 0.87 |",
        "| RFC baseline (published-reference) | — | — | 0.71 | 0.95 | 0.62 | — |",
    ] {
        ensure(md.contains(line), || format!("missing row {line}"))?;
    }
    let md = render_markdown(&gossip_reference_rows(), None);
    ensure(
        md.contains("| Covert flash (published-reference) | 100 | 20 | 1.00 | 0.80 | 0.89 | 0.80 |"),
        || "gossip reference rows".into(),
    )?;
    Ok("1000 vectors agree; reference rows render".into())
}

fn run_preset(name: &str, min_f1: f64) -> Result<(f64, Duration), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = experiment::experiment_preset(name).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let summary = experiment::run_experiment(&config, dir.path()).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let f1 = summary.evaluate.metrics.f1.unwrap_or(0.0);
    ensure(f1 >= min_f1, || format!("{name}: F1 {f1:.3} < {min_f1}"))?;
    ensure(took < PRESET_BUDGET, || format!("{name}: took {took:?}"))?;
    Ok((f1, took))
}

fn gossip_presets() -> Outcome {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (name, min_f1) in [("eclipse-single", 0.95), ("covert", 0.75), ("eclipse-net", 0.75)] {
        match run_preset(name, min_f1) {
            Ok((f1, took)) => parts.push(format!("{name} F1 {f1:.3} ({:.0?})", took)),
            Err(e) => failures.push(e),
        }
    }
    if failures.is_empty() {
        Ok(parts.join(", "))
    } else {
        Err(failures.join("; "))
    }
}

fn discovery_preset() -> Outcome {
    let (f1, took) = run_preset("discovery-poisoning", 0.75)?;
    Ok(format!("discovery-poisoning top-5 F1 {f1:.3} ({took:.0?})"))
}

fn kademlia_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10_000 {
        let a = NodeId::random(&mut rng);
        let b = NodeId::random(&mut rng);
        ensure(xor_distance(&a, &a) == NodeId::ZERO, || "identity".into())?;
        ensure(xor_distance(&a, &b) == xor_distance(&b, &a), || "symmetry".into())?;
        ensure(a == b || xor_distance(&a, &b) != NodeId::ZERO, || {
            "distinct ids at zero".into()
        })?;
        // the only point at distance d(a, b) from a is b
        let d = xor_distance(&a, &b);
        ensure(a.xor(&d) == b, || "unidirectionality".into())?;
    }

    let self_id = NodeId::random(&mut rng);
    let mut table = RoutingTable::new(self_id, TableConfig::default());
    for i in 0..10_000 {
        let id = NodeId::random(&mut rng);
        let entry = PeerEntry {
            id,
            ip: Ipv4Addr::from(rng.gen::<u32>()),
            port: 30303,
            inserted_at_ms: i,
        };
        let ins = table.insert(entry, i).map_err(|e| e.to_string())?;
        ensure(ins.bucket == log_distance(&self_id, &id), || "reported bucket".into())?;
    }
    for (bucket, e) in table.entries() {
        ensure(log_distance(&self_id, &e.id) == bucket, || {
            format!("entry misplaced in bucket {bucket}")
        })?;
        ensure(table.bucket(bucket).len() <= 16, || "bucket over capacity".into())?;
    }

    for bucket in 1..=256u16 {
        let id = craft_node_id(&self_id, bucket, &mut rng).map_err(|e| e.to_string())?;
        ensure(log_distance(&self_id, &id) == bucket, || {
            format!("crafted id misses bucket {bucket}")
        })?;
    }
    Ok("10000 pairs, 10000 inserts, buckets 1..=256 crafted".into())
}

fn countermeasure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let victim = NodeId::random(&mut rng);
    let config = TableConfig {
        ip_limit_enabled: true,
        ..TableConfig::default()
    };
    let capacity = config.bucket_capacity;
    let targeted = 252..=256u16;

    let fill = |rng: &mut ChaCha8Rng| -> Result<RoutingTable, String> {
        let mut table = RoutingTable::new(victim, config);
        let mut t = 0;
        for bucket in targeted.clone() {
            for _ in 0..capacity {
                let id = craft_node_id(&victim, bucket, rng).map_err(|e| e.to_string())?;
                let ip = Ipv4Addr::new(rng.gen_range(17..224), rng.gen(), rng.gen(), rng.gen_range(1..255));
                table
                    .insert(
                        PeerEntry {
                            id,
                            ip,
                            port: 30303,
                            inserted_at_ms: t,
                        },
                        t,
                    )
                    .map_err(|e| e.to_string())?;
                t += 1;
            }
        }
        Ok(table)
    };

    // one attacker address flooding every targeted bucket
    let mut table = fill(&mut rng)?;
    let mut attackers = HashSet::new();
    let ip = Ipv4Addr::new(16, 0, 0, 1);
    for t in 0..2_000i64 {
        let bucket = 252 + (t % 5) as u16;
        let id = craft_node_id(&victim, bucket, &mut rng).map_err(|e| e.to_string())?;
        attackers.insert(id);
        table
            .insert(
                PeerEntry {
                    id,
                    ip,
                    port: 30303,
                    inserted_at_ms: 0,
                },
                10_000 + t,
            )
            .map_err(|e| e.to_string())?;
    }
    let mut worst: f64 = 0.0;
    for bucket in targeted.clone() {
        let owned = table
            .bucket(bucket)
            .iter()
            .filter(|e| attackers.contains(&e.id))
            .count();
        let ratio = owned as f64 / capacity as f64;
        worst = worst.max(ratio).max(table.bucket_occupation(bucket, &attackers));
    }
    ensure(worst <= 1.0 / capacity as f64, || {
        format!("single-IP occupation {worst}")
    })?;

    // sixteen virtual addresses, one per slot of bucket 256
    let mut table = fill(&mut rng)?;
    let mut attackers = HashSet::new();
    for i in 0..16u32 {
        let id = craft_node_id(&victim, 256, &mut rng).map_err(|e| e.to_string())?;
        attackers.insert(id);
        let ip = Ipv4Addr::from(u32::from(Ipv4Addr::new(16, 0, 0, 1)) + i);
        table
            .insert(
                PeerEntry {
                    id,
                    ip,
                    port: 30303,
                    inserted_at_ms: 0,
                },
                10_000 + i64::from(i),
            )
            .map_err(|e| e.to_string())?;
    }
    let full = table.bucket_occupation(256, &attackers);
    ensure(full == 1.0 && table.bucket(256).len() == capacity, || {
        format!("16-IP occupation {full}")
    })?;
    Ok(format!("single IP max {worst:.4} per bucket; 16 IPs fill bucket 256"))
}

fn pipeline_formulas() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..1000 {
        let len = rng.gen_range(0..200);
        let m = rng.gen_range(1..30);
        let s = rng.gen_range(1..10);
        let expected = if len > m { (len - m - 1) / s + 1 } else { 0 };
        let seq: Vec<usize> = (0..len).collect();
        let got = make_windows(&seq, m, s).map_err(|e| e.to_string())?.windows.len();
        ensure(got == expected, || {
            format!("len {len} m {m} s {s}: {got} != {expected}")
        })?;
    }

    let rows: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..13).map(|_| rng.gen_range(-1e3..1e3)).collect())
        .collect();
    let scaler = Scaler::fit(&rows).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for row in &rows {
        let back = scaler
            .inverse(&scaler.transform(row).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        for (a, b) in row.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("scaler round-trip error {worst:e}"))?;

    let mut sim = SimConfig::new(Scenario::EclipseSingleVictim, 12, 10, 1, 40_000);
    sim.warmup_ms = 2_000;
    let traces = traces_to_bytes(&run_simulation(&sim).map_err(|e| e.to_string())?.traces);
    let reparsed = parse_traces(traces.as_slice()).map_err(|e| e.to_string())?;
    ensure(traces_to_bytes(&reparsed) == traces, || "trace CSV bytes differ".into())?;

    let mut disc = SimConfig::new(Scenario::DiscoveryPoisoning, 300, 16, 1, 120_000);
    disc.attack_start_ms = Some(60_000);
    let log = discovery_to_bytes(&run_simulation(&disc).map_err(|e| e.to_string())?.discovery);
    let reparsed = parse_discovery(log.as_slice()).map_err(|e| e.to_string())?;
    ensure(discovery_to_bytes(&reparsed) == log, || {
        "discovery CSV bytes differ".into()
    })?;
    Ok(format!(
        "window counts exact; scaler error {worst:.1e}; CSV bytes identical"
    ))
}

fn tiny_gossip() -> ExperimentConfig {
    let mut c = experiment::experiment_preset("eclipse-single").expect("preset");
    c.seed = 7;
    c.sim.n_honest = 12;
    c.sim.n_attackers = 20;
    c.sim.duration_ms = 60_000;
    c.sim.warmup_ms = 2_000;
    c.sim.attack_start_ms = Some(40_000);
    c.model.hidden_size = 4;
    c.model.epochs = 3;
    c
}

fn tiny_discovery() -> ExperimentConfig {
    let mut c = experiment::experiment_preset("discovery-poisoning").expect("preset");
    c.seed = 7;
    c.sim.n_honest = 400;
    c.sim.duration_ms = 200_000;
    c.sim.attack_start_ms = Some(120_000);
    c.model.hidden_size = 6;
    c.model.embedding_dim = 3;
    c.model.epochs = 3;
    c
}

const STAGES: [&str; 5] = ["simulate", "prepare", "train", "detect", "evaluate"];

// Digest of traces.csv for `tiny_gossip` at seed 7 (x86_64 Linux).
const GOLDEN_TRACES_SHA256: &str = "731368a1883b2f9cdc408189a5cc58a6942efa3e95d1e17f4ba941631db93c41";

fn run_cli(config: &Path, out: &Path) -> Result<(), String> {
    for stage in STAGES {
        let status = Command::new(env!("CARGO_BIN_EXE_gossipwatch"))
            .arg(stage)
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            format!("{stage} failed: {}", String::from_utf8_lossy(&status.stderr))
        })?;
    }
    Ok(())
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let bytes = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
        files.insert(entry.file_name().to_string_lossy().into_owned(), bytes);
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    let mut trace_digest = String::new();
    for (tag, config) in [("gossip", tiny_gossip()), ("discovery", tiny_discovery())] {
        let path = root.path().join(format!("{tag}.json"));
        std::fs::write(&path, config.to_json()).map_err(|e| e.to_string())?;
        let a = root.path().join(format!("{tag}-a"));
        let b = root.path().join(format!("{tag}-b"));
        run_cli(&path, &a)?;
        run_cli(&path, &b)?;
        let (sa, sb) = (snapshot(&a)?, snapshot(&b)?);
        ensure(sa.keys().eq(sb.keys()), || format!("{tag}: artifact sets differ"))?;
        for (name, bytes) in &sa {
            ensure(sb[name] == *bytes, || format!("{tag}: {name} differs between runs"))?;
        }
        checked += sa.len();
        if tag == "gossip" {
            let manifest = experiment::read_manifest(&a).map_err(|e| e.to_string())?;
            trace_digest = manifest.artifacts[experiment::TRACES_FILE].clone();
        }
    }
    ensure(trace_digest == GOLDEN_TRACES_SHA256, || {
        format!("golden digest changed: {trace_digest}")
    })?;
    Ok(format!(
        "{checked} artifacts byte-identical across reruns; golden digest holds"
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient check", gradients),
        ("LSTM cell oracle", cell_oracle),
        ("metric oracle", metric_oracle),
        ("gossip presets", gossip_presets),
        ("discovery preset", discovery_preset),
        ("kademlia properties", kademlia_properties),
        ("IP-limit countermeasure", countermeasure),
        ("pipeline formulas", pipeline_formulas),
        ("determinism", determinism),
    ];
    // comma-separated criterion numbers, e.g. ACCEPTANCE_ONLY=1,2,9
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        match check() {
            Ok(detail) => println!("PASS {n} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
