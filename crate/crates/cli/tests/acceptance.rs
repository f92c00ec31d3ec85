//! Acceptance suite. Prints one line per criterion and fails if any does.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dockerssd::latency::Statistic;
use dockerssd::llm_pool::{architectures, kv_cache_bytes, DeploymentKind, PlanCategory};
use dockerssd_cli::scenario::{
    DockerParams, FsTraceParams, LatencyParams, LlmParams, NetParams, ReplayParams,
};
use dockerssd_cli::{docker, fs_trace, latency, llm, net};
use sha2::{Digest, Sha256};

/// Writes to the process stderr directly so the lines survive test output
/// capture.
macro_rules! report {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

type Outcome = Result<String, String>;
type Criterion = (u32, fn() -> Outcome, Option<Duration>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn rel_within(x: f64, target: f64, tol: f64) -> bool {
    (x / target - 1.0).abs() <= tol
}

/// Delivery rounds for `k` frames into `slots` pre-armed slots: the first
/// round takes what the armed slots hold, each re-arm takes one more batch.
fn burst_oracle(k: usize, slots: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut left = k;
    while left > 0 {
        out.push(left.min(slots));
        left -= left.min(slots);
    }
    out
}

fn criterion_1() -> Outcome {
    let p = NetParams {
        isolation_commands: 0,
        max_burst: 0,
        ..NetParams::default()
    };
    let r = net::run(&p, 11).map_err(|e| e.to_string())?;
    let c = &r.codec;
    ensure(c.frames >= 10_000, || format!("only {} frames", c.frames))?;
    ensure((c.min_len, c.max_len) == (64, 1518), || {
        format!("lengths {}..{}", c.min_len, c.max_len)
    })?;
    ensure(c.codec_mismatches == 0 && c.tunnel_mismatches == 0, || {
        format!(
            "{} codec and {} tunnel mismatches",
            c.codec_mismatches, c.tunnel_mismatches
        )
    })?;
    let extremes_bits = 8 * (64 + 1518) as u64;
    ensure(
        c.bit_flips >= extremes_bits + (c.frames as u64 - 2) * p.random_flips as u64,
        || format!("only {} flips tried", c.bit_flips),
    )?;
    ensure(c.undetected_flips == 0, || {
        format!("{} flips undetected", c.undetected_flips)
    })?;
    Ok(format!(
        "{} frames, {} single-bit flips all detected",
        c.frames, c.bit_flips
    ))
}

fn criterion_2() -> Outcome {
    let p = NetParams {
        frames: 0,
        isolation_commands: 0,
        upcall_slots: 4,
        max_burst: 16,
        ..NetParams::default()
    };
    let r = net::run(&p, 0).map_err(|e| e.to_string())?;
    ensure(r.bursts.len() == 16, || {
        format!("{} bursts", r.bursts.len())
    })?;
    for b in &r.bursts {
        ensure(b.immediate == b.k.min(4), || {
            format!("k={}: {} immediate", b.k, b.immediate)
        })?;
        ensure(b.per_round == burst_oracle(b.k, 4), || {
            format!("k={}: rounds {:?}", b.k, b.per_round)
        })?;
        ensure(b.in_order, || format!("k={}: out of order", b.k))?;
    }
    Ok("k = 1..16 delivered min(k, 4) immediately, rest in order after re-arms".into())
}

fn criterion_3() -> Outcome {
    let p = NetParams {
        frames: 0,
        max_burst: 0,
        isolation_commands: 100_000,
        ..NetParams::default()
    };
    let r = net::run(&p, 12).map_err(|e| e.to_string())?;
    let i = &r.isolation;
    ensure(i.commands >= 100_000, || {
        format!("only {} commands", i.commands)
    })?;
    ensure(i.audited_records > 0 && i.host_private_refused > 0, || {
        "no private-namespace traffic exercised".into()
    })?;
    ensure(i.violations == 0 && i.host_private_accepted == 0, || {
        format!(
            "{} violations, {} host private accepts",
            i.violations, i.host_private_accepted
        )
    })?;
    Ok(format!(
        "{} commands, {} host attempts on private refused, 0 violations",
        i.commands, i.host_private_refused
    ))
}

fn criterion_4() -> Outcome {
    let single = FsTraceParams {
        files: vec!["/shared/f".into()],
        max_len: 8,
        random_traces: 0,
        ..Default::default()
    };
    let r = fs_trace::run(&single, 0).map_err(|e| e.to_string())?;
    let m = &r.model_check;
    let expected_traces = 4u64.pow(8);
    let expected_steps: u64 = (1..=8).map(|n| 4u64.pow(n)).sum();
    ensure(m.traces == expected_traces, || {
        format!("{} traces, want {expected_traces}", m.traces)
    })?;
    ensure(
        m.steps == expected_steps && m.crash_checks == expected_steps,
        || format!("{} steps, {} crash checks", m.steps, m.crash_checks),
    )?;
    ensure(m.grants > 0 && m.blocks > 0 && m.wakeups > 0, || {
        "lock outcomes not all exercised".into()
    })?;
    let pair = FsTraceParams {
        files: vec!["/shared/a".into(), "/shared/b".into()],
        max_len: 5,
        random_traces: 0,
        ..Default::default()
    };
    let r2 = fs_trace::run(&pair, 0).map_err(|e| e.to_string())?;
    ensure(r2.model_check.traces == 8u64.pow(5), || {
        format!("{} two-file traces", r2.model_check.traces)
    })?;
    Ok(format!(
        "{} single-file traces of length 8 plus {} two-file traces clean",
        m.traces, r2.model_check.traces
    ))
}

fn criterion_5() -> Outcome {
    let r = docker::run(
        &DockerParams {
            sequences: 10_000,
            ..DockerParams::default()
        },
        13,
    )
    .map_err(|e| e.to_string())?;
    let want = [
        "create", "kill", "logs", "ps", "pull", "restart", "rm", "rmi", "run", "start", "stop",
    ];
    ensure(r.accepted == want, || format!("accepted {:?}", r.accepted))?;
    ensure(
        r.surface
            .iter()
            .filter(|s| !s.accepted)
            .all(|s| s.status != 200),
        || "rejected command returned 200".into(),
    )?;
    let s = &r.sequences;
    ensure(s.sequences >= 10_000, || {
        format!("only {} sequences", s.sequences)
    })?;
    ensure(s.transitions > 0, || "no transitions observed".into())?;
    ensure(
        s.illegal_transitions == 0 && s.verdict_mismatches == 0,
        || {
            format!(
                "{} illegal transitions, {} verdict mismatches",
                s.illegal_transitions, s.verdict_mismatches
            )
        },
    )?;
    ensure(
        s.layer_digests_checked > 0 && s.layer_digests_changed == 0,
        || {
            format!(
                "{} of {} layer digests changed",
                s.layer_digests_changed, s.layer_digests_checked
            )
        },
    )?;
    let e = &r.end_to_end;
    ensure(
        e.log_path == format!("/containers/{}/rootfs/log", e.id),
        || format!("log at {}", e.log_path),
    )?;
    ensure(
        e.log_file == "up\nchanged" && e.logs_response == e.log_file,
        || {
            format!(
                "log file {:?}, logs response {:?}",
                e.log_file, e.logs_response
            )
        },
    )?;
    Ok(format!(
        "11 commands, {} sequences, {} transitions legal, log bytes match",
        s.sequences, s.transitions
    ))
}

fn criterion_6() -> Outcome {
    let r = latency::run(&LatencyParams {
        calibrate: true,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let targets = [
        (Statistic::HostStorageFraction, 0.38, 0.10),
        (Statistic::IspStorageRatio, 0.50, 0.10),
        (Statistic::IspCommunicateFraction, 0.43, 0.10),
        (Statistic::IspOverHost, 1.4, 0.10),
        (Statistic::VOverR, 1.0 - 0.137, 0.10),
        (Statistic::FullOsOverV, 1.093, 0.10),
        (Statistic::NaiveOverFullOs, 1.128, 0.10),
        (Statistic::VirtAdvantageIsp, 1.6, 0.15),
        (Statistic::VirtAdvantageNaive, 1.8, 0.15),
        (Statistic::VirtAdvantageFullOs, 1.6, 0.15),
    ];
    let mut worst = 0.0f64;
    for (stat, target, tol) in targets {
        let got = *r
            .statistics
            .get(&stat)
            .ok_or_else(|| format!("{} missing", stat.label()))?;
        ensure(rel_within(got, target, tol), || {
            format!(
                "{} = {got:.4}, want {target} ±{}%",
                stat.label(),
                tol * 100.0
            )
        })?;
        worst = worst.max((got / target - 1.0).abs());
    }
    ensure(r.virtfw_structural_max == 0.0, || {
        format!(
            "D-VirtFW LBA-set/Kernel-ctx up to {}",
            r.virtfw_structural_max
        )
    })?;
    Ok(format!(
        "10 statistics within tolerance (worst {:.2}%), VirtFW LBA-set = Kernel-ctx = 0",
        worst * 100.0
    ))
}

fn criterion_7() -> Outcome {
    let rp = ReplayParams {
        workloads: 8,
        max_events: 1000,
        tolerance: 0.10,
        ..Default::default()
    };
    let r = latency::replay_check(
        &LatencyParams {
            calibrate: false,
            ..Default::default()
        },
        &rp,
        14,
    )
    .map_err(|e| e.to_string())?;
    ensure(!r.reports.is_empty(), || "no replays".into())?;
    ensure(r.reports.iter().all(|x| x.events <= 1000), || {
        "workload above 1000 events".into()
    })?;
    let mut worst = 0.0f64;
    for x in &r.reports {
        for d in &x.deltas {
            let scale = d.analytical.abs().max(d.replayed.abs());
            let rel = if scale == 0.0 {
                0.0
            } else {
                (d.analytical - d.replayed).abs() / scale
            };
            worst = worst.max(rel);
        }
    }
    let failures = r.failures();
    ensure(failures.is_empty() && worst <= 0.10, || {
        format!("worst {:.1}%: {failures:?}", worst * 100.0)
    })?;
    Ok(format!(
        "{} replays, worst component deviation {:.3}%",
        r.reports.len(),
        worst * 100.0
    ))
}

fn log_slope(xs: &[u64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| (*x as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

fn criterion_8() -> Outcome {
    let p = LlmParams {
        seq_exponents: [4, 5],
        batch_exponents: [0, 0],
        ..Default::default()
    };
    let r = llm::run(&p).map_err(|e| e.to_string())?;
    let seqs: Vec<u64> = (6..=14).map(|e| 1u64 << e).collect();
    for a in architectures() {
        let rep = r
            .flop_slopes
            .iter()
            .find(|f| f.model == a.name)
            .ok_or("model missing")?;
        // Per-token attention work: every query row touches `seq` keys in
        // every head and layer, and uncached decoding recomputes all rows.
        let per_pair = 4.0 * (a.heads * a.head_dim * a.layers) as f64;
        let cached: Vec<f64> = seqs.iter().map(|&s| per_pair * s as f64).collect();
        let uncached: Vec<f64> = seqs.iter().map(|&s| per_pair * (s * s) as f64).collect();
        let (oc, ou) = (log_slope(&seqs, &cached), log_slope(&seqs, &uncached));
        ensure(
            within(rep.uncached, 2.0, 0.1) && within(ou, 2.0, 0.1),
            || format!("{}: uncached slope {}", a.name, rep.uncached),
        )?;
        ensure(within(rep.cached, 1.0, 0.1) && within(oc, 1.0, 0.1), || {
            format!("{}: cached slope {}", a.name, rep.cached)
        })?;
        let unit = 2 * a.layers * a.kv_heads * a.head_dim * a.bytes_per_value;
        for s in [1u64, 7, 64, 1000, 16384] {
            for b in [1u64, 3, 32, 512] {
                let kv = kv_cache_bytes(&a, s, b).map_err(|e| e.to_string())?;
                ensure(kv == unit * s * b, || {
                    format!("{}: kv({s},{b}) = {kv}", a.name)
                })?;
                let k2 = kv_cache_bytes(&a, 2 * s, b).map_err(|e| e.to_string())?;
                let b2 = kv_cache_bytes(&a, s, 2 * b).map_err(|e| e.to_string())?;
                ensure(k2 == 2 * kv && b2 == 2 * kv, || {
                    format!("{}: kv not linear at ({s},{b})", a.name)
                })?;
            }
        }
    }
    Ok(format!(
        "{} models: slopes 2.0 uncached and 1.0 cached, KV exactly linear",
        r.flop_slopes.len()
    ))
}

fn criterion_9() -> Outcome {
    let r = llm::run(&LlmParams::default()).map_err(|e| e.to_string())?;
    ensure(within(r.nocache_slowdown_geomean, 1.7, 0.2), || {
        format!("D-NoCache/H-NoCache {:.3}", r.nocache_slowdown_geomean)
    })?;
    let buckets = [("lamda", 256u64), ("megatron", 1024)];
    for (model, crossover) in buckets {
        let t = r.trend(model).ok_or_else(|| format!("{model} missing"))?;
        let short = t
            .short_seq_speed
            .ok_or_else(|| format!("{model}: no short-sequence point"))?;
        ensure(within(short, 0.60, 0.05), || {
            format!(
                "{model}: short-sequence D-Cache at {:.1}% of host",
                short * 100.0
            )
        })?;
        let c = t
            .crossover
            .ok_or_else(|| format!("{model}: no crossover"))?;
        ensure(
            [crossover / 2, crossover, crossover * 2].contains(&c),
            || format!("{model}: crossover {c}"),
        )?;
        let bmax = t
            .batch_max_speedup
            .ok_or_else(|| format!("{model}: no batch sweep"))?;
        ensure(within(bmax, 1.3, 0.2), || {
            format!("{model}: batch max speedup {bmax:.3}")
        })?;
    }
    let lamda = r.trend("lamda").ok_or("lamda missing")?;
    let sat = lamda.saturation.ok_or("no saturation value")?;
    ensure(within(sat, 9.5, 0.5), || format!("saturation {sat:.3}"))?;
    for row in &r.plans {
        let ok = match row.deployment {
            DeploymentKind::HNoCache | DeploymentKind::DNoCache if row.max_pipeline > 1 => {
                row.category == PlanCategory::Pipeline
            }
            DeploymentKind::HNoCache | DeploymentKind::DNoCache => {
                row.plan.pipeline == row.max_pipeline
            }
            DeploymentKind::HCache | DeploymentKind::DCache => row.category == PlanCategory::Tensor,
        };
        ensure(ok, || {
            format!(
                "{} {}: plan {:?} is {:?}",
                row.model, row.deployment, row.plan, row.category
            )
        })?;
    }
    let residuals: Vec<String> = r
        .aggregates
        .iter()
        .map(|a| format!("{} {:.3}x vs {}x", a.label, a.achieved, a.target))
        .collect();
    report!(
        "  aggregate residuals (informational): {}",
        residuals.join("; ")
    );
    Ok(format!(
        "slowdown {:.2}, crossovers {:?}/{:?}, saturation {:.2}, {} plans categorized",
        r.nocache_slowdown_geomean,
        lamda.crossover,
        r.trend("megatron").and_then(|t| t.crossover),
        sat,
        r.plans.len()
    ))
}

const SUITE: [(&str, &str); 6] = [
    ("net-test", "net.toml"),
    ("fs-trace", "fs-trace.toml"),
    ("docker-sim", "docker.toml"),
    ("latency", "latency.toml"),
    ("llm-sweep", "llm.toml"),
    ("replay-check", "replay.toml"),
];

fn suite_digests(root: &Path) -> Result<BTreeMap<String, String>, String> {
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut out = BTreeMap::new();
    for (cmd, file) in SUITE {
        let dir = root.join(cmd);
        let status = Command::new(env!("CARGO_BIN_EXE_dockerssd"))
            .arg(cmd)
            .arg("--scenario")
            .arg(scenarios.join(file))
            .arg("--out")
            .arg(&dir)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("{cmd} exited with {status}"))?;
        let mut names: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| e.to_string())?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        names.sort();
        for path in names {
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            let name = format!(
                "{cmd}/{}",
                path.file_name().unwrap_or_default().to_string_lossy()
            );
            out.insert(name, hex::encode(Sha256::digest(&bytes)));
        }
    }
    Ok(out)
}

fn criterion_10() -> Outcome {
    let runs: Vec<BTreeMap<String, String>> = (0..3)
        .map(|_| {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            suite_digests(dir.path())
        })
        .collect::<Result<_, _>>()?;
    ensure(!runs[0].is_empty(), || "no artifacts".into())?;
    for (i, run) in runs.iter().enumerate().skip(1) {
        let differing: Vec<&String> = runs[0]
            .iter()
            .filter(|(k, v)| run.get(*k) != Some(*v))
            .map(|(k, _)| k)
            .collect();
        ensure(differing.is_empty() && run.len() == runs[0].len(), || {
            format!("run {i} differs in {differing:?}")
        })?;
    }
    Ok(format!(
        "{} artifacts byte-identical across 3 runs",
        runs[0].len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        (1, criterion_1, Some(Duration::from_secs(5))),
        (2, criterion_2, Some(Duration::from_secs(1))),
        (3, criterion_3, Some(Duration::from_secs(10))),
        (4, criterion_4, Some(Duration::from_secs(60))),
        (5, criterion_5, Some(Duration::from_secs(30))),
        (6, criterion_6, Some(Duration::from_secs(10))),
        (7, criterion_7, Some(Duration::from_secs(60))),
        (8, criterion_8, Some(Duration::from_secs(5))),
        (9, criterion_9, Some(Duration::from_secs(60))),
        (10, criterion_10, None),
    ];
    let mut failed = Vec::new();
    for (n, check, budget) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!(
                "took {:.2} s, budget {} s",
                elapsed.as_secs_f64(),
                b.as_secs()
            )),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => report!(
                "criterion {n}: PASS ({detail}; {:.2} s)",
                elapsed.as_secs_f64()
            ),
            Err(why) => {
                report!(
                    "criterion {n}: FAIL ({why}; {:.2} s)",
                    elapsed.as_secs_f64()
                );
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
