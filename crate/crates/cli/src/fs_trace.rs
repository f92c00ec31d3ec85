//! `fs-trace`: scripted lock traces, random trace runs and the exhaustive
//! interleaving check.

use std::collections::BTreeMap;

use dockerssd::lambda_fs::check::{enumerate, CheckReport};
use dockerssd::lambda_fs::{parse_trace, run_trace, FsError, LambdaFs, TraceStep};
use dockerssd::nvme::{NamespaceKind, NamespaceSpec, NamespaceTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::scenario::FsTraceParams;
use crate::{module, Artifacts, CliError};

const RANDOM_FILES: [&str; 3] = ["/w/a", "/w/b", "/v/c"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomTraceReport {
    pub traces: usize,
    pub steps: usize,
    pub outcomes: BTreeMap<String, usize>,
    /// Traces whose lock counters disagreed with live handles.
    pub inconsistent: usize,
    /// Traces where a crash left a counter or handle behind.
    pub crash_leaks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FsTraceReport {
    pub seed: u64,
    pub files: Vec<String>,
    pub model_check: CheckReport,
    pub random: RandomTraceReport,
    #[serde(skip)]
    pub steps: Vec<TraceStep>,
}

impl FsTraceReport {
    pub fn artifacts(&self) -> Artifacts {
        let mut a = Artifacts::default();
        a.json("fs_report.json", self);
        if !self.steps.is_empty() {
            let mut csv = String::from("line,op,side,path,outcome,woken\n");
            for s in &self.steps {
                let e = &s.event;
                let word = |v: String| v.trim_matches('"').to_string();
                let woken: Vec<String> = s.woken.iter().map(usize::to_string).collect();
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    e.line,
                    word(serde_json::to_string(&e.op).unwrap_or_default()),
                    e.side
                        .map(|s| word(serde_json::to_string(&s).unwrap_or_default()))
                        .unwrap_or_default(),
                    e.path.as_deref().unwrap_or(""),
                    word(serde_json::to_string(&s.outcome).unwrap_or_default()),
                    woken.join(" ")
                ));
            }
            a.text("trace_steps.csv", csv);
        }
        a
    }
}

pub fn fresh_fs() -> Result<LambdaFs, CliError> {
    let t = NamespaceTable::define(&[
        NamespaceSpec {
            kind: NamespaceKind::Private,
            blocks: 0..256,
        },
        NamespaceSpec {
            kind: NamespaceKind::Sharable,
            blocks: 256..4096,
        },
    ])
    .map_err(module("namespaces"))?;
    LambdaFs::mkfs(t.all()).map_err(module("mkfs"))
}

pub fn run(p: &FsTraceParams, seed: u64) -> Result<FsTraceReport, CliError> {
    let steps = match &p.trace {
        Some(text) => {
            let events = parse_trace(text).map_err(|e| CliError::InvalidScenario(e.to_string()))?;
            let mut fs = fresh_fs()?;
            let steps = run_trace(&mut fs, &events).map_err(module("trace"))?;
            fs.locks.check().map_err(CliError::CheckFailed)?;
            steps
        }
        None => Vec::new(),
    };
    let paths: Vec<&str> = p.files.iter().map(String::as_str).collect();
    let model_check = if paths.is_empty() {
        CheckReport::default()
    } else {
        enumerate(&fresh_fs()?, &paths, p.max_len).map_err(|e| match e {
            FsError::Trace { .. } => CliError::CheckFailed(e.to_string()),
            other => module("model check")(other),
        })?
    };
    let random = random_traces(p, seed)?;
    Ok(FsTraceReport {
        seed,
        files: p.files.clone(),
        model_check,
        random,
        steps,
    })
}

fn random_traces(p: &FsTraceParams, seed: u64) -> Result<RandomTraceReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = RandomTraceReport {
        traces: p.random_traces,
        steps: 0,
        outcomes: BTreeMap::new(),
        inconsistent: 0,
        crash_leaks: 0,
    };
    for _ in 0..p.random_traces {
        let mut text = String::new();
        for _ in 0..p.random_len {
            let side = if rng.gen() { "host" } else { "container" };
            let file = RANDOM_FILES[rng.gen_range(0..RANDOM_FILES.len())];
            match rng.gen_range(0..13) {
                0 => text.push_str("crash\n"),
                1..=6 => text.push_str(&format!("open {side} {file}\n")),
                _ => text.push_str(&format!("close {side} {file}\n")),
            }
        }
        let events = parse_trace(&text).map_err(module("random trace"))?;
        let mut fs = fresh_fs()?;
        for s in run_trace(&mut fs, &events).map_err(module("random trace"))? {
            let name = serde_json::to_string(&s.outcome)
                .unwrap_or_default()
                .trim_matches('"')
                .to_string();
            *r.outcomes.entry(name).or_default() += 1;
            r.steps += 1;
        }
        if fs.locks.check().is_err() {
            r.inconsistent += 1;
        }
        fs.crash_recover();
        if fs.locks.live_handles().next().is_some() || fs.locks.waiting() != 0 {
            r.crash_leaks += 1;
        }
    }
    Ok(r)
}
