//! Batch front-end for the DockerSSD simulator.
//!
//! Each subcommand reads a [`Scenario`], runs one group of module checks or
//! sweeps, and writes CSV and JSON artifacts. Runs are deterministic for a
//! given scenario and seed. On failure the output directory holds only
//! `error.json`.

pub mod docker;
pub mod fs_trace;
pub mod latency;
pub mod llm;
pub mod net;
pub mod scenario;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub use scenario::{Scenario, ScenarioKind};

pub const ERROR_FILE: &str = "error.json";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("{context}: {message}")]
    Module { context: String, message: String },
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("output: {0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::InvalidScenario(_) => 2,
            CliError::Module { .. } => 3,
            CliError::Output(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::InvalidScenario(_) => "InvalidScenario",
            CliError::Module { .. } => "ModuleError",
            CliError::CheckFailed(_) => "CheckFailed",
            CliError::Output(_) => "OutputError",
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            error: self.kind().to_string(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}

/// Wraps a module error with the step that produced it.
pub(crate) fn module<E: Display>(context: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Module {
        context: context.to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorRecord {
    pub error: String,
    pub message: String,
    pub exit_code: i32,
}

/// Named output files, written in name order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Artifacts(BTreeMap<String, Vec<u8>>);

impl Artifacts {
    pub fn text(&mut self, name: &str, body: String) {
        self.0.insert(name.to_string(), body.into_bytes());
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut body = serde_json::to_vec_pretty(value).expect("reports serialize");
        body.push(b'\n');
        self.0.insert(name.to_string(), body);
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    NetTest,
    FsTrace,
    DockerSim,
    Latency,
    LlmSweep,
    ReplayCheck,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Subcommand::NetTest,
        Subcommand::FsTrace,
        Subcommand::DockerSim,
        Subcommand::Latency,
        Subcommand::LlmSweep,
        Subcommand::ReplayCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::NetTest => "net-test",
            Subcommand::FsTrace => "fs-trace",
            Subcommand::DockerSim => "docker-sim",
            Subcommand::Latency => "latency",
            Subcommand::LlmSweep => "llm-sweep",
            Subcommand::ReplayCheck => "replay-check",
        }
    }

    pub fn kind(self) -> ScenarioKind {
        match self {
            Subcommand::NetTest => ScenarioKind::Net,
            Subcommand::FsTrace => ScenarioKind::FsTrace,
            Subcommand::DockerSim => ScenarioKind::Docker,
            Subcommand::Latency | Subcommand::ReplayCheck => ScenarioKind::Latency,
            Subcommand::LlmSweep => ScenarioKind::Llm,
        }
    }

    pub fn default_scenario(self) -> Scenario {
        let mut s = Scenario::default_for(self.kind());
        if self == Subcommand::ReplayCheck {
            if let Some(l) = s.latency.as_mut() {
                l.calibrate = false;
                l.replay = Some(Default::default());
            }
        }
        s
    }
}

/// Runs one subcommand in memory.
pub fn run(cmd: Subcommand, scenario: &Scenario) -> Result<Artifacts, CliError> {
    if scenario.kind != cmd.kind() {
        return Err(CliError::InvalidScenario(format!(
            "{} needs a {} scenario, got {}",
            cmd.name(),
            cmd.kind().name(),
            scenario.kind.name()
        )));
    }
    let seed = scenario.seed;
    Ok(match cmd {
        Subcommand::NetTest => net::run(&scenario.net(), seed)?.artifacts(),
        Subcommand::FsTrace => fs_trace::run(&scenario.fs_trace(), seed)?.artifacts(),
        Subcommand::DockerSim => docker::run(&scenario.docker(), seed)?.artifacts(),
        Subcommand::Latency => latency::run(&scenario.latency())?.artifacts(),
        Subcommand::LlmSweep => llm::run(&scenario.llm())?.artifacts(),
        Subcommand::ReplayCheck => {
            let params = scenario.latency();
            let replay = params.replay.as_ref().ok_or_else(|| {
                CliError::InvalidScenario("replay-check needs a [latency.replay] table".into())
            })?;
            let report = latency::replay_check(&params, replay, seed)?;
            let failures = report.failures();
            if !failures.is_empty() {
                return Err(CliError::CheckFailed(failures.join("; ")));
            }
            report.artifacts()
        }
    })
}

/// Runs a subcommand and writes its artifacts, or only `error.json`, to
/// `out`. Returns the process exit code.
pub fn execute(cmd: Subcommand, scenario: Option<&Path>, out: &Path, seed: Option<u64>) -> i32 {
    if let Err(e) = prepare_out(out) {
        eprintln!(
            "{}",
            serde_json::to_string(&e.record()).expect("record serializes")
        );
        return e.exit_code();
    }
    let result = scenario
        .map(Scenario::load)
        .unwrap_or_else(|| Ok(cmd.default_scenario()))
        .map(|mut s| {
            if let Some(seed) = seed {
                s.seed = seed;
            }
            s
        })
        .and_then(|s| run(cmd, &s))
        .and_then(|a| write_artifacts(out, &a));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let record = serde_json::to_string_pretty(&e.record()).expect("record serializes");
            eprintln!("{record}");
            let _ = std::fs::write(out.join(ERROR_FILE), record + "\n");
            e.exit_code()
        }
    }
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Output(format!("{}: {e}", out.display())))?;
    let mut entries =
        std::fs::read_dir(out).map_err(|e| CliError::Output(format!("{}: {e}", out.display())))?;
    if entries.next().is_some() {
        return Err(CliError::Output(format!("{} is not empty", out.display())));
    }
    Ok(())
}

fn write_artifacts(out: &Path, artifacts: &Artifacts) -> Result<(), CliError> {
    let mut written = Vec::new();
    for (name, body) in &artifacts.0 {
        let path = out.join(name);
        if let Err(e) = std::fs::write(&path, body) {
            for p in written {
                let _ = std::fs::remove_file(p);
            }
            return Err(CliError::Output(format!("{}: {e}", path.display())));
        }
        written.push(path);
    }
    Ok(())
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_mismatch_is_invalid() {
        let s = Scenario::default_for(ScenarioKind::Net);
        assert!(matches!(
            run(Subcommand::LlmSweep, &s),
            Err(CliError::InvalidScenario(_))
        ));
    }

    #[test]
    fn replay_check_needs_replay_table() {
        let mut s = Scenario::default_for(ScenarioKind::Latency);
        s.latency.as_mut().unwrap().calibrate = false;
        assert!(matches!(
            run(Subcommand::ReplayCheck, &s),
            Err(CliError::InvalidScenario(_))
        ));
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes: std::collections::BTreeSet<i32> = [
            CliError::InvalidScenario(String::new()),
            CliError::Module {
                context: String::new(),
                message: String::new(),
            },
            CliError::CheckFailed(String::new()),
            CliError::Output(String::new()),
        ]
        .iter()
        .map(CliError::exit_code)
        .collect();
        assert_eq!(codes.len(), 4);
        assert!(!codes.contains(&0));
    }

    #[test]
    fn slope_of_a_line() {
        assert!((slope(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-12);
    }
}
