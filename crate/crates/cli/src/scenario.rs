//! Scenario files.
//!
//! A scenario names its kind, a seed, and one parameter table for that
//! kind. Unknown keys anywhere are rejected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Net,
    FsTrace,
    Docker,
    Latency,
    Llm,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Net => "net",
            ScenarioKind::FsTrace => "fs-trace",
            ScenarioKind::Docker => "docker",
            ScenarioKind::Latency => "latency",
            ScenarioKind::Llm => "llm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    pub net: Option<NetParams>,
    pub fs_trace: Option<FsTraceParams>,
    pub docker: Option<DockerParams>,
    pub latency: Option<LatencyParams>,
    pub llm: Option<LlmParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetParams {
    pub frames: usize,
    /// Every n-th frame, and both size extremes, have each bit flipped in turn.
    pub exhaustive_flip_every: usize,
    /// Random single-bit flips tried on every frame.
    pub random_flips: usize,
    pub upcall_slots: usize,
    pub max_burst: usize,
    pub isolation_commands: usize,
}

impl Default for NetParams {
    fn default() -> Self {
        Self {
            frames: 10_000,
            exhaustive_flip_every: 50,
            random_flips: 4,
            upcall_slots: 4,
            max_burst: 16,
            isolation_commands: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsTraceParams {
    /// Trace script run against a fresh filesystem.
    pub trace: Option<String>,
    /// Files for the exhaustive interleaving check.
    pub files: Vec<String>,
    pub max_len: usize,
    pub random_traces: usize,
    pub random_len: usize,
}

impl Default for FsTraceParams {
    fn default() -> Self {
        Self {
            trace: None,
            files: vec!["/shared/f".into()],
            max_len: 8,
            random_traces: 200,
            random_len: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DockerParams {
    pub sequences: usize,
    pub max_len: usize,
    /// Sequences run on one engine before it is rebuilt.
    pub sequences_per_engine: usize,
}

impl Default for DockerParams {
    fn default() -> Self {
        Self {
            sequences: 10_000,
            max_len: 12,
            sequences_per_engine: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyParams {
    /// Workload CSV; the shipped table when absent.
    pub workloads_csv: Option<String>,
    /// Refit the free cost parameters before reporting.
    pub calibrate: bool,
    /// Cost overrides applied on top of the shipped table.
    pub costs: toml::Table,
    pub replay: Option<ReplayParams>,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            workloads_csv: None,
            calibrate: true,
            costs: toml::Table::new(),
            replay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayParams {
    pub workloads: usize,
    pub max_events: u64,
    pub tolerance: f64,
    /// Overrides for the costs the simulator charges, leaving the
    /// analytical side untouched.
    pub simulated_costs: toml::Table,
}

impl Default for ReplayParams {
    fn default() -> Self {
        Self {
            workloads: 8,
            max_events: 1000,
            tolerance: 0.10,
            simulated_costs: toml::Table::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmParams {
    /// Models for the sequence and batch sweeps.
    pub models: Vec<String>,
    pub seq_exponents: [u32; 2],
    pub batch_exponents: [u32; 2],
    /// Batch-sweep sequence length per model, over the shipped lengths.
    pub batch_seq: BTreeMap<String, u64>,
    /// Overrides on the shipped pool constants.
    pub pool: toml::Table,
    /// Refit the swap surcharge to the shipped anchor.
    pub calibrate_surcharge: bool,
}

impl Default for LlmParams {
    fn default() -> Self {
        Self {
            models: vec!["lamda".into(), "megatron".into()],
            seq_exponents: [4, 16],
            batch_exponents: [0, 9],
            batch_seq: BTreeMap::new(),
            pool: toml::Table::new(),
            calibrate_surcharge: false,
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let s: Scenario =
            toml::from_str(text).map_err(|e| CliError::InvalidScenario(e.message().to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::InvalidScenario(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// The scenario a subcommand runs when none is given.
    pub fn default_for(kind: ScenarioKind) -> Self {
        let mut s = Scenario {
            kind,
            seed: 0,
            net: None,
            fs_trace: None,
            docker: None,
            latency: None,
            llm: None,
        };
        match kind {
            ScenarioKind::Net => s.net = Some(NetParams::default()),
            ScenarioKind::FsTrace => s.fs_trace = Some(FsTraceParams::default()),
            ScenarioKind::Docker => s.docker = Some(DockerParams::default()),
            ScenarioKind::Latency => s.latency = Some(LatencyParams::default()),
            ScenarioKind::Llm => s.llm = Some(LlmParams::default()),
        }
        s
    }

    fn validate(&self) -> Result<(), CliError> {
        let present = [
            (ScenarioKind::Net, self.net.is_some()),
            (ScenarioKind::FsTrace, self.fs_trace.is_some()),
            (ScenarioKind::Docker, self.docker.is_some()),
            (ScenarioKind::Latency, self.latency.is_some()),
            (ScenarioKind::Llm, self.llm.is_some()),
        ];
        for (kind, set) in present {
            if set && kind != self.kind {
                return Err(CliError::InvalidScenario(format!(
                    "table for {} in a {} scenario",
                    kind.name(),
                    self.kind.name()
                )));
            }
        }
        Ok(())
    }

    pub fn net(&self) -> NetParams {
        self.net.clone().unwrap_or_default()
    }

    pub fn fs_trace(&self) -> FsTraceParams {
        self.fs_trace.clone().unwrap_or_default()
    }

    pub fn docker(&self) -> DockerParams {
        self.docker.clone().unwrap_or_default()
    }

    pub fn latency(&self) -> LatencyParams {
        self.latency.clone().unwrap_or_default()
    }

    pub fn llm(&self) -> LlmParams {
        self.llm.clone().unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_uses_defaults() {
        let s = Scenario::parse("kind = \"net\"\n").unwrap();
        assert_eq!(s.seed, 0);
        assert_eq!(s.net(), NetParams::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Scenario::parse("kind = \"net\"\ncolour = 1\n").is_err());
        assert!(Scenario::parse("kind = \"net\"\n[net]\nframez = 1\n").is_err());
        assert!(Scenario::parse("kind = \"teleport\"\n").is_err());
    }

    #[test]
    fn foreign_table_rejected() {
        let e = Scenario::parse("kind = \"net\"\n[llm]\n").unwrap_err();
        assert!(matches!(e, CliError::InvalidScenario(_)));
    }

    #[test]
    fn negative_counts_rejected() {
        assert!(Scenario::parse("kind = \"docker\"\n[docker]\nsequences = -3\n").is_err());
    }
}
