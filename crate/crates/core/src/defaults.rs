//! Defaults shipped in `data/defaults.toml`.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::latency::{CalibrationSpec, CostTable};
use crate::llm_pool::{AggregateTarget, PoolParams};

pub const DEFAULTS_TOML: &str = include_str!("../data/defaults.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub latency: LatencyDefaults,
    pub llm: LlmDefaults,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyDefaults {
    pub costs: CostTable,
    pub calibration: CalibrationSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmDefaults {
    pub pool: PoolParams,
    pub anchor: SpeedupAnchor,
    pub report: LlmReport,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedupAnchor {
    pub model: String,
    pub seq: u64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmReport {
    pub plan_seq: u64,
    /// Batch-sweep sequence length per model; other models use their
    /// crossover length.
    pub batch_seq: std::collections::BTreeMap<String, u64>,
    pub aggregates: Vec<AggregateTarget>,
}

pub fn defaults() -> &'static Defaults {
    static CELL: OnceLock<Defaults> = OnceLock::new();
    CELL.get_or_init(|| toml::from_str(DEFAULTS_TOML).expect("shipped defaults parse"))
}
