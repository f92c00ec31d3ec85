//! Analytical model of distributed LLM inference over a pool of hosts or
//! computing-enabled SSDs.
//!
//! One call to [`inference_time`] prices one generation step of a plan:
//!
//! - compute: `Ls * (2 * rows * P_layer + attention) / t / R`, scaled by the
//!   batch-efficiency factor `(1 + b0/b) / (1 + b0)`, where
//!   `R = clock * cores * flops_per_cycle`;
//! - memory: weights `Ls * P_layer * beta / t` at the memory cost, plus the
//!   KV cache at the KV cost (cached) or activations (uncached);
//! - tensor all-reduce: `Ls * 2 * (2(t-1)/t * rows * h * beta / bw + 2(t-1) * alpha)`;
//! - pipeline: `m + p - 1` stage times, with `m = s` uncached and `m = 1`
//!   cached, and a point-to-point hop of `alpha + b * h * beta / bw`.
//!
//! `Ls = L / p` and `rows = b` (cached) or `b * s` (uncached). Link time is
//! counted as memory time.

mod sweep;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sweep::{
    aggregate_residuals, batch_sweep, cached_slope, calibrate_swap_surcharge, crossover,
    max_pipeline_degree, plan_category, saturation_limit, seq_sweep, AggregateResidual,
    AggregateTarget, BatchPoint, PlanCategory, SeqPoint, SweepReport,
};

pub const ARCHS_TOML: &str = include_str!("../../data/llm_archs.toml");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("KV cache needs {need} bytes per node, capacity is {capacity}")]
    CacheOverflow { need: u64, capacity: u64 },
    #[error("plan does not divide the model: {0}")]
    IndivisiblePlan(String),
    #[error("no feasible plan for {model} at seq {seq}, batch {batch}")]
    NoFeasiblePlan { model: String, seq: u64, batch: u64 },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmArchitecture {
    pub name: String,
    pub parameter_count: u64,
    pub layers: u64,
    pub hidden_dim: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub kv_heads: u64,
    pub ffn_dim: u64,
    pub ffn_matrices: u64,
    pub bytes_per_value: u64,
}

impl LlmArchitecture {
    pub fn per_layer_params(&self) -> u64 {
        let (h, d) = (self.hidden_dim, self.head_dim);
        2 * h * self.heads * d + 2 * h * self.kv_heads * d + self.ffn_matrices * h * self.ffn_dim
    }

    pub fn derived_params(&self) -> u64 {
        self.layers * self.per_layer_params()
    }

    /// Shapes must be positive and the derived size within 10% of the
    /// published count.
    pub fn check(&self) -> Result<(), LlmError> {
        let dims = [
            self.layers,
            self.hidden_dim,
            self.heads,
            self.head_dim,
            self.kv_heads,
            self.ffn_dim,
            self.ffn_matrices,
        ];
        if dims.contains(&0) || self.bytes_per_value == 0 {
            return Err(LlmError::InvalidArchitecture(format!(
                "{}: zero dimension",
                self.name
            )));
        }
        if self.kv_heads > self.heads || !self.heads.is_multiple_of(self.kv_heads) {
            return Err(LlmError::InvalidArchitecture(format!(
                "{}: kv_heads must divide heads",
                self.name
            )));
        }
        let rel = (self.derived_params() as f64 / self.parameter_count as f64 - 1.0).abs();
        if rel > 0.10 {
            return Err(LlmError::InvalidArchitecture(format!(
                "{}: layers give {} parameters, published {}",
                self.name,
                self.derived_params(),
                self.parameter_count
            )));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    model: Vec<LlmArchitecture>,
}

pub fn parse_architectures(text: &str) -> Result<Vec<LlmArchitecture>, LlmError> {
    let f: ArchFile =
        toml::from_str(text).map_err(|e| LlmError::InvalidArchitecture(e.to_string()))?;
    for a in &f.model {
        a.check()?;
    }
    Ok(f.model)
}

/// The eight shipped architectures, smallest first.
pub fn architectures() -> Vec<LlmArchitecture> {
    parse_architectures(ARCHS_TOML).expect("shipped architectures parse")
}

pub fn architecture(name: &str) -> Result<LlmArchitecture, LlmError> {
    architectures()
        .into_iter()
        .find(|a| a.name == name)
        .ok_or_else(|| LlmError::UnknownModel(name.to_string()))
}

/// Bytes of K and V across all layers:
/// `2 * layers * kv_heads * head_dim * seq * batch * bytes_per_value`.
pub fn kv_cache_bytes(arch: &LlmArchitecture, seq: u64, batch: u64) -> Result<u64, LlmError> {
    if seq == 0 || batch == 0 {
        return Err(LlmError::InvalidInput(
            "seq and batch must be at least 1".into(),
        ));
    }
    Ok(2 * arch.layers * arch.kv_heads * arch.head_dim * seq * batch * arch.bytes_per_value)
}

/// Work to produce the token at position `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopCount {
    /// Score and value products. Cached: the new query against `seq` keys.
    /// Uncached: every prefix query recomputed, `seq * seq` pairs.
    pub attention: u64,
    /// Projection and feed-forward work for the new token.
    pub dense: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.attention + self.dense
    }
}

pub fn flops_per_token(
    arch: &LlmArchitecture,
    seq: u64,
    cached: bool,
) -> Result<FlopCount, LlmError> {
    if seq == 0 {
        return Err(LlmError::InvalidInput("seq must be at least 1".into()));
    }
    let per_pair = 4 * arch.heads * arch.head_dim * arch.layers;
    let pairs = if cached { seq } else { seq * seq };
    Ok(FlopCount {
        attention: per_pair * pairs,
        dense: 2 * arch.per_layer_params() * arch.layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DeploymentKind {
    #[serde(rename = "H-NoCache")]
    HNoCache,
    #[serde(rename = "H-Cache")]
    HCache,
    #[serde(rename = "D-NoCache")]
    DNoCache,
    #[serde(rename = "D-Cache")]
    DCache,
}

impl DeploymentKind {
    pub const ALL: [DeploymentKind; 4] = [
        DeploymentKind::HNoCache,
        DeploymentKind::HCache,
        DeploymentKind::DNoCache,
        DeploymentKind::DCache,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeploymentKind::HNoCache => "H-NoCache",
            DeploymentKind::HCache => "H-Cache",
            DeploymentKind::DNoCache => "D-NoCache",
            DeploymentKind::DCache => "D-Cache",
        }
    }

    pub fn on_host(self) -> bool {
        matches!(self, DeploymentKind::HNoCache | DeploymentKind::HCache)
    }

    pub fn cached(self) -> bool {
        matches!(self, DeploymentKind::HCache | DeploymentKind::DCache)
    }
}

impl fmt::Display for DeploymentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DeploymentKind {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeploymentKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LlmError::InvalidInput(format!("unknown deployment {s:?}")))
    }
}

/// Pool-wide constants from which the four deployments are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub node_count: u64,
    pub host_clock_ghz: f64,
    pub device_clock_ghz: f64,
    pub cores: u64,
    pub flops_per_cycle: f64,
    pub host_dram_bytes: u64,
    pub storage_bytes: u64,
    pub host_mem_ns_per_byte: f64,
    pub device_mem_ns_per_byte: f64,
    /// Flash read cost for KV entries.
    pub flash_ns_per_byte: f64,
    /// Multiplier on the KV cost when the host reaches flash through swap.
    pub swap_surcharge: f64,
    pub link_bytes_per_ns: f64,
    pub link_latency_ns: f64,
    /// Activation bytes moved per hidden value when recomputing.
    pub activation_passes: f64,
    /// Per-batch fixed overhead `b0` in the batch-efficiency factor.
    pub batch_overhead: f64,
}

impl Default for PoolParams {
    fn default() -> Self {
        crate::defaults::defaults().llm.pool.clone()
    }
}

impl PoolParams {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(16..=128).contains(&self.node_count) {
            return Err(LlmError::InvalidInput(format!(
                "node_count {} outside 16..=128",
                self.node_count
            )));
        }
        let positive = [
            self.host_clock_ghz,
            self.device_clock_ghz,
            self.flops_per_cycle,
            self.link_bytes_per_ns,
            self.swap_surcharge,
        ];
        let non_negative = [
            self.host_mem_ns_per_byte,
            self.device_mem_ns_per_byte,
            self.flash_ns_per_byte,
            self.link_latency_ns,
            self.activation_passes,
            self.batch_overhead,
        ];
        if self.cores == 0
            || positive.iter().any(|v| !v.is_finite() || *v <= 0.0)
            || non_negative.iter().any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(LlmError::InvalidInput(
                "pool constants must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn config(&self, kind: DeploymentKind) -> DeploymentConfig {
        let host = kind.on_host();
        let kv_capacity_bytes = match kind {
            DeploymentKind::HNoCache | DeploymentKind::DNoCache => 0,
            DeploymentKind::HCache => self.host_dram_bytes + self.storage_bytes,
            DeploymentKind::DCache => self.storage_bytes,
        };
        DeploymentConfig {
            kind,
            node_count: self.node_count,
            clock_ghz: if host {
                self.host_clock_ghz
            } else {
                self.device_clock_ghz
            },
            cores: self.cores,
            flops_per_cycle: self.flops_per_cycle,
            mem_ns_per_byte: if host {
                self.host_mem_ns_per_byte
            } else {
                self.device_mem_ns_per_byte
            },
            kv_ns_per_byte: self.flash_ns_per_byte * if host { self.swap_surcharge } else { 1.0 },
            kv_capacity_bytes,
            link_bytes_per_ns: self.link_bytes_per_ns,
            link_latency_ns: self.link_latency_ns,
            activation_passes: self.activation_passes,
            batch_overhead: self.batch_overhead,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeploymentConfig {
    pub kind: DeploymentKind,
    pub node_count: u64,
    pub clock_ghz: f64,
    pub cores: u64,
    pub flops_per_cycle: f64,
    pub mem_ns_per_byte: f64,
    pub kv_ns_per_byte: f64,
    /// Per-node room for KV entries; 0 without a cache.
    pub kv_capacity_bytes: u64,
    pub link_bytes_per_ns: f64,
    pub link_latency_ns: f64,
    pub activation_passes: f64,
    pub batch_overhead: f64,
}

impl DeploymentConfig {
    /// FLOPs per nanosecond.
    pub fn throughput(&self) -> f64 {
        self.clock_ghz * self.cores as f64 * self.flops_per_cycle
    }
}

/// Degrees multiply to the node count; `batch` is per data-parallel
/// replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelismPlan {
    pub data: u64,
    pub tensor: u64,
    pub pipeline: u64,
    pub batch: u64,
    pub seq: u64,
}

impl ParallelismPlan {
    pub fn nodes(&self) -> u64 {
        self.data * self.tensor * self.pipeline
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InferenceTime {
    pub compute_time: f64,
    pub memory_time: f64,
}

impl InferenceTime {
    pub fn total(&self) -> f64 {
        self.compute_time + self.memory_time
    }
}

/// KV bytes one node holds under `plan`.
pub fn kv_bytes_per_node(arch: &LlmArchitecture, plan: &ParallelismPlan) -> Result<u64, LlmError> {
    let all = kv_cache_bytes(arch, plan.seq, plan.batch)?;
    Ok(all / plan.pipeline / plan.tensor.min(arch.kv_heads))
}

pub fn inference_time(
    arch: &LlmArchitecture,
    config: &DeploymentConfig,
    plan: &ParallelismPlan,
) -> Result<InferenceTime, LlmError> {
    let (t, p, b, s) = (plan.tensor, plan.pipeline, plan.batch, plan.seq);
    if plan.data == 0 || t == 0 || p == 0 || plan.nodes() != config.node_count {
        return Err(LlmError::IndivisiblePlan(format!(
            "{}x{}x{} != {} nodes",
            plan.data, t, p, config.node_count
        )));
    }
    if !arch.heads.is_multiple_of(t) {
        return Err(LlmError::IndivisiblePlan(format!(
            "tensor degree {t} does not divide {} heads",
            arch.heads
        )));
    }
    if !arch.layers.is_multiple_of(p) {
        return Err(LlmError::IndivisiblePlan(format!(
            "pipeline degree {p} does not divide {} layers",
            arch.layers
        )));
    }
    if b == 0 || s == 0 {
        return Err(LlmError::InvalidInput(
            "seq and batch must be at least 1".into(),
        ));
    }
    let cached = config.kind.cached();
    if cached {
        let need = kv_bytes_per_node(arch, plan)?;
        if need > config.kv_capacity_bytes {
            return Err(LlmError::CacheOverflow {
                need,
                capacity: config.kv_capacity_bytes,
            });
        }
    }
    let (tf, bf, sf) = (t as f64, b as f64, s as f64);
    let beta = arch.bytes_per_value as f64;
    let h = arch.hidden_dim as f64;
    let layers = (arch.layers / p) as f64;
    let p_layer = arch.per_layer_params() as f64;
    let rows = if cached { bf } else { bf * sf };

    let attention =
        bf * 4.0 * sf * (arch.heads * arch.head_dim) as f64 * if cached { 1.0 } else { sf };
    let efficiency = (1.0 + config.batch_overhead / bf) / (1.0 + config.batch_overhead);
    let compute =
        layers * (rows * 2.0 * p_layer + attention) / tf / config.throughput() * efficiency;

    let mut memory = layers * p_layer * beta / tf * config.mem_ns_per_byte;
    if cached {
        let kv_per_token =
            2.0 * (arch.kv_heads * arch.head_dim) as f64 * beta / t.min(arch.kv_heads) as f64;
        memory += layers * bf * sf * kv_per_token * config.kv_ns_per_byte;
    } else {
        memory += layers * rows * h * beta * config.activation_passes * config.mem_ns_per_byte;
    }
    let link = if t > 1 {
        layers
            * 2.0
            * (2.0 * (tf - 1.0) / tf * rows * h * beta / config.link_bytes_per_ns
                + 2.0 * (tf - 1.0) * config.link_latency_ns)
    } else {
        0.0
    };
    let m = if cached { 1.0 } else { sf };
    let hop = if p > 1 {
        config.link_latency_ns + bf * h * beta / config.link_bytes_per_ns
    } else {
        0.0
    };
    let stages = m + p as f64 - 1.0;
    Ok(InferenceTime {
        compute_time: stages * compute / m,
        memory_time: stages * ((memory + link) / m + hop),
    })
}

/// Every data x tensor x pipeline factorization of `nodes`, by ascending
/// pipeline then tensor degree.
pub fn factorizations(nodes: u64) -> Vec<(u64, u64, u64)> {
    let mut out = Vec::new();
    for p in (1..=nodes).filter(|p| nodes.is_multiple_of(*p)) {
        for t in (1..=nodes / p).filter(|t| (nodes / p).is_multiple_of(*t)) {
            out.push((nodes / p / t, t, p));
        }
    }
    out
}

/// Exhaustive search; ties go to the lower pipeline degree, then the lower
/// tensor degree.
pub fn search_plan(
    arch: &LlmArchitecture,
    config: &DeploymentConfig,
    seq: u64,
    batch: u64,
) -> Result<(ParallelismPlan, InferenceTime), LlmError> {
    let mut best: Option<(ParallelismPlan, InferenceTime)> = None;
    for (data, tensor, pipeline) in factorizations(config.node_count) {
        let plan = ParallelismPlan {
            data,
            tensor,
            pipeline,
            batch,
            seq,
        };
        match inference_time(arch, config, &plan) {
            Ok(time) => {
                if best.as_ref().is_none_or(|(_, b)| time.total() < b.total()) {
                    best = Some((plan, time));
                }
            }
            Err(LlmError::IndivisiblePlan(_) | LlmError::CacheOverflow { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| LlmError::NoFeasiblePlan {
        model: arch.name.clone(),
        seq,
        batch,
    })
}
