//! Six-component latency breakdown across the six processing models.
//!
//! Every component is a count from the workload descriptor times a unit
//! cost from a [`CostTable`]. Which components a model pays, and at which
//! unit cost, is fixed by [`ModelKind`]:
//!
//! | component  | Host            | P.ISP-R / P.ISP-V          | D-Naive / D-FullOS            | D-VirtFW          |
//! |------------|-----------------|----------------------------|-------------------------------|-------------------|
//! | Network    | K·net           | K·net (+ S·rpc for R)      | K·net                         | K·net             |
//! | Kernel-ctx | 0               | S·ctx                      | 0                             | 0                 |
//! | LBA-set    | 0               | F·handshake                | 0                             | 0                 |
//! | Storage    | N·io + B·(flash+pcie) | N·io + B·flash       | N·io + B·flash (+ B·copy Naive) | N·io + B·flash  |
//! | System     | S·host + P·walk | S·bare + P·walk            | S·host·surcharge + P·walk·c   | S·emul + P·walk·c |
//! | Compute    | κ·E             | κ·E·c                      | κ·E·c                         | κ·E·c             |
//!
//! K = TCP packets, S = syscalls, F = files opened, N = I/O requests,
//! B = I/O bytes, P = path walks, E = reference execution time (ns) and
//! c = host-to-device clock ratio.

mod calibrate;
pub mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibrate::{
    calibrate, score, statistics, CalibrationSpec, FitReport, Residual, Statistic, Target,
};

/// Smallest I/O unit a workload can issue.
pub const SECTOR_BYTES: u64 = 512;

/// The workload table shipped with the crate.
pub const WORKLOADS_CSV: &str = include_str!("../../data/workloads.csv");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LatencyError {
    #[error("model {model} needs cost parameter {param}")]
    MissingCalibration { model: ModelKind, param: CostParam },
    #[error("invalid cost {param} = {value}")]
    InvalidCost { param: CostParam, value: f64 },
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
    #[error("comparison needs at least two models")]
    TooFewModels,
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("replay failed: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "Host")]
    Host,
    #[serde(rename = "P.ISP-R")]
    PIspR,
    #[serde(rename = "P.ISP-V")]
    PIspV,
    #[serde(rename = "D-Naive")]
    DNaive,
    #[serde(rename = "D-FullOS")]
    DFullOs,
    #[serde(rename = "D-VirtFW")]
    DVirtFw,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Host,
        ModelKind::PIspR,
        ModelKind::PIspV,
        ModelKind::DNaive,
        ModelKind::DFullOs,
        ModelKind::DVirtFw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Host => "Host",
            ModelKind::PIspR => "P.ISP-R",
            ModelKind::PIspV => "P.ISP-V",
            ModelKind::DNaive => "D-Naive",
            ModelKind::DFullOs => "D-FullOS",
            ModelKind::DVirtFw => "D-VirtFW",
        }
    }

    pub fn is_pisp(self) -> bool {
        matches!(self, ModelKind::PIspR | ModelKind::PIspV)
    }

    /// Runs its kernels on the device cores.
    pub fn on_device(self) -> bool {
        self != ModelKind::Host
    }

    pub fn active_components(self) -> Vec<Component> {
        Component::ALL
            .into_iter()
            .filter(|c| match c {
                Component::KernelCtx | Component::LbaSet => self.is_pisp(),
                _ => true,
            })
            .collect()
    }

    pub fn required_params(self) -> Vec<CostParam> {
        use CostParam::*;
        let mut p = vec![
            NetPerPacket,
            IoPerRequest,
            FlashPerByte,
            WalkPerPath,
            ComputePerRefNs,
        ];
        match self {
            ModelKind::Host => p.extend([PciePerByte, HostSyscall]),
            ModelKind::PIspR => p.extend([
                RpcPerSyscall,
                CtxPerSyscall,
                HandshakePerFile,
                BareSyscall,
                ClockRatio,
            ]),
            ModelKind::PIspV => {
                p.extend([CtxPerSyscall, HandshakePerFile, BareSyscall, ClockRatio])
            }
            ModelKind::DNaive => p.extend([CopyPerByte, HostSyscall, OsStackSurcharge, ClockRatio]),
            ModelKind::DFullOs => p.extend([HostSyscall, OsStackSurcharge, ClockRatio]),
            ModelKind::DVirtFw => p.extend([EmulatedSyscall, ClockRatio]),
        }
        p
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = LatencyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LatencyError::InvalidWorkload(format!("unknown processing model {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    Network,
    #[serde(rename = "Kernel-ctx")]
    KernelCtx,
    #[serde(rename = "LBA-set")]
    LbaSet,
    Storage,
    System,
    Compute,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Network,
        Component::KernelCtx,
        Component::LbaSet,
        Component::Storage,
        Component::System,
        Component::Compute,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Network => "Network",
            Component::KernelCtx => "Kernel-ctx",
            Component::LbaSet => "LBA-set",
            Component::Storage => "Storage",
            Component::System => "System",
            Component::Compute => "Compute",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unit costs. Times are nanoseconds; `_per_byte` costs are ns per byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostParam {
    NetPerPacket,
    RpcPerSyscall,
    CtxPerSyscall,
    HandshakePerFile,
    IoPerRequest,
    FlashPerByte,
    PciePerByte,
    CopyPerByte,
    HostSyscall,
    /// Multiplier on the host syscall cost when a full OS runs on the
    /// device cores.
    OsStackSurcharge,
    EmulatedSyscall,
    BareSyscall,
    WalkPerPath,
    /// Compute time per nanosecond of reference execution time.
    ComputePerRefNs,
    /// Host clock over device clock.
    ClockRatio,
}

impl CostParam {
    pub const ALL: [CostParam; 15] = [
        CostParam::NetPerPacket,
        CostParam::RpcPerSyscall,
        CostParam::CtxPerSyscall,
        CostParam::HandshakePerFile,
        CostParam::IoPerRequest,
        CostParam::FlashPerByte,
        CostParam::PciePerByte,
        CostParam::CopyPerByte,
        CostParam::HostSyscall,
        CostParam::OsStackSurcharge,
        CostParam::EmulatedSyscall,
        CostParam::BareSyscall,
        CostParam::WalkPerPath,
        CostParam::ComputePerRefNs,
        CostParam::ClockRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostParam::NetPerPacket => "net_per_packet",
            CostParam::RpcPerSyscall => "rpc_per_syscall",
            CostParam::CtxPerSyscall => "ctx_per_syscall",
            CostParam::HandshakePerFile => "handshake_per_file",
            CostParam::IoPerRequest => "io_per_request",
            CostParam::FlashPerByte => "flash_per_byte",
            CostParam::PciePerByte => "pcie_per_byte",
            CostParam::CopyPerByte => "copy_per_byte",
            CostParam::HostSyscall => "host_syscall",
            CostParam::OsStackSurcharge => "os_stack_surcharge",
            CostParam::EmulatedSyscall => "emulated_syscall",
            CostParam::BareSyscall => "bare_syscall",
            CostParam::WalkPerPath => "walk_per_path",
            CostParam::ComputePerRefNs => "compute_per_ref_ns",
            CostParam::ClockRatio => "clock_ratio",
        }
    }
}

impl fmt::Display for CostParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A possibly partial set of unit costs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostTable(BTreeMap<CostParam, f64>);

impl CostTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, p: CostParam) -> Option<f64> {
        self.0.get(&p).copied()
    }

    pub fn set(&mut self, p: CostParam, v: f64) {
        self.0.insert(p, v);
    }

    pub fn with(mut self, p: CostParam, v: f64) -> Self {
        self.set(p, v);
        self
    }

    pub fn remove(&mut self, p: CostParam) -> Option<f64> {
        self.0.remove(&p)
    }

    pub fn iter(&self) -> impl Iterator<Item = (CostParam, f64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }

    /// Entries of `other` replace entries of `self`.
    pub fn merged(&self, other: &CostTable) -> CostTable {
        let mut out = self.clone();
        out.0.extend(other.0.iter().map(|(k, v)| (*k, *v)));
        out
    }

    /// Costs must be finite and non-negative; multipliers must be positive.
    pub fn validate(&self) -> Result<(), LatencyError> {
        for (p, v) in self.iter() {
            let positive = matches!(p, CostParam::ClockRatio | CostParam::OsStackSurcharge);
            if !v.is_finite() || v < 0.0 || (positive && v <= 0.0) {
                return Err(LatencyError::InvalidCost { param: p, value: v });
            }
        }
        Ok(())
    }

    pub fn covers(&self, model: ModelKind) -> Result<(), LatencyError> {
        match model
            .required_params()
            .into_iter()
            .find(|p| self.get(*p).is_none())
        {
            Some(param) => Err(LatencyError::MissingCalibration { model, param }),
            None => Ok(()),
        }
    }
}

/// One row of the workload table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadDescriptor {
    pub name: String,
    pub io_bytes: u64,
    pub io_count: u64,
    pub syscall_count: u64,
    pub path_walk_count: u64,
    pub files_opened: u64,
    pub tcp_packets: u64,
    pub reference_exec_ns: u64,
}

impl WorkloadDescriptor {
    pub fn validate(&self) -> Result<(), LatencyError> {
        if self.io_bytes < self.io_count.saturating_mul(SECTOR_BYTES) {
            return Err(LatencyError::InvalidWorkload(format!(
                "{}: {} bytes cannot fill {} sector-sized requests",
                self.name, self.io_bytes, self.io_count
            )));
        }
        Ok(())
    }

    /// Total number of discrete events a replay would issue.
    pub fn event_count(&self) -> u64 {
        self.io_count
            + self.syscall_count
            + self.path_walk_count
            + self.files_opened
            + self.tcp_packets
    }
}

#[derive(Debug, Deserialize)]
struct WorkloadRow {
    program: String,
    workload: String,
    io_size: String,
    io_count: String,
    syscalls: String,
    path_walks: String,
    files_opened: String,
    tcp_packets: String,
    exec_time: String,
}

/// Parses table quantities such as `1.3GB`, `317K`, `5.4M`, `24s` or `0`.
/// Prefixes are decimal.
pub fn parse_quantity(s: &str) -> Result<f64, LatencyError> {
    let t = s.trim();
    let bad = || LatencyError::InvalidWorkload(format!("bad quantity {s:?}"));
    let t = t
        .strip_suffix('B')
        .or_else(|| t.strip_suffix('s'))
        .unwrap_or(t);
    let (num, scale) = match t.chars().last() {
        Some('K') => (&t[..t.len() - 1], 1e3),
        Some('M') => (&t[..t.len() - 1], 1e6),
        Some('G') => (&t[..t.len() - 1], 1e9),
        Some('T') => (&t[..t.len() - 1], 1e12),
        _ => (t, 1.0),
    };
    let v: f64 = num.parse().map_err(|_| bad())?;
    if !v.is_finite() || v < 0.0 {
        return Err(bad());
    }
    Ok(v * scale)
}

/// Reads workload rows in the table's column layout. Workload names are
/// `<program>-<workload>`.
pub fn parse_workloads(csv_text: &str) -> Result<Vec<WorkloadDescriptor>, LatencyError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.deserialize::<WorkloadRow>() {
        let r = row.map_err(|e| LatencyError::InvalidWorkload(e.to_string()))?;
        let count = |s: &str| parse_quantity(s).map(|v| v.round() as u64);
        let w = WorkloadDescriptor {
            name: format!("{}-{}", r.program, r.workload),
            io_bytes: count(&r.io_size)?,
            io_count: count(&r.io_count)?,
            syscall_count: count(&r.syscalls)?,
            path_walk_count: count(&r.path_walks)?,
            files_opened: count(&r.files_opened)?,
            tcp_packets: count(&r.tcp_packets)?,
            reference_exec_ns: (parse_quantity(&r.exec_time)? * 1e9).round() as u64,
        };
        w.validate()?;
        out.push(w);
    }
    Ok(out)
}

/// The 13 shipped workloads.
pub fn table_workloads() -> Vec<WorkloadDescriptor> {
    parse_workloads(WORKLOADS_CSV).expect("shipped workload table parses")
}

/// A processing model plus per-model cost overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessingModel {
    pub kind: ModelKind,
    #[serde(default)]
    pub overrides: CostTable,
}

impl ProcessingModel {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            overrides: CostTable::new(),
        }
    }
}

impl From<ModelKind> for ProcessingModel {
    fn from(kind: ModelKind) -> Self {
        Self::new(kind)
    }
}

/// Nanoseconds per component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Breakdown {
    pub components: [f64; 6],
}

impl Breakdown {
    pub fn get(&self, c: Component) -> f64 {
        self.components[c.index()]
    }

    pub fn set(&mut self, c: Component, v: f64) {
        self.components[c.index()] = v;
    }

    pub fn total(&self) -> f64 {
        self.components.iter().sum()
    }

    pub fn fraction(&self, c: Component) -> f64 {
        let t = self.total();
        if t == 0.0 {
            0.0
        } else {
            self.get(c) / t
        }
    }
}

pub fn evaluate(
    w: &WorkloadDescriptor,
    model: &ProcessingModel,
    table: &CostTable,
) -> Result<Breakdown, LatencyError> {
    let table = table.merged(&model.overrides);
    table.covers(model.kind)?;
    table.validate()?;
    let c = |p: CostParam| table.get(p).unwrap_or(0.0);
    use CostParam::*;
    let kind = model.kind;
    let k = w.tcp_packets as f64;
    let s = w.syscall_count as f64;
    let f = w.files_opened as f64;
    let n = w.io_count as f64;
    let b = w.io_bytes as f64;
    let p = w.path_walk_count as f64;
    let e = w.reference_exec_ns as f64;
    let clock = if kind.on_device() { c(ClockRatio) } else { 1.0 };

    let mut out = Breakdown::default();
    let mut network = k * c(NetPerPacket);
    if kind == ModelKind::PIspR {
        network += s * c(RpcPerSyscall);
    }
    out.set(Component::Network, network);
    if kind.is_pisp() {
        out.set(Component::KernelCtx, s * c(CtxPerSyscall));
        out.set(Component::LbaSet, f * c(HandshakePerFile));
    }
    let per_byte = match kind {
        ModelKind::Host => c(FlashPerByte) + c(PciePerByte),
        ModelKind::DNaive => c(FlashPerByte) + c(CopyPerByte),
        _ => c(FlashPerByte),
    };
    out.set(Component::Storage, n * c(IoPerRequest) + b * per_byte);
    let system = match kind {
        ModelKind::Host => s * c(HostSyscall) + p * c(WalkPerPath),
        ModelKind::PIspR | ModelKind::PIspV => s * c(BareSyscall) + p * c(WalkPerPath),
        ModelKind::DNaive | ModelKind::DFullOs => {
            s * c(HostSyscall) * c(OsStackSurcharge) + p * c(WalkPerPath) * clock
        }
        ModelKind::DVirtFw => s * c(EmulatedSyscall) + p * c(WalkPerPath) * clock,
    };
    out.set(Component::System, system);
    out.set(Component::Compute, e * c(ComputePerRefNs) * clock);
    Ok(out)
}

pub fn geometric_mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x.ln(), n + 1));
    if n == 0 {
        1.0
    } else {
        (sum / n as f64).exp()
    }
}

/// Geometric-mean total-latency ratios across workloads:
/// `ratio(a, b)` is the mean of `total_a / total_b`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioMatrix {
    pub models: Vec<ModelKind>,
    pub ratios: Vec<Vec<f64>>,
}

impl RatioMatrix {
    pub fn ratio(&self, a: ModelKind, b: ModelKind) -> Option<f64> {
        let i = self.models.iter().position(|m| *m == a)?;
        let j = self.models.iter().position(|m| *m == b)?;
        Some(self.ratios[i][j])
    }

    /// Each model's latency relative to `base`.
    pub fn normalized_to(&self, base: ModelKind) -> Option<Vec<(ModelKind, f64)>> {
        self.models
            .iter()
            .map(|m| self.ratio(*m, base).map(|r| (*m, r)))
            .collect()
    }
}

pub fn compare(
    workloads: &[WorkloadDescriptor],
    models: &[ProcessingModel],
    table: &CostTable,
) -> Result<RatioMatrix, LatencyError> {
    if models.len() < 2 {
        return Err(LatencyError::TooFewModels);
    }
    let totals: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            workloads
                .iter()
                .map(|w| evaluate(w, m, table).map(|b| b.total()))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let ratios = totals
        .iter()
        .map(|a| {
            totals
                .iter()
                .map(|b| {
                    geometric_mean(
                        a.iter()
                            .zip(b)
                            .filter(|(x, y)| **x > 0.0 && **y > 0.0)
                            .map(|(x, y)| x / y),
                    )
                })
                .collect()
        })
        .collect();
    Ok(RatioMatrix {
        models: models.iter().map(|m| m.kind).collect(),
        ratios,
    })
}

/// Every (workload, model) breakdown as CSV with one column per component.
pub fn breakdown_csv(
    workloads: &[WorkloadDescriptor],
    models: &[ModelKind],
    table: &CostTable,
) -> Result<String, LatencyError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["workload", "model"];
    header.extend(Component::ALL.iter().map(|c| c.name()));
    header.push("total");
    w.write_record(&header).expect("in-memory write");
    for wl in workloads {
        for m in models {
            let b = evaluate(wl, &ProcessingModel::new(*m), table)?;
            let mut row = vec![wl.name.clone(), m.name().to_string()];
            row.extend(b.components.iter().map(|v| format!("{v:.0}")));
            row.push(format!("{:.0}", b.total()));
            w.write_record(&row).expect("in-memory write");
        }
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv"))
}
