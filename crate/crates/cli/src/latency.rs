//! `latency` and `replay-check`.

use std::collections::BTreeMap;

use dockerssd::defaults::defaults;
use dockerssd::latency::replay::{replay, synthetic_workload, ReplayReport};
use dockerssd::latency::{
    breakdown_csv, calibrate, compare, evaluate, parse_workloads, score, statistics,
    table_workloads, CalibrationSpec, Component, CostTable, ModelKind, ProcessingModel, Residual,
    Statistic, WorkloadDescriptor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::scenario::{LatencyParams, ReplayParams};
use crate::{module, Artifacts, CliError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub calibrated: bool,
    pub workloads: Vec<String>,
    pub table: CostTable,
    pub objective: Option<f64>,
    pub residuals: Vec<Residual>,
    pub statistics: BTreeMap<Statistic, f64>,
    /// Largest D-VirtFW LBA-set or Kernel-ctx value over all workloads.
    pub virtfw_structural_max: f64,
    /// Mean total latency relative to Host.
    pub relative_to_host: BTreeMap<String, f64>,
    #[serde(skip)]
    pub breakdown_csv: String,
}

impl LatencyReport {
    pub fn artifacts(&self) -> Artifacts {
        let mut a = Artifacts::default();
        a.json("fit_report.json", self);
        a.text("breakdown.csv", self.breakdown_csv.clone());
        let mut csv = String::from("statistic,target,achieved,relative_error,tolerance,within\n");
        for r in &self.residuals {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{},{}\n",
                r.label, r.target, r.achieved, r.relative_error, r.tolerance, r.within
            ));
        }
        a.text("residuals.csv", csv);
        a
    }
}

fn cost_overrides(base: &CostTable, overrides: &toml::Table) -> Result<CostTable, CliError> {
    let extra: CostTable = toml::Value::Table(overrides.clone())
        .try_into()
        .map_err(|e: toml::de::Error| CliError::InvalidScenario(e.to_string()))?;
    let table = base.merged(&extra);
    table
        .validate()
        .map_err(|e| CliError::InvalidScenario(e.to_string()))?;
    Ok(table)
}

fn workloads(p: &LatencyParams) -> Result<Vec<WorkloadDescriptor>, CliError> {
    match &p.workloads_csv {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::InvalidScenario(format!("cannot read {path}: {e}")))?;
            parse_workloads(&text).map_err(|e| CliError::InvalidScenario(e.to_string()))
        }
        None => Ok(table_workloads()),
    }
}

pub fn run(p: &LatencyParams) -> Result<LatencyReport, CliError> {
    let wl = workloads(p)?;
    let d = &defaults().latency;
    let (table, objective, residuals) = if p.calibrate {
        let spec = CalibrationSpec {
            prior: cost_overrides(&d.calibration.prior, &p.costs)?,
            ..CalibrationSpec::default()
        };
        let fit = calibrate(&wl, &spec).map_err(module("calibration"))?;
        (fit.table, Some(fit.objective), fit.residuals)
    } else {
        let table = cost_overrides(&d.costs, &p.costs)?;
        let residuals = score(&wl, &table, &d.calibration.targets).map_err(module("scoring"))?;
        (table, None, residuals)
    };
    let stats = statistics(&wl, &table).map_err(module("statistics"))?;
    let mut structural = 0.0f64;
    for w in &wl {
        let b = evaluate(w, &ProcessingModel::new(ModelKind::DVirtFw), &table)
            .map_err(module("evaluate"))?;
        structural = structural
            .max(b.get(Component::LbaSet).abs())
            .max(b.get(Component::KernelCtx).abs());
    }
    let models: Vec<ProcessingModel> = ModelKind::ALL
        .into_iter()
        .map(ProcessingModel::new)
        .collect();
    let ratios = compare(&wl, &models, &table).map_err(module("compare"))?;
    let relative_to_host = ratios
        .normalized_to(ModelKind::Host)
        .unwrap_or_default()
        .into_iter()
        .map(|(m, r)| (m.name().to_string(), r))
        .collect();
    let csv = breakdown_csv(&wl, &ModelKind::ALL, &table).map_err(module("breakdown"))?;
    Ok(LatencyReport {
        calibrated: p.calibrate,
        workloads: wl.iter().map(|w| w.name.clone()).collect(),
        table,
        objective,
        residuals,
        statistics: stats,
        virtfw_structural_max: structural,
        relative_to_host,
        breakdown_csv: csv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub reports: Vec<ReplayReport>,
}

impl ReplayCheckReport {
    /// One line per (workload, model, component) outside tolerance.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.reports {
            for d in r.deltas.iter().filter(|d| d.relative > self.tolerance) {
                out.push(format!(
                    "{} {} {}: analytical {:.0} ns, replayed {:.0} ns ({:.1}% off)",
                    r.workload,
                    r.model,
                    d.component.name(),
                    d.analytical,
                    d.replayed,
                    d.relative * 100.0
                ));
            }
        }
        out
    }

    pub fn artifacts(&self) -> Artifacts {
        let mut a = Artifacts::default();
        let mut csv =
            String::from("workload,model,events,component,analytical,replayed,relative\n");
        for r in &self.reports {
            for d in &r.deltas {
                csv.push_str(&format!(
                    "{},{},{},{},{:.1},{:.1},{:.6}\n",
                    r.workload,
                    r.model,
                    r.events,
                    d.component.name(),
                    d.analytical,
                    d.replayed,
                    d.relative
                ));
            }
        }
        a.text("replay.csv", csv);
        a.json("replay_report.json", self);
        a
    }
}

/// Replays synthetic workloads through the simulated device under every
/// model and compares each component with the analytical breakdown.
pub fn replay_check(
    p: &LatencyParams,
    r: &ReplayParams,
    seed: u64,
) -> Result<ReplayCheckReport, CliError> {
    if r.max_events > 1000 {
        return Err(CliError::InvalidScenario(
            "replay workloads are limited to 1000 events".into(),
        ));
    }
    let analytical = cost_overrides(&defaults().latency.costs, &p.costs)?;
    let simulated = cost_overrides(&analytical, &r.simulated_costs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for i in 0..r.workloads {
        let w = synthetic_workload(&mut rng, &format!("synthetic-{i}"), r.max_events);
        for m in ModelKind::ALL {
            reports.push(replay(&w, m, &analytical, &simulated).map_err(module("replay"))?);
        }
    }
    Ok(ReplayCheckReport {
        seed,
        tolerance: r.tolerance,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dockerssd::latency::CostParam;

    #[test]
    fn shipped_costs_meet_targets_without_refit() {
        let r = run(&LatencyParams {
            calibrate: false,
            ..Default::default()
        })
        .unwrap();
        assert!(r.residuals.iter().all(|r| r.within));
        assert_eq!(r.virtfw_structural_max, 0.0);
    }

    #[test]
    fn unknown_cost_override_rejected() {
        let mut costs = toml::Table::new();
        costs.insert("warp_factor".into(), toml::Value::Float(1.0));
        let p = LatencyParams {
            calibrate: false,
            costs,
            ..Default::default()
        };
        assert!(matches!(run(&p), Err(CliError::InvalidScenario(_))));
    }

    #[test]
    fn miscalibrated_replay_names_component() {
        let mut simulated_costs = toml::Table::new();
        simulated_costs.insert(
            CostParam::HandshakePerFile.name().into(),
            toml::Value::Float(90_000.0),
        );
        let rp = ReplayParams {
            workloads: 2,
            max_events: 400,
            tolerance: 0.10,
            simulated_costs,
        };
        let r = replay_check(&LatencyParams::default(), &rp, 9).unwrap();
        let f = r.failures();
        assert!(!f.is_empty());
        assert!(f.iter().all(|l| l.contains("LBA-set")), "{f:?}");
    }

    #[test]
    fn empty_workload_replays_to_zero() {
        let w = WorkloadDescriptor {
            name: "empty".into(),
            io_bytes: 0,
            io_count: 0,
            syscall_count: 0,
            path_walk_count: 0,
            files_opened: 0,
            tcp_packets: 0,
            reference_exec_ns: 0,
        };
        let t = &defaults().latency.costs;
        let r = replay(&w, ModelKind::DVirtFw, t, t).unwrap();
        assert_eq!(r.replayed.total(), 0.0);
        assert_eq!(r.analytical.total(), 0.0);
    }
}
