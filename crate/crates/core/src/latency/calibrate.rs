use std::collections::BTreeMap;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use serde::{Deserialize, Serialize};

use super::{
    evaluate, geometric_mean, Breakdown, Component, CostParam, CostTable, LatencyError, ModelKind,
    WorkloadDescriptor,
};

/// Aggregate figures a cost table is fitted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// Mean share of Storage in Host latency.
    HostStorageFraction,
    /// Mean P.ISP Storage over Host Storage.
    IspStorageRatio,
    /// Mean share of Kernel-ctx plus LBA-set in P.ISP-R and P.ISP-V latency.
    IspCommunicateFraction,
    /// P.ISP-R and P.ISP-V total over Host total.
    IspOverHost,
    VOverR,
    FullOsOverV,
    NaiveOverFullOs,
    /// P.ISP-R and P.ISP-V total over D-VirtFW total.
    VirtAdvantageIsp,
    VirtAdvantageNaive,
    VirtAdvantageFullOs,
}

impl Statistic {
    pub const ALL: [Statistic; 10] = [
        Statistic::HostStorageFraction,
        Statistic::IspStorageRatio,
        Statistic::IspCommunicateFraction,
        Statistic::IspOverHost,
        Statistic::VOverR,
        Statistic::FullOsOverV,
        Statistic::NaiveOverFullOs,
        Statistic::VirtAdvantageIsp,
        Statistic::VirtAdvantageNaive,
        Statistic::VirtAdvantageFullOs,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Statistic::HostStorageFraction => "Host Storage / Host total",
            Statistic::IspStorageRatio => "P.ISP Storage / Host Storage",
            Statistic::IspCommunicateFraction => "P.ISP Communicate / P.ISP total",
            Statistic::IspOverHost => "P.ISP total / Host total",
            Statistic::VOverR => "P.ISP-V / P.ISP-R",
            Statistic::FullOsOverV => "D-FullOS / P.ISP-V",
            Statistic::NaiveOverFullOs => "D-Naive / D-FullOS",
            Statistic::VirtAdvantageIsp => "P.ISP / D-VirtFW",
            Statistic::VirtAdvantageNaive => "D-Naive / D-VirtFW",
            Statistic::VirtAdvantageFullOs => "D-FullOS / D-VirtFW",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub statistic: Statistic,
    pub value: f64,
    /// Allowed relative error.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    /// Starting point and regularization anchor.
    pub prior: CostTable,
    /// Parameters the fit may move; all others stay at the prior.
    pub free: Vec<CostParam>,
    pub targets: Vec<Target>,
    /// Weight of the squared log-distance from the prior.
    pub regularization: f64,
    pub max_iters: u64,
    /// Fresh-simplex restarts after the first run.
    pub restarts: usize,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        crate::defaults::defaults().latency.calibration.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residual {
    pub statistic: Statistic,
    pub label: String,
    pub target: f64,
    pub achieved: f64,
    /// achieved / target - 1
    pub relative_error: f64,
    pub tolerance: f64,
    pub within: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub table: CostTable,
    pub free: Vec<CostParam>,
    /// More free parameters than targets: the prior term picks the
    /// solution.
    pub underdetermined: bool,
    pub objective: f64,
    pub residuals: Vec<Residual>,
}

impl FitReport {
    /// Targets outside their tolerance.
    pub fn flagged(&self) -> Vec<&Residual> {
        self.residuals.iter().filter(|r| !r.within).collect()
    }

    pub fn residual(&self, s: Statistic) -> Option<&Residual> {
        self.residuals.iter().find(|r| r.statistic == s)
    }
}

/// Computes every [`Statistic`] over `workloads`.
pub fn statistics(
    workloads: &[WorkloadDescriptor],
    table: &CostTable,
) -> Result<BTreeMap<Statistic, f64>, LatencyError> {
    let mut by_model: BTreeMap<ModelKind, Vec<Breakdown>> = BTreeMap::new();
    for m in ModelKind::ALL {
        let rows = workloads
            .iter()
            .map(|w| evaluate(w, &m.into(), table))
            .collect::<Result<Vec<_>, _>>()?;
        by_model.insert(m, rows);
    }
    let rows = |m: ModelKind| &by_model[&m];
    let mean = |xs: Vec<f64>| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    let ratio = |a: &[ModelKind], b: ModelKind| {
        geometric_mean(a.iter().flat_map(|m| {
            rows(*m)
                .iter()
                .zip(rows(b))
                .map(|(x, y)| x.total() / y.total())
        }))
    };
    let isp = [ModelKind::PIspR, ModelKind::PIspV];
    let mut out = BTreeMap::new();
    out.insert(
        Statistic::HostStorageFraction,
        mean(
            rows(ModelKind::Host)
                .iter()
                .map(|b| b.fraction(Component::Storage))
                .collect(),
        ),
    );
    out.insert(
        Statistic::IspStorageRatio,
        mean(
            rows(ModelKind::PIspV)
                .iter()
                .zip(rows(ModelKind::Host))
                .map(|(p, h)| p.get(Component::Storage) / h.get(Component::Storage))
                .collect(),
        ),
    );
    out.insert(
        Statistic::IspCommunicateFraction,
        mean(
            isp.iter()
                .flat_map(|m| rows(*m).iter())
                .map(|b| b.fraction(Component::KernelCtx) + b.fraction(Component::LbaSet))
                .collect(),
        ),
    );
    out.insert(Statistic::IspOverHost, ratio(&isp, ModelKind::Host));
    out.insert(
        Statistic::VOverR,
        ratio(&[ModelKind::PIspV], ModelKind::PIspR),
    );
    out.insert(
        Statistic::FullOsOverV,
        ratio(&[ModelKind::DFullOs], ModelKind::PIspV),
    );
    out.insert(
        Statistic::NaiveOverFullOs,
        ratio(&[ModelKind::DNaive], ModelKind::DFullOs),
    );
    out.insert(Statistic::VirtAdvantageIsp, ratio(&isp, ModelKind::DVirtFw));
    out.insert(
        Statistic::VirtAdvantageNaive,
        ratio(&[ModelKind::DNaive], ModelKind::DVirtFw),
    );
    out.insert(
        Statistic::VirtAdvantageFullOs,
        ratio(&[ModelKind::DFullOs], ModelKind::DVirtFw),
    );
    Ok(out)
}

struct Fit<'a> {
    workloads: &'a [WorkloadDescriptor],
    spec: &'a CalibrationSpec,
}

impl Fit<'_> {
    fn table(&self, x: &[f64]) -> CostTable {
        let mut t = self.spec.prior.clone();
        for (p, v) in self.spec.free.iter().zip(x) {
            let base = self.spec.prior.get(*p).unwrap_or(0.0);
            t.set(*p, base * v.exp());
        }
        t
    }

    fn objective(&self, x: &[f64]) -> Result<f64, LatencyError> {
        let stats = statistics(self.workloads, &self.table(x))?;
        let misfit: f64 = self
            .spec
            .targets
            .iter()
            .map(|t| (stats[&t.statistic] / t.value).ln().powi(2))
            .sum();
        let prior: f64 = x.iter().map(|v| v * v).sum();
        let value = misfit + self.spec.regularization * prior;
        Ok(if value.is_finite() { value } else { f64::MAX })
    }
}

impl CostFunction for Fit<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> Result<f64, argmin::core::Error> {
        Ok(self.objective(x)?)
    }
}

fn nelder_mead(
    fit: &Fit<'_>,
    start: Vec<f64>,
    step: f64,
    iters: u64,
) -> Result<(Vec<f64>, f64), LatencyError> {
    let mut simplex = vec![start.clone()];
    for i in 0..start.len() {
        let mut v = start.clone();
        v[i] += step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-12)
        .map_err(|e| LatencyError::Optimizer(e.to_string()))?;
    let res = Executor::new(
        Fit {
            workloads: fit.workloads,
            spec: fit.spec,
        },
        solver,
    )
    .configure(|s| s.max_iters(iters))
    .run()
    .map_err(|e| LatencyError::Optimizer(e.to_string()))?;
    let best = res.state().get_best_param().cloned().unwrap_or(start);
    let cost = res.state().get_best_cost();
    Ok((best, cost))
}

/// Fits the free costs of `spec.prior` to `spec.targets` by minimizing
/// squared log ratios (plus the prior term) with Nelder-Mead in log space.
/// With no free parameters the prior is only scored.
pub fn calibrate(
    workloads: &[WorkloadDescriptor],
    spec: &CalibrationSpec,
) -> Result<FitReport, LatencyError> {
    spec.prior.validate()?;
    for m in ModelKind::ALL {
        spec.prior.covers(m)?;
    }
    for p in &spec.free {
        if spec.prior.get(*p).is_none_or(|v| v <= 0.0) {
            return Err(LatencyError::InvalidCost {
                param: *p,
                value: spec.prior.get(*p).unwrap_or(0.0),
            });
        }
    }
    let fit = Fit { workloads, spec };
    let mut x = vec![0.0; spec.free.len()];
    let mut objective = fit.objective(&x)?;
    if !x.is_empty() {
        for round in 0..=spec.restarts {
            let step = if round == 0 { 0.5 } else { 0.1 };
            let (nx, cost) = nelder_mead(&fit, x.clone(), step, spec.max_iters)?;
            if cost <= objective {
                x = nx;
                objective = cost;
            }
        }
    }
    let table = fit.table(&x);
    Ok(FitReport {
        residuals: score(workloads, &table, &spec.targets)?,
        table,
        free: spec.free.clone(),
        underdetermined: spec.free.len() > spec.targets.len(),
        objective,
    })
}

/// Compares `table` against `targets` without fitting.
pub fn score(
    workloads: &[WorkloadDescriptor],
    table: &CostTable,
    targets: &[Target],
) -> Result<Vec<Residual>, LatencyError> {
    let stats = statistics(workloads, table)?;
    Ok(targets
        .iter()
        .map(|t| {
            let achieved = stats[&t.statistic];
            let relative_error = achieved / t.value - 1.0;
            Residual {
                statistic: t.statistic,
                label: t.statistic.label().to_string(),
                target: t.value,
                achieved,
                relative_error,
                tolerance: t.tolerance,
                within: relative_error.abs() <= t.tolerance,
            }
        })
        .collect())
}
