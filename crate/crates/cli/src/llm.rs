//! `llm-sweep`: sequence and batch sweeps, optimal plans and aggregate fit
//! residuals for the storage-pool inference model.

use dockerssd::defaults::defaults;
use dockerssd::latency::geometric_mean;
use dockerssd::llm_pool::{
    aggregate_residuals, architecture, architectures, batch_sweep, calibrate_swap_surcharge,
    flops_per_token, inference_time, max_pipeline_degree, plan_category, saturation_limit,
    search_plan, seq_sweep, AggregateResidual, DeploymentKind, LlmError, ParallelismPlan,
    PlanCategory, PoolParams, SweepReport,
};
use serde::Serialize;

use crate::scenario::LlmParams;
use crate::{module, slope, Artifacts, CliError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanRow {
    pub model: String,
    pub deployment: DeploymentKind,
    pub plan: ParallelismPlan,
    pub category: PlanCategory,
    pub max_pipeline: u64,
    pub total_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelTrends {
    pub model: String,
    /// D-NoCache over H-NoCache total under the host's best plan.
    pub nocache_slowdown: f64,
    /// D-Cache speed relative to H-Cache at the shortest swept length.
    pub short_seq_speed: Option<f64>,
    pub crossover: Option<u64>,
    pub saturation: Option<f64>,
    pub saturation_limit: f64,
    /// Batch-sweep length: the configured one, else the crossover.
    pub batch_seq: Option<u64>,
    pub batch_max_speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopSlopes {
    pub model: String,
    pub cached: f64,
    pub uncached: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlmReport {
    pub pool: PoolParams,
    pub swap_surcharge_refit: bool,
    pub nocache_slowdown_geomean: f64,
    pub trends: Vec<ModelTrends>,
    pub flop_slopes: Vec<FlopSlopes>,
    pub plan_seq: u64,
    pub plans: Vec<PlanRow>,
    pub aggregates: Vec<AggregateResidual>,
    #[serde(skip)]
    pub seq_sweeps: Vec<SweepReport>,
    #[serde(skip)]
    pub batch_sweeps: Vec<SweepReport>,
}

impl LlmReport {
    pub fn trend(&self, model: &str) -> Option<&ModelTrends> {
        self.trends.iter().find(|t| t.model == model)
    }

    pub fn artifacts(&self) -> Artifacts {
        let mut a = Artifacts::default();
        a.json("llm_report.json", self);
        a.text("seq_sweep.csv", join_csv(&self.seq_sweeps));
        a.text("batch_sweep.csv", join_csv(&self.batch_sweeps));
        let mut csv =
            String::from("model,deployment,data,tensor,pipeline,category,max_pipeline,total_ns\n");
        for r in &self.plans {
            csv.push_str(&format!(
                "{},{},{},{},{},{:?},{},{:.6e}\n",
                r.model,
                r.deployment,
                r.plan.data,
                r.plan.tensor,
                r.plan.pipeline,
                r.category,
                r.max_pipeline,
                r.total_ns
            ));
        }
        a.text("plans.csv", csv);
        let mut csv = String::from("aggregate,target,achieved,log_residual\n");
        for r in &self.aggregates {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6}\n",
                r.label, r.target, r.achieved, r.log_residual
            ));
        }
        a.text("aggregates.csv", csv);
        a
    }
}

fn join_csv(reports: &[SweepReport]) -> String {
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        let csv = r.csv();
        let body = if i == 0 {
            csv.as_str()
        } else {
            csv.split_once('\n').map_or("", |(_, b)| b)
        };
        out.push_str(body);
    }
    out
}

fn pool(overrides: &toml::Table) -> Result<PoolParams, CliError> {
    let base = toml::Value::try_from(PoolParams::default()).map_err(module("pool defaults"))?;
    let mut table = match base {
        toml::Value::Table(t) => t,
        _ => unreachable!("structs serialize to tables"),
    };
    for (k, v) in overrides {
        if !table.contains_key(k) {
            return Err(CliError::InvalidScenario(format!(
                "unknown pool parameter {k:?}"
            )));
        }
        table.insert(k.clone(), v.clone());
    }
    let p: PoolParams = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::InvalidScenario(e.to_string()))?;
    p.validate()
        .map_err(|e| CliError::InvalidScenario(e.to_string()))?;
    Ok(p)
}

fn pow2(range: [u32; 2]) -> Result<Vec<u64>, CliError> {
    if range[0] > range[1] || range[1] > 30 {
        return Err(CliError::InvalidScenario(format!(
            "bad exponent range {range:?}"
        )));
    }
    Ok((range[0]..=range[1]).map(|e| 1u64 << e).collect())
}

fn invalid(e: LlmError) -> CliError {
    match e {
        LlmError::UnknownModel(_) | LlmError::InvalidInput(_) => {
            CliError::InvalidScenario(e.to_string())
        }
        other => module("llm")(other),
    }
}

pub fn run(p: &LlmParams) -> Result<LlmReport, CliError> {
    let mut pool = pool(&p.pool)?;
    let d = &defaults().llm;
    if p.calibrate_surcharge {
        let anchor = architecture(&d.anchor.model).map_err(invalid)?;
        pool.swap_surcharge =
            calibrate_swap_surcharge(&anchor, &pool, d.anchor.seq, d.anchor.speedup)
                .map_err(invalid)?;
    }
    let seqs = pow2(p.seq_exponents)?;
    let batches = pow2(p.batch_exponents)?;
    let mut seq_sweeps = Vec::new();
    let mut batch_sweeps = Vec::new();
    let mut trends = Vec::new();
    for name in &p.models {
        let a = architecture(name).map_err(invalid)?;
        let s = seq_sweep(&a, &pool, &seqs, 1).map_err(invalid)?;
        let batch_seq = p
            .batch_seq
            .get(&a.name)
            .or_else(|| d.report.batch_seq.get(&a.name))
            .copied()
            .or(s.crossover);
        let b = match batch_seq {
            Some(len) => Some(batch_sweep(&a, &pool, len, &batches).map_err(invalid)?),
            None => None,
        };
        trends.push(ModelTrends {
            model: a.name.clone(),
            nocache_slowdown: nocache_slowdown(&a, &pool, d.report.plan_seq)?,
            short_seq_speed: s.points.first().and_then(|p| p.cache_speedup()),
            crossover: s.crossover,
            saturation: s.saturation,
            saturation_limit: saturation_limit(&a, &pool),
            batch_seq,
            batch_max_speedup: b.as_ref().and_then(|b| b.max_speedup),
        });
        seq_sweeps.push(s);
        batch_sweeps.extend(b);
    }
    let mut plans = Vec::new();
    let mut slowdowns = Vec::new();
    let mut flop_slopes = Vec::new();
    let slope_seqs: Vec<u64> = (6..=14).map(|e| 1u64 << e).collect();
    let xs: Vec<f64> = slope_seqs.iter().map(|s| (*s as f64).ln()).collect();
    for a in architectures() {
        for kind in DeploymentKind::ALL {
            let (plan, t) =
                search_plan(&a, &pool.config(kind), d.report.plan_seq, 1).map_err(invalid)?;
            plans.push(PlanRow {
                model: a.name.clone(),
                deployment: kind,
                plan,
                category: plan_category(&a, &plan),
                max_pipeline: max_pipeline_degree(&a, pool.node_count),
                total_ns: t.total(),
            });
        }
        slowdowns.push(nocache_slowdown(&a, &pool, d.report.plan_seq)?);
        let series = |cached: bool| -> Result<Vec<f64>, CliError> {
            slope_seqs
                .iter()
                .map(|s| {
                    flops_per_token(&a, *s, cached)
                        .map(|f| (f.attention as f64).ln())
                        .map_err(invalid)
                })
                .collect()
        };
        flop_slopes.push(FlopSlopes {
            model: a.name.clone(),
            cached: slope(&xs, &series(true)?),
            uncached: slope(&xs, &series(false)?),
        });
    }
    let aggregates =
        aggregate_residuals(&pool, d.report.plan_seq, &d.report.aggregates).map_err(invalid)?;
    Ok(LlmReport {
        pool,
        swap_surcharge_refit: p.calibrate_surcharge,
        nocache_slowdown_geomean: geometric_mean(slowdowns),
        trends,
        flop_slopes,
        plan_seq: d.report.plan_seq,
        plans,
        aggregates,
        seq_sweeps,
        batch_sweeps,
    })
}

fn nocache_slowdown(
    a: &dockerssd::llm_pool::LlmArchitecture,
    pool: &PoolParams,
    seq: u64,
) -> Result<f64, CliError> {
    let (plan, host) =
        search_plan(a, &pool.config(DeploymentKind::HNoCache), seq, 1).map_err(invalid)?;
    let device =
        inference_time(a, &pool.config(DeploymentKind::DNoCache), &plan).map_err(invalid)?;
    Ok(device.total() / host.total())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_overrides_are_strict() {
        let mut t = toml::Table::new();
        t.insert("node_count".into(), toml::Value::Integer(32));
        assert_eq!(pool(&t).unwrap().node_count, 32);
        t.insert("node_count".into(), toml::Value::Integer(-4));
        assert!(matches!(pool(&t), Err(CliError::InvalidScenario(_))));
        t.insert("node_count".into(), toml::Value::Integer(8));
        assert!(matches!(pool(&t), Err(CliError::InvalidScenario(_))));
        let mut u = toml::Table::new();
        u.insert("warp".into(), toml::Value::Integer(1));
        assert!(matches!(pool(&u), Err(CliError::InvalidScenario(_))));
    }

    #[test]
    fn unknown_model_is_invalid() {
        let p = LlmParams {
            models: vec!["eliza".into()],
            ..Default::default()
        };
        assert!(matches!(run(&p), Err(CliError::InvalidScenario(_))));
    }

    #[test]
    fn csv_has_one_header() {
        let p = LlmParams {
            seq_exponents: [4, 6],
            batch_exponents: [0, 1],
            ..Default::default()
        };
        let r = run(&p).unwrap();
        let a = r.artifacts();
        let csv = std::str::from_utf8(a.get("seq_sweep.csv").unwrap()).unwrap();
        assert_eq!(csv.matches("model,seq").count(), 1);
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
        assert_eq!(r.plans.len(), 32);
    }
}
