use serde::{Deserialize, Serialize};

use super::{
    architectures, factorizations, search_plan, DeploymentKind, LlmArchitecture, LlmError,
    ParallelismPlan, PoolParams,
};

/// Best time per deployment at one grid point, `None` when no plan fits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeqPoint {
    pub seq: u64,
    pub batch: u64,
    pub times: [Option<f64>; 4],
    pub plans: [Option<ParallelismPlan>; 4],
}

impl SeqPoint {
    pub fn time(&self, kind: DeploymentKind) -> Option<f64> {
        self.times[kind as usize]
    }

    /// How many times faster `fast` is than `slow`.
    pub fn speedup(&self, fast: DeploymentKind, slow: DeploymentKind) -> Option<f64> {
        Some(self.time(slow)? / self.time(fast)?)
    }

    /// D-Cache against H-Cache.
    pub fn cache_speedup(&self) -> Option<f64> {
        self.speedup(DeploymentKind::DCache, DeploymentKind::HCache)
    }
}

pub type BatchPoint = SeqPoint;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub model: String,
    pub points: Vec<SeqPoint>,
    /// First sequence length where D-Cache is at least as fast as H-Cache.
    pub crossover: Option<u64>,
    /// D-Cache/H-Cache speedup at the last feasible point.
    pub saturation: Option<f64>,
    pub max_speedup: Option<f64>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("model,seq,batch");
        for k in DeploymentKind::ALL {
            out.push(',');
            out.push_str(k.name());
        }
        out.push_str(",dcache_over_hcache,hnocache_over_dnocache\n");
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.6e}")).unwrap_or_default();
        for p in &self.points {
            out.push_str(&format!("{},{},{}", self.model, p.seq, p.batch));
            for k in DeploymentKind::ALL {
                out.push(',');
                out.push_str(&cell(p.time(k)));
            }
            let nocache = p.speedup(DeploymentKind::HNoCache, DeploymentKind::DNoCache);
            out.push_str(&format!(",{},{}\n", cell(p.cache_speedup()), cell(nocache)));
        }
        out
    }
}

fn point(
    arch: &LlmArchitecture,
    pool: &PoolParams,
    seq: u64,
    batch: u64,
) -> Result<SeqPoint, LlmError> {
    let mut times = [None; 4];
    let mut plans = [None; 4];
    for k in DeploymentKind::ALL {
        match search_plan(arch, &pool.config(k), seq, batch) {
            Ok((plan, t)) => {
                times[k as usize] = Some(t.total());
                plans[k as usize] = Some(plan);
            }
            Err(LlmError::NoFeasiblePlan { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(SeqPoint {
        seq,
        batch,
        times,
        plans,
    })
}

fn report(arch: &LlmArchitecture, points: Vec<SeqPoint>) -> SweepReport {
    let crossover = points
        .iter()
        .find(|p| p.cache_speedup().is_some_and(|s| s >= 1.0))
        .map(|p| p.seq);
    let saturation = points.iter().rev().find_map(SeqPoint::cache_speedup);
    let max_speedup = points
        .iter()
        .filter_map(SeqPoint::cache_speedup)
        .reduce(f64::max);
    SweepReport {
        model: arch.name.clone(),
        points,
        crossover,
        saturation,
        max_speedup,
    }
}

pub fn seq_sweep(
    arch: &LlmArchitecture,
    pool: &PoolParams,
    seqs: &[u64],
    batch: u64,
) -> Result<SweepReport, LlmError> {
    if seqs.is_empty() {
        return Err(LlmError::InvalidInput("empty sequence range".into()));
    }
    pool.validate()?;
    let points = seqs
        .iter()
        .map(|&s| point(arch, pool, s, batch))
        .collect::<Result<_, _>>()?;
    Ok(report(arch, points))
}

pub fn batch_sweep(
    arch: &LlmArchitecture,
    pool: &PoolParams,
    seq: u64,
    batches: &[u64],
) -> Result<SweepReport, LlmError> {
    if batches.is_empty() {
        return Err(LlmError::InvalidInput("empty batch range".into()));
    }
    pool.validate()?;
    let points = batches
        .iter()
        .map(|&b| point(arch, pool, seq, b))
        .collect::<Result<_, _>>()?;
    Ok(report(arch, points))
}

/// First sequence length in `seqs` where D-Cache catches up with H-Cache.
pub fn crossover(
    arch: &LlmArchitecture,
    pool: &PoolParams,
    seqs: &[u64],
) -> Result<Option<u64>, LlmError> {
    Ok(seq_sweep(arch, pool, seqs, 1)?.crossover)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PlanCategory {
    Pipeline,
    Tensor,
    Data,
}

/// Largest pipeline degree that divides both the node count and the layers.
pub fn max_pipeline_degree(arch: &LlmArchitecture, nodes: u64) -> u64 {
    factorizations(nodes)
        .into_iter()
        .map(|(_, _, p)| p)
        .filter(|p| arch.layers.is_multiple_of(*p))
        .max()
        .unwrap_or(1)
}

/// Pipeline when the plan stretches the pipeline as far as the layer count
/// allows, tensor when tensor parallelism is the largest split, data
/// otherwise.
pub fn plan_category(arch: &LlmArchitecture, plan: &ParallelismPlan) -> PlanCategory {
    let pmax = max_pipeline_degree(arch, plan.nodes());
    if pmax > 1 && plan.pipeline == pmax {
        PlanCategory::Pipeline
    } else if plan.tensor > 1 && plan.tensor >= plan.data {
        PlanCategory::Tensor
    } else {
        PlanCategory::Data
    }
}

/// Bisects the H-Cache KV surcharge on [1, 1000] so that `arch` reaches
/// `target` D-Cache/H-Cache speedup at `seq`, batch 1.
pub fn calibrate_swap_surcharge(
    arch: &LlmArchitecture,
    pool: &PoolParams,
    seq: u64,
    target: f64,
) -> Result<f64, LlmError> {
    let speedup = |sigma: f64| -> Result<f64, LlmError> {
        let p = PoolParams {
            swap_surcharge: sigma,
            ..pool.clone()
        };
        point(arch, &p, seq, 1)?
            .cache_speedup()
            .ok_or_else(|| LlmError::NoFeasiblePlan {
                model: arch.name.clone(),
                seq,
                batch: 1,
            })
    };
    let (mut lo, mut hi) = (1.0, 1000.0);
    if speedup(lo)? > target || speedup(hi)? < target {
        return Err(LlmError::InvalidInput(format!(
            "speedup {target} not reachable at seq {seq}"
        )));
    }
    for _ in 0..60 {
        let mid = (lo + hi) / 2.0;
        if speedup(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) / 2.0)
}

/// Growth of step time per extra token of context under the cheapest
/// cached plan, per unit batch.
pub fn cached_slope(arch: &LlmArchitecture, pool: &PoolParams, kind: DeploymentKind) -> f64 {
    let cfg = pool.config(kind);
    let beta = arch.bytes_per_value as f64;
    factorizations(cfg.node_count)
        .into_iter()
        .filter(|&(_, t, p)| arch.heads.is_multiple_of(t) && arch.layers.is_multiple_of(p))
        .map(|(_, t, _)| {
            let attn = 4.0 * (arch.heads * arch.head_dim) as f64 / t as f64 / cfg.throughput();
            let kv = 2.0 * (arch.kv_heads * arch.head_dim) as f64 * beta
                / t.min(arch.kv_heads) as f64
                * cfg.kv_ns_per_byte;
            arch.layers as f64 * (attn + kv)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Long-sequence limit of the D-Cache/H-Cache speedup at batch 1.
pub fn saturation_limit(arch: &LlmArchitecture, pool: &PoolParams) -> f64 {
    cached_slope(arch, pool, DeploymentKind::HCache)
        / cached_slope(arch, pool, DeploymentKind::DCache)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateTarget {
    pub numerator: DeploymentKind,
    pub denominator: DeploymentKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateResidual {
    pub label: String,
    pub target: f64,
    pub achieved: f64,
    /// `ln(achieved / target)`.
    pub log_residual: f64,
}

/// Geometric mean over every shipped model of `numerator / denominator`
/// best times at `seq`, batch 1.
pub fn aggregate_residuals(
    pool: &PoolParams,
    seq: u64,
    targets: &[AggregateTarget],
) -> Result<Vec<AggregateResidual>, LlmError> {
    let archs = architectures();
    let mut points = Vec::with_capacity(archs.len());
    for a in &archs {
        points.push(point(a, pool, seq, 1)?);
    }
    targets
        .iter()
        .map(|t| {
            let mut log_sum = 0.0;
            for (a, p) in archs.iter().zip(&points) {
                let r = p.speedup(t.denominator, t.numerator).ok_or_else(|| {
                    LlmError::NoFeasiblePlan {
                        model: a.name.clone(),
                        seq,
                        batch: 1,
                    }
                })?;
                log_sum += r.ln();
            }
            let achieved = (log_sum / archs.len() as f64).exp();
            Ok(AggregateResidual {
                label: format!("{}/{}", t.numerator, t.denominator),
                target: t.value,
                achieved,
                log_residual: (achieved / t.value).ln(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm_pool::architecture;

    fn pow2(lo: u32, hi: u32) -> Vec<u64> {
        (lo..=hi).map(|e| 1u64 << e).collect()
    }

    #[test]
    fn empty_ranges_rejected() {
        let a = architecture("lamda").unwrap();
        assert!(seq_sweep(&a, &PoolParams::default(), &[], 1).is_err());
        assert!(batch_sweep(&a, &PoolParams::default(), 64, &[]).is_err());
    }

    #[test]
    fn saturation_approaches_limit_from_below() {
        let a = architecture("lamda").unwrap();
        let pool = PoolParams::default();
        let r = seq_sweep(&a, &pool, &pow2(12, 16), 1).unwrap();
        let limit = saturation_limit(&a, &pool);
        let s: Vec<f64> = r
            .points
            .iter()
            .map(|p| p.cache_speedup().unwrap())
            .collect();
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
        assert!(s.iter().all(|v| *v < limit));
    }

    #[test]
    fn infeasible_points_are_blank() {
        let a = architecture("megatron").unwrap();
        let r = batch_sweep(&a, &PoolParams::default(), 1024, &[1, 512]).unwrap();
        assert!(r.points[0].time(DeploymentKind::DCache).is_some());
        assert!(r.points[1].time(DeploymentKind::DCache).is_none());
        assert!(r.csv().lines().nth(2).unwrap().contains(",,"));
    }

    #[test]
    fn plan_categories() {
        let lamda = architecture("lamda").unwrap();
        let turing = architecture("turing").unwrap();
        assert_eq!(max_pipeline_degree(&lamda, 16), 16);
        assert_eq!(max_pipeline_degree(&turing, 16), 1);
        let plan = |data, tensor, pipeline| ParallelismPlan {
            data,
            tensor,
            pipeline,
            batch: 1,
            seq: 1,
        };
        assert_eq!(
            plan_category(&lamda, &plan(1, 1, 16)),
            PlanCategory::Pipeline
        );
        assert_eq!(plan_category(&lamda, &plan(1, 16, 1)), PlanCategory::Tensor);
        assert_eq!(plan_category(&lamda, &plan(16, 1, 1)), PlanCategory::Data);
    }
}
