use dockerssd::defaults::defaults;
use dockerssd::llm_pool::{
    architecture, architectures, calibrate_swap_surcharge, flops_per_token, inference_time,
    kv_cache_bytes, saturation_limit, search_plan, seq_sweep, DeploymentKind, LlmArchitecture,
    ParallelismPlan, PoolParams,
};
use proptest::prelude::*;

fn pool() -> PoolParams {
    PoolParams::default()
}

/// Counts multiply-adds one layer, head and key at a time.
fn brute_force_flops(a: &LlmArchitecture, seq: u64, cached: bool) -> (u64, u64) {
    let mut attention = 0;
    let mut dense = 0;
    for _layer in 0..a.layers {
        let queries = if cached { 1 } else { seq };
        for _head in 0..a.heads {
            for _q in 0..queries {
                for _k in 0..seq {
                    // q.k score plus weighted sum of v, each d multiply-adds
                    attention += 2 * 2 * a.head_dim;
                }
            }
        }
        let (h, f) = (a.hidden_dim, a.ffn_dim);
        let matrices = [
            (h, a.heads * a.head_dim),
            (h, a.kv_heads * a.head_dim),
            (h, a.kv_heads * a.head_dim),
            (a.heads * a.head_dim, h),
        ];
        for (rows, cols) in matrices {
            dense += 2 * rows * cols;
        }
        for _ in 0..a.ffn_matrices {
            dense += 2 * h * f;
        }
    }
    (attention, dense)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[test]
fn flops_match_brute_force() {
    let a = architecture("gpt3").unwrap();
    for seq in [1, 2, 7, 32] {
        for cached in [true, false] {
            let got = flops_per_token(&a, seq, cached).unwrap();
            assert_eq!(
                (got.attention, got.dense),
                brute_force_flops(&a, seq, cached),
                "seq {seq} cached {cached}"
            );
        }
    }
}

#[test]
fn attention_scaling_laws() {
    let seqs: Vec<u64> = (6..=14).map(|e| 1u64 << e).collect();
    let xs: Vec<f64> = seqs.iter().map(|s| (*s as f64).ln()).collect();
    for a in architectures() {
        for (cached, want) in [(true, 1.0), (false, 2.0)] {
            let ys: Vec<f64> = seqs
                .iter()
                .map(|s| (flops_per_token(&a, *s, cached).unwrap().attention as f64).ln())
                .collect();
            let k = slope(&xs, &ys);
            assert!(
                (k - want).abs() <= 0.1,
                "{} cached={cached} slope {k}",
                a.name
            );
        }
    }
}

#[test]
fn search_matches_reenumeration() {
    for a in architectures() {
        for kind in DeploymentKind::ALL {
            let cfg = pool().config(kind);
            for (seq, batch) in [(64, 1), (4096, 4), (32768, 1)] {
                let (plan, time) = search_plan(&a, &cfg, seq, batch).unwrap();
                let mut best = f64::INFINITY;
                for tensor in 1..=16 {
                    for pipeline in 1..=16 {
                        if 16 % (tensor * pipeline) != 0 {
                            continue;
                        }
                        let p = ParallelismPlan {
                            data: 16 / (tensor * pipeline),
                            tensor,
                            pipeline,
                            batch,
                            seq,
                        };
                        if let Ok(t) = inference_time(&a, &cfg, &p) {
                            best = best.min(t.total());
                        }
                    }
                }
                assert_eq!(time.total(), best, "{} {kind} {seq}", a.name);
                assert_eq!(inference_time(&a, &cfg, &plan).unwrap(), time);
            }
        }
    }
}

#[test]
fn shipped_surcharge_meets_anchor() {
    let anchor = &defaults().llm.anchor;
    let a = architecture(&anchor.model).unwrap();
    let sigma = calibrate_swap_surcharge(&a, &pool(), anchor.seq, anchor.speedup).unwrap();
    assert!(
        (sigma / pool().swap_surcharge - 1.0).abs() < 1e-9,
        "{sigma}"
    );
    let r = seq_sweep(&a, &pool(), &[anchor.seq], 1).unwrap();
    assert!((r.saturation.unwrap() - anchor.speedup).abs() < 1e-6);
}

#[test]
fn speedup_is_eventually_monotone_and_bounded() {
    let seqs: Vec<u64> = (10..=16).map(|e| 1u64 << e).collect();
    for a in architectures() {
        let limit = saturation_limit(&a, &pool());
        let r = seq_sweep(&a, &pool(), &seqs, 1).unwrap();
        let s: Vec<f64> = r.points.iter().filter_map(|p| p.cache_speedup()).collect();
        assert!(s.windows(2).all(|w| w[1] >= w[0]), "{} {s:?}", a.name);
        assert!(
            s.iter().all(|v| *v <= limit),
            "{} {s:?} limit {limit}",
            a.name
        );
    }
}

#[test]
fn limit_matches_numeric_extrapolation() {
    let a = architecture("lamda").unwrap();
    let mut p = pool();
    p.storage_bytes = u64::MAX / 4;
    p.host_dram_bytes = 0;
    let far = seq_sweep(&a, &p, &[1 << 30], 1)
        .unwrap()
        .saturation
        .unwrap();
    let limit = saturation_limit(&a, &pool());
    assert!((far / limit - 1.0).abs() < 1e-3, "{far} vs {limit}");
}

fn arch() -> impl Strategy<Value = LlmArchitecture> {
    (0usize..8).prop_map(|i| architectures()[i].clone())
}

proptest! {
    #[test]
    fn kv_is_linear(a in arch(), seq in 1u64..100_000, batch in 1u64..512, k in 1u64..8) {
        let base = kv_cache_bytes(&a, seq, batch).unwrap();
        prop_assert_eq!(kv_cache_bytes(&a, seq * k, batch).unwrap(), base * k);
        prop_assert_eq!(kv_cache_bytes(&a, seq, batch * k).unwrap(), base * k);
    }

    #[test]
    fn cache_never_hurts(a in arch(), e in 1u32..17, batch in 1u64..16, host in any::<bool>()) {
        let seq = 1u64 << e;
        let (cached, uncached) = if host {
            (DeploymentKind::HCache, DeploymentKind::HNoCache)
        } else {
            (DeploymentKind::DCache, DeploymentKind::DNoCache)
        };
        if let Ok((_, c)) = search_plan(&a, &pool().config(cached), seq, batch) {
            let (_, u) = search_plan(&a, &pool().config(uncached), seq, batch).unwrap();
            prop_assert!(c.total() <= u.total());
        }
    }

    #[test]
    fn total_is_sum(a in arch(), seq in 1u64..70_000, batch in 1u64..64, kind in 0usize..4) {
        let cfg = pool().config(DeploymentKind::ALL[kind]);
        if let Ok((_, t)) = search_plan(&a, &cfg, seq, batch) {
            prop_assert_eq!(t.total(), t.compute_time + t.memory_time);
            prop_assert!(t.compute_time > 0.0 && t.memory_time > 0.0);
        }
    }
}
