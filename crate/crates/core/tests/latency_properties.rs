use dockerssd::defaults::defaults;
use dockerssd::latency::replay::{replay, synthetic_workload};
use dockerssd::latency::{
    calibrate, evaluate, table_workloads, CalibrationSpec, Component, CostParam, CostTable,
    ModelKind, Statistic, WorkloadDescriptor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn costs() -> CostTable {
    defaults().latency.costs.clone()
}

/// Straight-line re-derivation of every component, written per model
/// without sharing code with the library.
fn oracle(w: &WorkloadDescriptor, m: ModelKind, t: &CostTable) -> [f64; 6] {
    let g = |p| t.get(p).unwrap();
    let (k, s, f, n, b, p, e) = (
        w.tcp_packets as f64,
        w.syscall_count as f64,
        w.files_opened as f64,
        w.io_count as f64,
        w.io_bytes as f64,
        w.path_walk_count as f64,
        w.reference_exec_ns as f64,
    );
    use CostParam::*;
    let net = k * g(NetPerPacket);
    let clk = g(ClockRatio);
    let io = n * g(IoPerRequest);
    match m {
        ModelKind::Host => [
            net,
            0.0,
            0.0,
            io + b * g(FlashPerByte) + b * g(PciePerByte),
            s * g(HostSyscall) + p * g(WalkPerPath),
            e * g(ComputePerRefNs),
        ],
        ModelKind::PIspR => [
            net + s * g(RpcPerSyscall),
            s * g(CtxPerSyscall),
            f * g(HandshakePerFile),
            io + b * g(FlashPerByte),
            s * g(BareSyscall) + p * g(WalkPerPath),
            e * g(ComputePerRefNs) * clk,
        ],
        ModelKind::PIspV => [
            net,
            s * g(CtxPerSyscall),
            f * g(HandshakePerFile),
            io + b * g(FlashPerByte),
            s * g(BareSyscall) + p * g(WalkPerPath),
            e * g(ComputePerRefNs) * clk,
        ],
        ModelKind::DNaive => [
            net,
            0.0,
            0.0,
            io + b * g(FlashPerByte) + b * g(CopyPerByte),
            s * g(HostSyscall) * g(OsStackSurcharge) + p * g(WalkPerPath) * clk,
            e * g(ComputePerRefNs) * clk,
        ],
        ModelKind::DFullOs => [
            net,
            0.0,
            0.0,
            io + b * g(FlashPerByte),
            s * g(HostSyscall) * g(OsStackSurcharge) + p * g(WalkPerPath) * clk,
            e * g(ComputePerRefNs) * clk,
        ],
        ModelKind::DVirtFw => [
            net,
            0.0,
            0.0,
            io + b * g(FlashPerByte),
            s * g(EmulatedSyscall) + p * g(WalkPerPath) * clk,
            e * g(ComputePerRefNs) * clk,
        ],
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn table_workloads_match_oracle() {
    for w in table_workloads() {
        for m in ModelKind::ALL {
            let got = evaluate(&w, &m.into(), &costs()).unwrap();
            let want = oracle(&w, m, &costs());
            for c in Component::ALL {
                assert!(close(got.get(c), want[c as usize]), "{} {m} {c}", w.name);
            }
        }
    }
}

#[test]
fn fit_from_prior_reaches_every_target() {
    let spec = CalibrationSpec::default();
    let r = calibrate(&table_workloads(), &spec).unwrap();
    assert!(r.underdetermined);
    assert!(r.flagged().is_empty(), "{:#?}", r.residuals);
    assert_eq!(
        r.table.get(CostParam::ClockRatio),
        spec.prior.get(CostParam::ClockRatio)
    );
}

#[test]
fn tenfold_perturbation_is_flagged() {
    let mut spec = CalibrationSpec {
        prior: costs().with(
            CostParam::IoPerRequest,
            costs().get(CostParam::IoPerRequest).unwrap() * 10.0,
        ),
        ..CalibrationSpec::default()
    };
    spec.free.clear();
    let r = calibrate(&table_workloads(), &spec).unwrap();
    let flagged: Vec<Statistic> = r.flagged().iter().map(|r| r.statistic).collect();
    assert!(
        flagged.contains(&Statistic::HostStorageFraction),
        "{flagged:?}"
    );
}

#[test]
fn virtfw_is_fastest_device_model() {
    for w in table_workloads() {
        let t = |m: ModelKind| evaluate(&w, &m.into(), &costs()).unwrap().total();
        assert!(t(ModelKind::DVirtFw) <= t(ModelKind::DFullOs));
        assert!(t(ModelKind::DVirtFw) <= t(ModelKind::DNaive));
    }
}

fn workload() -> impl Strategy<Value = WorkloadDescriptor> {
    (
        0u64..1 << 20,
        0u64..1 << 20,
        0u64..1 << 20,
        0u64..1 << 20,
        0u64..1 << 20,
        0u64..1 << 40,
        0u64..4096,
    )
        .prop_map(|(n, s, p, f, k, e, extra)| WorkloadDescriptor {
            name: "w".into(),
            io_bytes: n * 512 + extra,
            io_count: n,
            syscall_count: s,
            path_walk_count: p,
            files_opened: f,
            tcp_packets: k,
            reference_exec_ns: e,
        })
}

proptest! {
    #[test]
    fn total_is_component_sum(w in workload(), m in 0usize..6) {
        let b = evaluate(&w, &ModelKind::ALL[m].into(), &costs()).unwrap();
        let sum: f64 = Component::ALL.iter().map(|c| b.get(*c)).sum();
        prop_assert_eq!(b.total(), sum);
    }

    #[test]
    fn structural_zeros_hold(w in workload()) {
        let v = evaluate(&w, &ModelKind::DVirtFw.into(), &costs()).unwrap();
        prop_assert_eq!(v.get(Component::LbaSet), 0.0);
        prop_assert_eq!(v.get(Component::KernelCtx), 0.0);
        let h = evaluate(&w, &ModelKind::Host.into(), &costs()).unwrap();
        prop_assert_eq!(h.get(Component::LbaSet), 0.0);
    }

    #[test]
    fn counts_are_monotone(w in workload(), field in 0usize..7, bump in 1u64..100_000, m in 0usize..6) {
        let mut w2 = w.clone();
        match field {
            0 => w2.io_bytes += bump,
            1 => { w2.io_count += bump; w2.io_bytes += bump * 512 }
            2 => w2.syscall_count += bump,
            3 => w2.path_walk_count += bump,
            4 => w2.files_opened += bump,
            5 => w2.tcp_packets += bump,
            _ => w2.reference_exec_ns += bump,
        }
        let model = ModelKind::ALL[m].into();
        let a = evaluate(&w, &model, &costs()).unwrap();
        let b = evaluate(&w2, &model, &costs()).unwrap();
        for c in Component::ALL {
            prop_assert!(b.get(c) >= a.get(c));
        }
    }

    #[test]
    fn matches_oracle(w in workload(), m in 0usize..6) {
        let model = ModelKind::ALL[m];
        let got = evaluate(&w, &model.into(), &costs()).unwrap();
        let want = oracle(&w, model, &costs());
        for c in Component::ALL {
            prop_assert!(close(got.get(c), want[c as usize]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]


    #[test]
    fn replay_agrees_with_analytical(seed in any::<u64>(), m in 0usize..6) {
        let w = synthetic_workload(&mut ChaCha8Rng::seed_from_u64(seed), "synthetic", 1000);
        prop_assert!(w.event_count() <= 1000);
        let r = replay(&w, ModelKind::ALL[m], &costs(), &costs()).unwrap();
        prop_assert!(r.passes(0.10), "{:?}", r.deltas);
    }
}
