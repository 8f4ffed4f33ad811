use convbench::bench::{read_sink, windows_disjoint, BenchConfig, CaseOutcome, CaseStatus, Harness};
use convbench::energy::MeterSpec;
use convbench::{parse_descriptor, KernelId};

fn config(meter: MeterSpec) -> BenchConfig {
    BenchConfig {
        warmup_iters: 1,
        measure_iters: 4,
        threads: vec![1, 2],
        kernels: KernelId::ALL.to_vec(),
        meter,
        ..BenchConfig::default()
    }
}

#[test]
fn energy_per_op_is_power_times_latency() {
    let p = parse_descriptor("IC4IH8OC4OH8KH3PH1").unwrap();
    let mut h = Harness::new(config(MeterSpec::Mock { watts: 25.0 })).unwrap();
    for k in KernelId::ALL {
        let r = h.run_case(&p, k, 2).unwrap();
        assert_eq!(r.max_rel_diff, 0.0, "{k}");
        let expected = 25.0 * r.latency_mean_s;
        assert!((r.energy_per_op_j.unwrap() - expected).abs() <= 1e-9 * expected.max(1e-12), "{k}");
        assert!(r.latency_min_s <= r.latency_median_s && r.latency_median_s <= r.latency_p95_s);
        assert!(!r.latency_only);
    }
}

#[test]
fn without_a_meter_results_are_latency_only() {
    let p = parse_descriptor("IC2IH5OC2KH3").unwrap();
    let mut h = Harness::new(config(MeterSpec::None)).unwrap();
    let r = h.run_case(&p, KernelId::Direct, 1).unwrap();
    assert!(r.latency_only);
    assert!(r.energy_per_op_j.is_none());
}

#[test]
fn sweep_records_failures_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("sweep.jsonl");
    let problems = [
        parse_descriptor("IC3IH6OC2OH6KH3PH1").unwrap(),
        parse_descriptor("IC3IH6OC2KH1").unwrap(),
    ];
    let mut h = Harness::new(config(MeterSpec::Mock { watts: 8.0 })).unwrap();
    let outcomes = h.sweep(&problems, Some(&sink), |_| {}).unwrap();
    assert_eq!(outcomes.len(), 2 * 5 * 2);
    let unsupported = outcomes
        .iter()
        .filter(|o| matches!(o, CaseOutcome::Failed { status: CaseStatus::Unsupported, .. }))
        .count();
    assert_eq!(unsupported, 2, "winograd on 1x1 at two thread counts");

    let recorded = read_sink(&sink).unwrap();
    assert_eq!(recorded.len(), 18);
    assert!(windows_disjoint(&recorded));

    let again = h.sweep(&problems, Some(&sink), |_| {}).unwrap();
    assert_eq!(again.iter().filter(|o| matches!(o, CaseOutcome::Resumed(_))).count(), 18);
    assert_eq!(read_sink(&sink).unwrap().len(), 18);
}

#[test]
fn unreadable_meter_fails_unless_allowed() {
    let spec = MeterSpec::Counter {
        dir: Some("/nonexistent/powercap".into()),
    };
    assert!(Harness::new(config(spec.clone())).is_err());
    let mut cfg = config(spec);
    cfg.allow_latency_only = true;
    let h = Harness::new(cfg).unwrap();
    assert!(h.meter_error().is_some());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = config(MeterSpec::None);
    cfg.measure_iters = 0;
    assert!(Harness::new(cfg).is_err());
    let mut cfg = config(MeterSpec::None);
    cfg.threads = vec![0];
    assert!(Harness::new(cfg).is_err());
}
