//! Acceptance checks. Runs without the libtest harness so each criterion
//! prints exactly one `PASS`, `FAIL` or `SKIP` line, in order; the process
//! fails if any criterion fails.

use std::time::{Duration, Instant};

use convbench::bench::{measure, windows_disjoint, BenchConfig, Harness};
use convbench::energy::{
    counter_samples, integrate, parse_power_trace, wrapping_delta, CounterReading, MockMeter, PowerSample,
    PowerTrace, TraceSource,
};
use convbench::lowering::{conv_gemm_implicit, conv_im2row, im2row, ImplicitTileConfig};
use convbench::problem::{output_extent, DescriptorError};
use convbench::report::{pareto_frontier, ParetoPoint};
use convbench::winograd::mult_count;
use convbench::{
    conv_naive, featured_layer, format_descriptor, max_rel_diff, parse_descriptor, resnet50_conv_suite, run_kernel,
    ConvInputs, ConvProblem, KernelId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Oracle-equivalence bounds.
const DIRECT_LOWERING_TOL: f64 = 1e-5;
const WINO_TOL: f64 = 1e-4;
/// Mock-meter energy accounting bound.
const ENERGY_REL_TOL: f64 = 0.02;
const RAMP_TOL_J: f64 = 1e-9;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Valid random problem, sized so the naive oracle stays cheap.
fn random_problem(rng: &mut ChaCha8Rng) -> ConvProblem {
    loop {
        let wino_like = rng.random_bool(0.4);
        let (kh, kw, sh, sw) = if wino_like {
            (3, 3, 1, 1)
        } else {
            let k = [1, 2, 3, 5, 7];
            (
                k[rng.random_range(0..5)],
                k[rng.random_range(0..5)],
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            )
        };
        let ih = rng.random_range(1..=24);
        let iw = rng.random_range(1..=24);
        let ph = rng.random_range(0..kh);
        let pw = rng.random_range(0..kw);
        let (Some(oh), Some(ow)) = (output_extent(ih, kh, sh, ph), output_extent(iw, kw, sw, pw)) else {
            continue;
        };
        return ConvProblem {
            mb: rng.random_range(1..=2),
            ic: rng.random_range(1..=20),
            ih,
            iw,
            oc: rng.random_range(1..=20),
            oh,
            ow,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            name: None,
        };
    }
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut problems = resnet50_conv_suite();
    let suite_len = problems.len();
    problems.extend((0..50).map(|_| random_problem(&mut rng)));
    let (mut worst, mut worst_wino, mut wino_cases) = (0.0f64, 0.0f64, 0);
    for (i, p) in problems.iter().enumerate() {
        let inputs = ConvInputs::random(p, 1000 + i as u64).map_err(|e| e.to_string())?;
        let want = conv_naive(p, &inputs).map_err(|e| e.to_string())?;
        for k in KernelId::OPTIMIZED {
            if k == KernelId::Wino && k.supports(p).is_err() {
                continue;
            }
            let got = run_kernel(k, p, &inputs, 2).map_err(|e| format!("{k} on {p}: {e}"))?;
            let d = max_rel_diff(&want, &got).map_err(|e| e.to_string())?;
            let tol = if k == KernelId::Wino { WINO_TOL } else { DIRECT_LOWERING_TOL };
            ensure(d <= tol, || format!("{k} on {p}: max_rel_diff {d:e} > {tol:e}"))?;
            if k == KernelId::Wino {
                worst_wino = worst_wino.max(d);
                wino_cases += 1;
            } else {
                worst = worst.max(d);
            }
        }
    }
    // Informational: FP32 rounding with continuous inputs (not gated here).
    let p = featured_layer();
    let inputs = ConvInputs::random_uniform(&p, 3).map_err(|e| e.to_string())?;
    let want = conv_naive(&p, &inputs).map_err(|e| e.to_string())?;
    let uniform: Vec<String> = KernelId::OPTIMIZED
        .iter()
        .map(|&k| {
            let got = run_kernel(k, &p, &inputs, 2).map_err(|e| e.to_string())?;
            Ok(format!("{k} {:.1e}", max_rel_diff(&want, &got).map_err(|e| e.to_string())?))
        })
        .collect::<Result<_, String>>()?;
    Ok(format!(
        "{suite_len} suite layers + 50 random problems; direct/im2row/gemm worst {worst:e}, wino worst {worst_wino:e} over {wino_cases} problems; uniform-data featured layer: {}",
        uniform.join(", ")
    ))
}

fn winograd_arithmetic() -> Check {
    let p = parse_descriptor("MB1_IC64IH56_OC64OH56_KH3PH1").map_err(|e| e.to_string())?;
    let direct = mult_count(&p, KernelId::Direct).map_err(|e| e.to_string())?;
    let wino = mult_count(&p, KernelId::Wino).map_err(|e| e.to_string())?;
    ensure(direct == 115_605_504, || format!("direct mults {direct}"))?;
    ensure(wino == 51_380_224, || format!("wino mults {wino}"))?;
    // 2.25 exactly: 4 · direct == 9 · wino
    ensure(4 * direct == 9 * wino, || format!("ratio {direct}/{wino} is not 9/4"))?;
    Ok(format!("{direct} / {wino} = 9/4 = 2.25"))
}

fn lowering_geometry() -> Check {
    let p = featured_layer();
    let inputs = ConvInputs::random(&p, 11).map_err(|e| e.to_string())?;
    let m = im2row(&p, &inputs.src).map_err(|e| e.to_string())?;
    ensure((m.rows, m.cols) == (3136, 576), || format!("lowered matrix {}x{}", m.rows, m.cols))?;
    let explicit = conv_im2row(&p, &inputs, 2).map_err(|e| e.to_string())?;
    let cfg = ImplicitTileConfig {
        tile_rows: m.rows,
        threads: 2,
    };
    let implicit = conv_gemm_implicit(&p, &inputs, &cfg).map_err(|e| e.to_string())?;
    let same = explicit
        .data()
        .iter()
        .zip(implicit.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same && explicit.dims() == implicit.dims(), || "implicit (one tile) differs from im2row".into())?;
    // uniform data too, where rounding is not exact
    let inputs = ConvInputs::random_uniform(&p, 12).map_err(|e| e.to_string())?;
    let a = conv_im2row(&p, &inputs, 1).map_err(|e| e.to_string())?;
    let b = conv_gemm_implicit(&p, &inputs, &cfg).map_err(|e| e.to_string())?;
    ensure(a == b, || "implicit differs from im2row on uniform data".into())?;
    Ok("3136 x 576; single-tile implicit GEMM bitwise equal to im2row".into())
}

fn descriptor_grammar() -> Check {
    let p = parse_descriptor("MB1_IC64IH56_OC64OH56_KH3PH1").map_err(|e| e.to_string())?;
    let fields = [
        ("MB", p.mb, 1),
        ("IC", p.ic, 64),
        ("IH", p.ih, 56),
        ("IW", p.iw, 56),
        ("OC", p.oc, 64),
        ("OH", p.oh, 56),
        ("OW", p.ow, 56),
        ("KH", p.kh, 3),
        ("KW", p.kw, 3),
        ("SH", p.sh, 1),
        ("SW", p.sw, 1),
        ("PH", p.ph, 1),
        ("PW", p.pw, 1),
    ];
    for (key, got, want) in fields {
        ensure(got == want, || format!("{key}={got}, expected {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let mut q = random_problem(&mut rng);
        q.ic = rng.random_range(1..=2048);
        q.oc = rng.random_range(1..=2048);
        q.mb = rng.random_range(1..=64);
        let text = format_descriptor(&q);
        let back = parse_descriptor(&text).map_err(|e| format!("{text}: {e}"))?;
        ensure(back == q, || format!("round trip changed {text}"))?;
    }
    let unknown = parse_descriptor("BADKEY1_IC3IH5_OC3_KH1").unwrap_err();
    ensure(
        matches!(&unknown, DescriptorError::UnknownKey(k) if k == "BADKEY") && unknown.to_string().contains("'BADKEY'"),
        || format!("unknown key diagnostic: {unknown}"),
    )?;
    let dup = parse_descriptor("IC3IC4IH5_OC3_KH1").unwrap_err();
    ensure(
        matches!(&dup, DescriptorError::DuplicateKey(k) if k == "IC") && dup.to_string().contains("IC"),
        || format!("duplicate key diagnostic: {dup}"),
    )?;
    let shape = parse_descriptor("MB1_IC64IH56_OC64OH55_KH3PH1").unwrap_err();
    ensure(
        matches!(shape, DescriptorError::ShapeViolation { key: "OH", given: 55, expected: 56 })
            && shape.to_string().contains("OH"),
        || format!("shape violation diagnostic: {shape}"),
    )?;
    Ok(format!(
        "13 fields; 100 round trips; rejected: \"{unknown}\", \"{dup}\", \"{shape}\""
    ))
}

fn energy_integration() -> Check {
    let constant = PowerTrace::new(MockMeter::constant(10.0).synthesize(0.0, 2.0), TraceSource::Mock)
        .map_err(|e| e.to_string())?;
    let e = integrate(&constant, 0.0, 2.0).map_err(|e| e.to_string())?.energy_j;
    ensure(e == 20.0, || format!("constant 10 W over 2 s gave {e} J"))?;

    let ramp: Vec<PowerSample> = (0..=1000)
        .map(|i| PowerSample {
            t: i as f64 / 1000.0,
            p: i as f64 / 100.0,
        })
        .collect();
    let ramp = PowerTrace::new(ramp, TraceSource::Mock).map_err(|e| e.to_string())?;
    let e_ramp = integrate(&ramp, 0.0, 1.0).map_err(|e| e.to_string())?.energy_j;
    ensure((e_ramp - 5.0).abs() <= RAMP_TOL_J, || format!("ramp gave {e_ramp} J"))?;

    let max = 262_143_328_850u64;
    ensure(wrapping_delta(max - 100, 900, max) == 1000, || "wrap delta != 1000 uJ".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (prev, curr) = (rng.random_range(0..max), rng.random_range(0..max));
        let oracle = (i128::from(curr) - i128::from(prev)).rem_euclid(i128::from(max)) as u64;
        ensure(wrapping_delta(prev, curr, max) == oracle, || format!("wrap {prev}->{curr}"))?;
    }
    let reads = [
        CounterReading { t: 0.0, energy_uj: max - 100 },
        CounterReading { t: 0.001, energy_uj: 900 },
    ];
    let s = counter_samples(&reads, max).map_err(|e| e.to_string())?;
    ensure((s[1].p - 1.0).abs() < 1e-9, || format!("wrapped sample power {} W", s[1].p))?;

    let trace_text = |n: usize, span: f64| {
        let mut t = String::from("timestamp_s,watts\n");
        for i in 0..n {
            t.push_str(&format!("{},{}\n", i as f64 * span / (n - 1) as f64, 20.0));
        }
        t
    };
    let mut rates = Vec::new();
    for (n, span, flagged) in [(5001, 1.0, false), (1001, 1.0, false), (2, 1.0, true), (501, 1.0, true), (10_001, 1.0, true)] {
        let t = parse_power_trace(&trace_text(n, span)).map_err(|e| e.to_string())?;
        ensure(t.rate_warning.is_some() == flagged, || format!("{} Hz flagged={}", t.rate_hz, !flagged))?;
        rates.push(format!("{:.0} Hz{}", t.rate_hz, if flagged { " (flagged)" } else { "" }));
    }
    Ok(format!(
        "20 J exact; ramp {e_ramp} J; wrap delta 1000 uJ; rates {}",
        rates.join(", ")
    ))
}

fn harness_energy_accounting() -> Check {
    let watts = 10.0;
    let mut detail = Vec::new();
    let sleep_1ms = || {
        std::thread::sleep(Duration::from_millis(1));
        Ok(())
    };
    let spin_50us = || {
        let t = Instant::now();
        while t.elapsed() < Duration::from_micros(50) {
            std::hint::spin_loop();
        }
        Ok(())
    };
    for iters in [1, 10, 1000] {
        for (name, stub) in [("sleep 1 ms", &sleep_1ms as &dyn Fn() -> _), ("spin 50 us", &spin_50us)] {
            let mut meter = MockMeter::constant(watts);
            let m = measure(stub, 2, iters, Some(&mut meter)).map_err(|e| e.to_string())?;
            let per_op = m.energy.as_ref().ok_or("no energy")?.energy_j / iters as f64;
            let expect = watts * m.latency().mean_s;
            let rel = (per_op / expect - 1.0).abs();
            ensure(rel <= ENERGY_REL_TOL, || format!("{name} x{iters}: {per_op} J vs {expect} J"))?;
            detail.push(rel);
        }
    }

    let cfg = BenchConfig {
        warmup_iters: 2,
        measure_iters: 20,
        threads: vec![1, 2],
        kernels: KernelId::ALL.to_vec(),
        meter: "mock:7.5".parse().map_err(|e: convbench::energy::EnergyError| e.to_string())?,
        seed: 9,
        ..BenchConfig::default()
    };
    let mut h = Harness::new(cfg).map_err(|e| e.to_string())?;
    let problems = [
        parse_descriptor("IC16IH14_OC16_KH3PH1").unwrap(),
        parse_descriptor("MB2_IC8IH9_OC12_KH1SH2").unwrap(),
        parse_descriptor("IC3IH20_OC8_KH7SH2PH3").unwrap(),
    ];
    let results: Vec<_> = h
        .sweep(&problems, None, |_| {})
        .map_err(|e| e.to_string())?
        .iter()
        .filter_map(|o| o.result().cloned())
        .collect();
    ensure(results.len() == 3 * 5 * 2 - 2 * 2, || format!("{} sweep rows", results.len()))?;
    ensure(windows_disjoint(&results), || "measured windows overlap".into())?;
    for r in &results {
        let e = r.energy_per_op_j.ok_or("sweep row without energy")?;
        let rel = (e / (7.5 * r.latency_mean_s) - 1.0).abs();
        ensure(rel <= ENERGY_REL_TOL, || format!("{}: energy/op off by {rel}", r.label()))?;
    }
    let worst = detail.iter().cloned().fold(0.0, f64::max);
    Ok(format!(
        "iters 1/10/1000 worst deviation {worst:.2e}; {} sweep windows disjoint",
        results.len()
    ))
}

fn brute_force_frontier(points: &[ParetoPoint]) -> Vec<(f64, f64)> {
    let dominated = |p: &ParetoPoint| {
        points.iter().any(|q| {
            q.latency_s <= p.latency_s && q.power_w <= p.power_w && (q.latency_s < p.latency_s || q.power_w < p.power_w)
        })
    };
    let mut v: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| !dominated(p))
        .map(|p| (p.latency_s, p.power_w))
        .collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    v.dedup();
    v
}

fn pareto() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for set in 0..200 {
        let n = rng.random_range(1..=80);
        let coarse = set % 3 == 0;
        let points: Vec<ParetoPoint> = (0..n)
            .map(|i| {
                let (l, w) = if coarse {
                    (rng.random_range(1..10) as f64 * 1e-3, rng.random_range(1..10) as f64)
                } else {
                    (rng.random_range(1e-4..1e-1), rng.random_range(1.0..150.0))
                };
                ParetoPoint::new(format!("cfg{i}"), l, w)
            })
            .collect();
        let f = pareto_frontier(&points).map_err(|e| e.to_string())?;
        let got: Vec<(f64, f64)> = f.iter().map(|p| (p.latency_s, p.power_w)).collect();
        ensure(got == brute_force_frontier(&points), || format!("set {set} differs from brute force"))?;
    }
    let example = [
        ParetoPoint::new("a", 10e-3, 5.0),
        ParetoPoint::new("b", 8e-3, 7.0),
        ParetoPoint::new("c", 12e-3, 6.0),
    ];
    let f = pareto_frontier(&example).map_err(|e| e.to_string())?;
    let got: Vec<(f64, f64)> = f.iter().map(|p| (p.latency_s * 1e3, p.power_w)).collect();
    ensure(got == [(8.0, 7.0), (10.0, 5.0)], || format!("worked example gave {got:?}"))?;
    Ok("200 random sets match brute force; example -> {(8 ms, 7 W), (10 ms, 5 W)}".into())
}

fn determinism() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut problems = vec![
        featured_layer(),
        parse_descriptor("MB2_IC3IH30_OC16_KH7SH2PH3").unwrap(),
        parse_descriptor("MB2_IC20IH9IW13_OC24_KH3PH1").unwrap(),
    ];
    problems.extend((0..6).map(|_| random_problem(&mut rng)));
    let mut runs = 0;
    for (i, p) in problems.iter().enumerate() {
        let inputs = ConvInputs::random_uniform(p, 40 + i as u64).map_err(|e| e.to_string())?;
        for k in KernelId::ALL {
            if k.supports(p).is_err() {
                continue;
            }
            let first = run_kernel(k, p, &inputs, 1).map_err(|e| e.to_string())?;
            for threads in [1, 2, 8, 2] {
                let again = ConvInputs::random_uniform(p, 40 + i as u64).map_err(|e| e.to_string())?;
                let got = run_kernel(k, p, &again, threads).map_err(|e| e.to_string())?;
                let same = got.data().iter().zip(first.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || format!("{k} on {p}: {threads} threads differ from 1 thread"))?;
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs over threads {{1,2,8}} bitwise identical, all 5 kernels"))
}

/// Physical cores from /proc/cpuinfo (distinct package/core pairs), falling
/// back to the logical count.
fn physical_cores() -> usize {
    let logical = std::thread::available_parallelism().map_or(1, |n| n.get());
    let Ok(info) = std::fs::read_to_string("/proc/cpuinfo") else {
        return logical;
    };
    let mut cores = std::collections::HashSet::new();
    let mut package = String::new();
    for line in info.lines() {
        if let Some((k, v)) = line.split_once(':') {
            match k.trim() {
                "physical id" => package = v.trim().to_string(),
                "core id" => {
                    cores.insert((package.clone(), v.trim().to_string()));
                }
                _ => {}
            }
        }
    }
    if cores.is_empty() {
        logical
    } else {
        cores.len().min(logical)
    }
}

fn scaling() -> Outcome {
    let cores = physical_cores();
    if cores < 4 {
        return Outcome::Skip(format!("host exposes {cores} physical core(s); needs at least 4"));
    }
    let cfg = BenchConfig {
        warmup_iters: 5,
        measure_iters: 30,
        kernels: vec![KernelId::Direct],
        threads: vec![1, 4],
        ..BenchConfig::default()
    };
    let p = featured_layer();
    let run = || -> Result<(f64, f64), String> {
        let mut h = Harness::new(cfg.clone()).map_err(|e| e.to_string())?;
        let one = h.run_case(&p, KernelId::Direct, 1).map_err(|e| e.to_string())?;
        let four = h.run_case(&p, KernelId::Direct, 4).map_err(|e| e.to_string())?;
        Ok((one.latency_mean_s, four.latency_mean_s))
    };
    match run() {
        Ok((one, four)) if four < one => Outcome::Pass(format!(
            "direct mean latency {:.3} ms at 1 thread -> {:.3} ms at 4",
            one * 1e3,
            four * 1e3
        )),
        Ok((one, four)) => Outcome::Fail(format!(
            "direct mean latency did not drop: {:.3} ms -> {:.3} ms",
            one * 1e3,
            four * 1e3
        )),
        Err(e) => Outcome::Fail(e),
    }
}

fn main() {
    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("oracle equivalence", Box::new(|| wrap(oracle_equivalence()))),
        ("winograd multiplication count", Box::new(|| wrap(winograd_arithmetic()))),
        ("lowering geometry", Box::new(|| wrap(lowering_geometry()))),
        ("descriptor grammar", Box::new(|| wrap(descriptor_grammar()))),
        ("energy integration", Box::new(|| wrap(energy_integration()))),
        ("harness energy accounting", Box::new(|| wrap(harness_energy_accounting()))),
        ("pareto frontier", Box::new(|| wrap(pareto()))),
        ("determinism", Box::new(|| wrap(determinism()))),
        ("thread scaling", Box::new(scaling)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Outcome::Fail("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {name}: {status} ({secs:.1} s) {detail}", i + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn wrap(r: Check) -> Outcome {
    match r {
        Ok(d) => Outcome::Pass(d),
        Err(d) => Outcome::Fail(d),
    }
}
