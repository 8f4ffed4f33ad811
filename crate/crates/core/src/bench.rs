//! Measurement harness: warm-up, back-to-back timed repetitions inside one
//! marked window, latency statistics and energy per operation.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::energy::{self, integrate, EnergyReport, Meter, MeterSpec};
use crate::error::{Error, Result};
use crate::kernel::{KernelId, PreparedConv};
use crate::parallel;
use crate::problem::ConvProblem;
use crate::reference::{conv_naive, ConvInputs};
use crate::tensor::{max_rel_diff, Tensor4D};

pub const DEFAULT_WARMUP_ITERS: usize = 200;
pub const DEFAULT_MEASURE_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub warmup_iters: usize,
    pub measure_iters: usize,
    pub threads: Vec<usize>,
    pub kernels: Vec<KernelId>,
    pub meter: MeterSpec,
    /// CPU ids; worker `i` is pinned to `pin[i % pin.len()]`.
    pub pin: Option<Vec<usize>>,
    pub seed: u64,
    /// Keep going without energy figures when the meter fails.
    pub allow_latency_only: bool,
    /// Idle time sampled once per harness to estimate baseline power.
    pub idle_baseline: Option<Duration>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup_iters: DEFAULT_WARMUP_ITERS,
            measure_iters: DEFAULT_MEASURE_ITERS,
            threads: vec![1],
            kernels: KernelId::OPTIMIZED.to_vec(),
            meter: MeterSpec::None,
            pin: None,
            seed: 0,
            allow_latency_only: false,
            idle_baseline: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.measure_iters == 0 {
            return Err(Error::Config("measure_iters must be at least 1".into()));
        }
        if self.threads.is_empty() || self.threads.contains(&0) {
            return Err(Error::Config(format!("thread counts must be >= 1, got {:?}", self.threads)));
        }
        if self.kernels.is_empty() {
            return Err(Error::Config("no kernels selected".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub min_s: f64,
    pub median_s: f64,
    /// Window length over iteration count.
    pub mean_s: f64,
    pub p95_s: f64,
}

impl LatencyStats {
    /// Quantiles use the nearest-rank rule on per-iteration latencies.
    pub fn from_samples(per_iter: &[f64], window_s: f64) -> Self {
        assert!(!per_iter.is_empty());
        let mut v = per_iter.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |q: f64| v[((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        LatencyStats {
            min_s: v[0],
            median_s: rank(0.5),
            mean_s: window_s / per_iter.len() as f64,
            p95_s: rank(0.95),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Measurement {
    /// Per-iteration latencies from consecutive timestamps.
    pub per_iter_s: Vec<f64>,
    pub window: (f64, f64),
    pub energy: Option<EnergyReport>,
    /// Why energy is missing when a meter was supplied.
    pub meter_error: Option<String>,
}

impl Measurement {
    pub fn latency(&self) -> LatencyStats {
        LatencyStats::from_samples(&self.per_iter_s, self.window.1 - self.window.0)
    }
}

/// Runs `warmup` unmeasured iterations, then `iters` back-to-back inside one
/// window marked on the shared monotonic clock, with the meter sampling
/// around it. Energy is integrated after the window closes.
pub fn measure(
    mut workload: impl FnMut() -> Result<()>,
    warmup: usize,
    iters: usize,
    meter: Option<&mut (dyn Meter + 'static)>,
) -> Result<Measurement> {
    if iters == 0 {
        return Err(Error::Config("measure_iters must be at least 1".into()));
    }
    for _ in 0..warmup {
        workload()?;
    }
    let mut meter = meter;
    let mut meter_error = None;
    if let Some(m) = meter.as_deref_mut() {
        if let Err(e) = m.start() {
            meter_error = Some(format!("{}: {e}", m.name()));
        }
    }
    let mut stamps = Vec::with_capacity(iters + 1);
    let t0 = energy::now();
    stamps.push(t0);
    for _ in 0..iters {
        workload()?;
        stamps.push(energy::now());
    }
    let t1 = stamps[iters];
    let mut report = None;
    if let (Some(m), None) = (meter, &meter_error) {
        let r = m.stop().and_then(|_| m.drain()).and_then(|trace| integrate(&trace, t0, t1));
        match r {
            Ok(r) => report = Some(r),
            Err(e) => meter_error = Some(format!("{}: {e}", m.name())),
        }
    }
    Ok(Measurement {
        per_iter_s: stamps.windows(2).map(|w| w[1] - w[0]).collect(),
        window: (t0, t1),
        energy: report,
        meter_error,
    })
}

#[derive(Debug, Clone)]
pub struct DualMeasurement {
    pub a: EnergyReport,
    pub b: EnergyReport,
    pub latency: LatencyStats,
}

/// Runs one case with two meters sampling the same marked window. A meter
/// failure is reported under that meter's name.
pub fn compare_case(
    p: &ConvProblem,
    kernel: KernelId,
    threads: usize,
    cfg: &BenchConfig,
    a: &mut dyn Meter,
    b: &mut dyn Meter,
) -> Result<DualMeasurement> {
    cfg.validate()?;
    let inputs = ConvInputs::random(p, cfg.seed)?;
    let prepared = PreparedConv::new(kernel, p, &inputs, threads)?;
    let diff = max_rel_diff(&conv_naive(p, &inputs)?, &prepared.execute()?)?;
    if !(diff <= kernel.tolerance()) {
        return Err(Error::Correctness {
            kernel: kernel.to_string(),
            diff,
            tolerance: kernel.tolerance(),
        });
    }
    let named = |m: &dyn Meter, e: energy::EnergyError| {
        Error::Energy(energy::EnergyError::Meter {
            name: m.name(),
            msg: e.to_string(),
        })
    };
    let pin = cfg.pin.clone();
    let (per_iter, t0, t1) = parallel::install_pinned(threads, pin.as_deref(), || -> Result<_> {
        for _ in 0..cfg.warmup_iters {
            prepared.execute()?;
        }
        a.start().map_err(|e| named(a, e))?;
        b.start().map_err(|e| named(b, e))?;
        let mut stamps = Vec::with_capacity(cfg.measure_iters + 1);
        stamps.push(energy::now());
        for _ in 0..cfg.measure_iters {
            prepared.execute()?;
            stamps.push(energy::now());
        }
        b.stop().map_err(|e| named(b, e))?;
        a.stop().map_err(|e| named(a, e))?;
        let per_iter: Vec<f64> = stamps.windows(2).map(|w| w[1] - w[0]).collect();
        Ok((per_iter, stamps[0], stamps[cfg.measure_iters]))
    })?;
    let report = |m: &mut dyn Meter| m.drain().and_then(|t| integrate(&t, t0, t1)).map_err(|e| named(m, e));
    Ok(DualMeasurement {
        a: report(a)?,
        b: report(b)?,
        latency: LatencyStats::from_samples(&per_iter, t1 - t0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub problem: String,
    pub problem_name: Option<String>,
    pub kernel: KernelId,
    pub threads: usize,
    pub latency_min_s: f64,
    pub latency_median_s: f64,
    pub latency_mean_s: f64,
    pub latency_p95_s: f64,
    pub mean_power_w: Option<f64>,
    pub energy_per_op_j: Option<f64>,
    pub net_energy_per_op_j: Option<f64>,
    pub baseline_power_w: Option<f64>,
    pub flops: u64,
    pub gflops: f64,
    pub max_rel_diff: f64,
    pub warmup_iters: usize,
    pub measure_iters: usize,
    pub window_start_s: f64,
    pub window_end_s: f64,
    /// Seconds since the Unix epoch at completion.
    pub timestamp: u64,
    pub host_name: String,
    pub host_cpus: usize,
    pub seed: u64,
    pub meter: String,
    pub latency_only: bool,
}

impl BenchResult {
    pub fn key(&self) -> CaseKey {
        CaseKey {
            problem: self.problem.clone(),
            kernel: self.kernel,
            threads: self.threads,
        }
    }

    pub fn label(&self) -> String {
        let name = self.problem_name.as_deref().unwrap_or(&self.problem);
        format!("{name}/{}/{}t", self.kernel, self.threads)
    }

    pub fn latency(&self) -> LatencyStats {
        LatencyStats {
            min_s: self.latency_min_s,
            median_s: self.latency_median_s,
            mean_s: self.latency_mean_s,
            p95_s: self.latency_p95_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CaseKey {
    pub problem: String,
    pub kernel: KernelId,
    pub threads: usize,
}

pub fn host_name() -> String {
    std::fs::read_to_string("/proc/sys/kernel/hostname")
        .or_else(|_| std::fs::read_to_string("/etc/hostname"))
        .map(|s| s.trim().to_string())
        .ok()
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var("HOSTNAME").ok())
        .unwrap_or_else(|| "unknown".into())
}

pub fn host_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs cases one at a time with a shared meter and a cache of oracle
/// outputs, so several kernels on one problem compute the oracle once.
pub struct Harness {
    cfg: BenchConfig,
    meter: Option<Box<dyn Meter>>,
    meter_name: String,
    meter_error: Option<String>,
    baseline_w: Option<f64>,
    oracles: HashMap<(String, u64), (ConvInputs, Tensor4D)>,
}

impl Harness {
    /// Builds the configured meter. A meter that cannot be opened is an
    /// error unless `allow_latency_only` is set.
    pub fn new(cfg: BenchConfig) -> Result<Self> {
        cfg.validate()?;
        let name = cfg.meter.to_string();
        match cfg.meter.build() {
            Ok(meter) => Self::with_meter(cfg, meter),
            Err(e) if cfg.allow_latency_only => {
                let mut h = Self::with_meter(cfg, None)?;
                h.meter_name = name.clone();
                h.meter_error = Some(format!("{name}: {e}"));
                Ok(h)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn with_meter(cfg: BenchConfig, meter: Option<Box<dyn Meter>>) -> Result<Self> {
        cfg.validate()?;
        let meter_name = meter.as_ref().map_or_else(|| "none".to_string(), |m| m.name());
        let mut h = Harness {
            cfg,
            meter,
            meter_name,
            meter_error: None,
            baseline_w: None,
            oracles: HashMap::new(),
        };
        if let (Some(d), Some(m)) = (h.cfg.idle_baseline, h.meter.as_deref_mut()) {
            match energy::idle_baseline(m, d) {
                Ok(w) => h.baseline_w = Some(w),
                Err(e) if h.cfg.allow_latency_only => h.meter_error = Some(e.to_string()),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(h)
    }

    pub fn config(&self) -> &BenchConfig {
        &self.cfg
    }

    pub fn baseline_w(&self) -> Option<f64> {
        self.baseline_w
    }

    /// Set when the meter could not be opened and results are latency-only.
    pub fn meter_error(&self) -> Option<&str> {
        self.meter_error.as_deref()
    }

    pub fn set_baseline(&mut self, watts: Option<f64>) {
        self.baseline_w = watts;
    }

    fn oracle(&mut self, p: &ConvProblem) -> Result<&(ConvInputs, Tensor4D)> {
        let key = (p.descriptor(), self.cfg.seed);
        if !self.oracles.contains_key(&key) {
            // Keep memory bounded across a long suite.
            if self.oracles.len() >= 4 {
                self.oracles.clear();
            }
            let inputs = ConvInputs::random(p, self.cfg.seed)?;
            let want = conv_naive(p, &inputs)?;
            self.oracles.insert(key.clone(), (inputs, want));
        }
        Ok(&self.oracles[&key])
    }

    /// Checks the kernel once against the oracle, then measures it. A
    /// kernel that fails the check is never timed.
    pub fn run_case(&mut self, p: &ConvProblem, kernel: KernelId, threads: usize) -> Result<BenchResult> {
        kernel.supports(p).map_err(|reason| Error::Unsupported {
            kernel: kernel.to_string(),
            reason,
        })?;
        let (prepared, diff) = {
            let (inputs, want) = self.oracle(p)?;
            let prepared = PreparedConv::new(kernel, p, inputs, threads)?;
            let diff = max_rel_diff(want, &prepared.execute()?)?;
            (prepared, diff)
        };
        if !(diff <= kernel.tolerance()) {
            return Err(Error::Correctness {
                kernel: kernel.to_string(),
                diff,
                tolerance: kernel.tolerance(),
            });
        }

        let (warmup, iters) = (self.cfg.warmup_iters, self.cfg.measure_iters);
        let pin = self.cfg.pin.clone();
        let meter = self.meter.as_deref_mut();
        let m = parallel::install_pinned(threads, pin.as_deref(), || {
            measure(|| prepared.execute().map(drop), warmup, iters, meter)
        })?;
        if let Some(err) = &m.meter_error {
            if !self.cfg.allow_latency_only {
                return Err(Error::Energy(energy::EnergyError::Meter {
                    name: self.meter_name.clone(),
                    msg: err.clone(),
                }));
            }
        }
        Ok(self.result(p, kernel, threads, diff, &m))
    }

    fn result(&self, p: &ConvProblem, kernel: KernelId, threads: usize, diff: f64, m: &Measurement) -> BenchResult {
        let lat = m.latency();
        let iters = self.cfg.measure_iters as f64;
        let energy = m.energy.clone().map(|r| match self.baseline_w {
            Some(b) => r.with_baseline(b),
            None => r,
        });
        let flops = p.flops();
        BenchResult {
            problem: p.descriptor(),
            problem_name: p.name.clone(),
            kernel,
            threads,
            latency_min_s: lat.min_s,
            latency_median_s: lat.median_s,
            latency_mean_s: lat.mean_s,
            latency_p95_s: lat.p95_s,
            mean_power_w: energy.as_ref().map(|e| e.mean_power_w),
            energy_per_op_j: energy.as_ref().map(|e| e.energy_j / iters),
            net_energy_per_op_j: energy.as_ref().and_then(|e| e.net_energy_j).map(|e| e / iters),
            baseline_power_w: energy.as_ref().and_then(|e| e.baseline_power_w),
            flops,
            gflops: flops as f64 / lat.mean_s / 1e9,
            max_rel_diff: diff,
            warmup_iters: self.cfg.warmup_iters,
            measure_iters: self.cfg.measure_iters,
            window_start_s: m.window.0,
            window_end_s: m.window.1,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            host_name: host_name(),
            host_cpus: host_cpus(),
            seed: self.cfg.seed,
            meter: self.meter_name.clone(),
            latency_only: energy.is_none(),
        }
    }

    /// Runs problems × kernels × threads sequentially, streaming each result
    /// to `sink` (JSON lines) as it completes. Cases already present in the
    /// sink are skipped, so an interrupted sweep resumes where it stopped.
    /// Individual failures are recorded and the sweep continues.
    pub fn sweep(
        &mut self,
        problems: &[ConvProblem],
        sink: Option<&Path>,
        mut progress: impl FnMut(&CaseOutcome),
    ) -> Result<Vec<CaseOutcome>> {
        let (mut writer, done) = match sink {
            Some(path) => {
                let (file, done) = open_sink(path)?;
                (Some((path.to_path_buf(), file)), done)
            }
            None => (None, HashMap::new()),
        };
        let kernels = self.cfg.kernels.clone();
        let threads = self.cfg.threads.clone();
        let mut outcomes = Vec::new();
        for p in problems {
            for &k in &kernels {
                for &t in &threads {
                    let key = CaseKey {
                        problem: p.descriptor(),
                        kernel: k,
                        threads: t,
                    };
                    let outcome = if let Some(prev) = done.get(&key) {
                        CaseOutcome::Resumed(prev.clone())
                    } else {
                        match self.run_case(p, k, t) {
                            Ok(r) => {
                                if let Some((path, file)) = writer.as_mut() {
                                    write_record(file, path, &r)?;
                                }
                                CaseOutcome::Done(r)
                            }
                            Err(e) => CaseOutcome::Failed {
                                key,
                                status: CaseStatus::of(&e),
                                message: e.to_string(),
                            },
                        }
                    };
                    progress(&outcome);
                    outcomes.push(outcome);
                }
            }
        }
        Ok(outcomes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseStatus {
    Unsupported,
    CorrectnessFailure,
    MeterFailure,
    Error,
}

impl CaseStatus {
    pub fn of(e: &Error) -> Self {
        match e {
            Error::Unsupported { .. } => CaseStatus::Unsupported,
            Error::Correctness { .. } => CaseStatus::CorrectnessFailure,
            Error::Energy(_) => CaseStatus::MeterFailure,
            _ => CaseStatus::Error,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CaseStatus::Unsupported => "unsupported",
            CaseStatus::CorrectnessFailure => "correctness-failure",
            CaseStatus::MeterFailure => "meter-failure",
            CaseStatus::Error => "error",
        }
    }
}

#[derive(Debug, Clone)]
pub enum CaseOutcome {
    Done(BenchResult),
    /// Found in the sink from an earlier run.
    Resumed(BenchResult),
    Failed {
        key: CaseKey,
        status: CaseStatus,
        message: String,
    },
}

impl CaseOutcome {
    pub fn result(&self) -> Option<&BenchResult> {
        match self {
            CaseOutcome::Done(r) | CaseOutcome::Resumed(r) => Some(r),
            CaseOutcome::Failed { .. } => None,
        }
    }
}

/// Reads complete records from an existing sink and drops a trailing
/// partial line left by an interrupted run, so appends stay well-formed.
fn open_sink(path: &Path) -> Result<(File, HashMap<CaseKey, BenchResult>)> {
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut done = HashMap::new();
    let mut good_len = 0u64;
    let mut reader = BufReader::new(&mut file);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<BenchResult>(line.trim_end()) {
            Ok(r) => {
                done.insert(r.key(), r);
            }
            Err(_) if line.trim().is_empty() => {}
            Err(e) => {
                return Err(Error::Config(format!(
                    "{}: existing sink has a malformed record: {e}",
                    path.display()
                )))
            }
        }
        good_len += n as u64;
    }
    drop(reader);
    if file.metadata().map_err(|e| Error::io(path, e))?.len() != good_len {
        file.set_len(good_len).map_err(|e| Error::io(path, e))?;
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
    }
    Ok((file, done))
}

fn write_record(file: &mut File, path: &PathBuf, r: &BenchResult) -> Result<()> {
    let mut line = serde_json::to_string(r)?;
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines sink, ignoring a trailing partial line.
pub fn read_sink(path: &Path) -> Result<Vec<BenchResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// True when no two measured windows intersect.
pub fn windows_disjoint(results: &[BenchResult]) -> bool {
    let mut w: Vec<(f64, f64)> = results.iter().map(|r| (r.window_start_s, r.window_end_s)).collect();
    w.sort_by(|a, b| a.0.total_cmp(&b.0));
    w.windows(2).all(|p| p[0].1 <= p[1].0)
}

/// Distinct (problem, kernel, threads) keys; a sweep never repeats one.
pub fn distinct_keys(results: &[BenchResult]) -> usize {
    results.iter().map(BenchResult::key).collect::<HashSet<_>>().len()
}
