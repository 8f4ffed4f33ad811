//! Power metering and energy integration.
//!
//! Every meter produces a [`PowerTrace`] of `(t, watts)` samples on the
//! shared monotonic clock from [`now`]. The workload marks its window with the
//! same clock, and energy is integrated over that window once the workload
//! has finished.

mod counter;
mod mock;
mod trace;

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use counter::{counter_samples, wrapping_delta, CounterMeter, CounterReading, DEFAULT_POWERCAP_DIR, POWERCAP_ENV};
pub use mock::MockMeter;
pub use trace::{ingest_power_trace, parse_power_trace, IngestedTrace, TraceMeter, TRACE_HEADER};

/// Sampling band of the external power boards, in Hz.
pub const MIN_TRACE_RATE_HZ: f64 = 1_000.0;
pub const MAX_TRACE_RATE_HZ: f64 = 5_000.0;

pub const DEFAULT_SAMPLE_PERIOD: Duration = Duration::from_millis(1);
pub const MIN_SAMPLE_PERIOD: Duration = Duration::from_micros(200);

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("cannot read energy counter {path}: {source}")]
    CounterUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("counter wrap limit missing at {0}")]
    WrapLimitMissing(PathBuf),
    #[error("malformed counter value in {path}: {value:?}")]
    BadCounterValue { path: PathBuf, value: String },
    #[error("timestamps must strictly increase (t={prev} then t={next})")]
    NonMonotonicTime { prev: f64, next: f64 },
    #[error("trace line {line}: {msg}")]
    TraceLine { line: usize, msg: String },
    #[error("cannot read trace {path}: {source}")]
    TraceIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace needs at least two samples, found {0}")]
    TooFewSamples(usize),
    #[error("empty integration window [{t0}, {t1}]")]
    EmptyWindow { t0: f64, t1: f64 },
    #[error("window [{t0}, {t1}] is outside the trace span [{first}, {last}]")]
    WindowOutsideTrace { t0: f64, t1: f64, first: f64, last: f64 },
    #[error("reports cover different windows: {a:?} vs {b:?}")]
    WindowMismatch { a: (f64, f64), b: (f64, f64) },
    #[error("idle baseline needs at least 1 s, got {0:?}")]
    BaselineTooShort(Duration),
    #[error("sampling period {0:?} is below the 0.2 ms floor")]
    PeriodTooShort(Duration),
    #[error("meter {0} was not started")]
    NotStarted(String),
    #[error("invalid meter spec '{0}': expected none, mock:<watts>, counter[:<dir>] or trace:<file>[:offset_s]")]
    BadSpec(String),
    #[error("meter {name}: {msg}")]
    Meter { name: String, msg: String },
}

/// Seconds on the system monotonic clock (`CLOCK_MONOTONIC` on Unix), so
/// external loggers on the same host can share the time base.
pub fn now() -> f64 {
    #[cfg(unix)]
    {
        let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
        // SAFETY: valid out-pointer; CLOCK_MONOTONIC is always available.
        unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
        ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
    }
    #[cfg(not(unix))]
    {
        use std::sync::OnceLock;
        use std::time::Instant;
        static EPOCH: OnceLock<Instant> = OnceLock::new();
        EPOCH.get_or_init(Instant::now).elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Seconds.
    pub t: f64,
    /// Watts.
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceSource {
    CounterMeter,
    ExternalFile,
    Mock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerTrace {
    samples: Vec<PowerSample>,
    source: TraceSource,
}

impl PowerTrace {
    /// Validates strictly increasing timestamps, finite non-negative power
    /// and at least two samples.
    pub fn new(samples: Vec<PowerSample>, source: TraceSource) -> Result<Self, EnergyError> {
        if samples.len() < 2 {
            return Err(EnergyError::TooFewSamples(samples.len()));
        }
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(EnergyError::NonMonotonicTime { prev: w[0].t, next: w[1].t });
            }
        }
        if let Some(s) = samples.iter().find(|s| !s.t.is_finite() || !s.p.is_finite() || s.p < 0.0) {
            return Err(EnergyError::Meter {
                name: format!("{source:?}"),
                msg: format!("invalid sample t={} p={}", s.t, s.p),
            });
        }
        Ok(PowerTrace { samples, source })
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn source(&self) -> TraceSource {
        self.source
    }

    pub fn first_t(&self) -> f64 {
        self.samples[0].t
    }

    pub fn last_t(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    pub fn duration(&self) -> f64 {
        self.last_t() - self.first_t()
    }

    /// Mean sample rate `(n − 1) / duration`.
    pub fn sample_rate_hz(&self) -> f64 {
        (self.samples.len() - 1) as f64 / self.duration()
    }

    pub fn shifted(mut self, offset_s: f64) -> Self {
        self.samples.iter_mut().for_each(|s| s.t += offset_s);
        self
    }

    /// Linear interpolation at `t`, which must lie inside the span.
    fn power_at(&self, t: f64) -> f64 {
        let i = self.samples.partition_point(|s| s.t <= t);
        if i == 0 {
            return self.samples[0].p;
        }
        if i == self.samples.len() {
            return self.samples[i - 1].p;
        }
        let (a, b) = (self.samples[i - 1], self.samples[i]);
        a.p + (b.p - a.p) * (t - a.t) / (b.t - a.t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub energy_j: f64,
    pub mean_power_w: f64,
    pub baseline_power_w: Option<f64>,
    pub net_energy_j: Option<f64>,
    pub window: (f64, f64),
}

impl EnergyReport {
    pub fn duration(&self) -> f64 {
        self.window.1 - self.window.0
    }

    /// Attributes `energy − baseline · duration` to the workload.
    pub fn with_baseline(mut self, baseline_w: f64) -> Self {
        self.baseline_power_w = Some(baseline_w);
        self.net_energy_j = Some(self.energy_j - baseline_w.max(0.0) * self.duration());
        self
    }
}

/// Trapezoidal integration of the trace over `[t0, t1]`, with linearly
/// interpolated end points.
pub fn integrate(trace: &PowerTrace, t0: f64, t1: f64) -> Result<EnergyReport, EnergyError> {
    if !(t1 > t0) {
        return Err(EnergyError::EmptyWindow { t0, t1 });
    }
    if t0 < trace.first_t() || t1 > trace.last_t() {
        return Err(EnergyError::WindowOutsideTrace {
            t0,
            t1,
            first: trace.first_t(),
            last: trace.last_t(),
        });
    }
    let s = &trace.samples;
    let lo = s.partition_point(|x| x.t <= t0);
    let hi = s.partition_point(|x| x.t < t1);
    let mut prev = PowerSample { t: t0, p: trace.power_at(t0) };
    let end = PowerSample { t: t1, p: trace.power_at(t1) };
    let mut sum = NeumaierSum::default();
    for &x in s[lo..hi].iter().chain(std::iter::once(&end)) {
        sum.add(0.5 * (prev.p + x.p) * (x.t - prev.t));
        prev = x;
    }
    let energy = sum.value();
    Ok(EnergyReport {
        energy_j: energy,
        mean_power_w: energy / (t1 - t0),
        baseline_power_w: None,
        net_energy_j: None,
        window: (t0, t1),
    })
}

/// Compensated summation: long traces of near-equal trapezoids sum without
/// drift, so a constant trace integrates to exactly `P · (t1 − t0)`.
#[derive(Default)]
struct NeumaierSum {
    sum: f64,
    c: f64,
}

impl NeumaierSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeterComparison {
    /// `a.energy / b.energy`
    pub energy_ratio: f64,
    /// `a.mean_power / b.mean_power`
    pub power_ratio: f64,
    /// `1 − a/b`: how much meter `a` (typically the on-die counter)
    /// undercounts meter `b` (typically the socket measurement).
    pub underestimation: f64,
}

pub fn compare_meters(a: &EnergyReport, b: &EnergyReport) -> Result<MeterComparison, EnergyError> {
    let tol = 1e-9 * (1.0 + a.window.1.abs());
    if (a.window.0 - b.window.0).abs() > tol || (a.window.1 - b.window.1).abs() > tol {
        return Err(EnergyError::WindowMismatch { a: a.window, b: b.window });
    }
    let energy_ratio = a.energy_j / b.energy_j;
    Ok(MeterComparison {
        energy_ratio,
        power_ratio: a.mean_power_w / b.mean_power_w,
        underestimation: 1.0 - energy_ratio,
    })
}

/// Something that records power while a workload runs.
pub trait Meter: Send {
    fn name(&self) -> String;
    fn start(&mut self) -> Result<(), EnergyError>;
    fn stop(&mut self) -> Result<(), EnergyError>;
    /// Samples recorded between the last `start` and `stop`.
    fn drain(&mut self) -> Result<PowerTrace, EnergyError>;
}

/// Median sample power over `duration` of (caller-guaranteed) idle time.
pub fn idle_baseline(meter: &mut dyn Meter, duration: Duration) -> Result<f64, EnergyError> {
    if duration < Duration::from_secs(1) {
        return Err(EnergyError::BaselineTooShort(duration));
    }
    meter.start()?;
    let (t0, _) = (now(), std::thread::sleep(duration));
    let t1 = now();
    meter.stop()?;
    let trace = meter.drain()?;
    let mut powers: Vec<f64> = trace
        .samples()
        .iter()
        .filter(|s| s.t >= t0 && s.t <= t1)
        .map(|s| s.p)
        .collect();
    if powers.is_empty() {
        return Err(EnergyError::EmptyWindow { t0, t1 });
    }
    Ok(median(&mut powers))
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Meter selection: `none`, `mock:<watts>`, `counter[:<dir>]`,
/// `trace:<file>[:offset_s]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum MeterSpec {
    #[default]
    None,
    Mock { watts: f64 },
    Counter { dir: Option<PathBuf> },
    Trace { path: PathBuf, offset_s: f64 },
}

impl FromStr for MeterSpec {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EnergyError::BadSpec(s.to_string());
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (s, None),
        };
        match (kind, rest) {
            ("none", None) => Ok(MeterSpec::None),
            ("mock", Some(w)) => {
                let watts: f64 = w.parse().map_err(|_| bad())?;
                if !watts.is_finite() || watts < 0.0 {
                    return Err(bad());
                }
                Ok(MeterSpec::Mock { watts })
            }
            ("counter", None) => Ok(MeterSpec::Counter { dir: None }),
            ("counter", Some(dir)) if !dir.is_empty() => Ok(MeterSpec::Counter { dir: Some(dir.into()) }),
            ("trace", Some(rest)) if !rest.is_empty() => {
                // A trailing `:<number>` is the alignment offset.
                if let Some((path, off)) = rest.rsplit_once(':') {
                    if let Ok(offset_s) = off.parse::<f64>() {
                        if path.is_empty() || !offset_s.is_finite() {
                            return Err(bad());
                        }
                        return Ok(MeterSpec::Trace {
                            path: path.into(),
                            offset_s,
                        });
                    }
                }
                Ok(MeterSpec::Trace {
                    path: rest.into(),
                    offset_s: 0.0,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for MeterSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeterSpec::None => f.write_str("none"),
            MeterSpec::Mock { watts } => write!(f, "mock:{watts}"),
            MeterSpec::Counter { dir: None } => f.write_str("counter"),
            MeterSpec::Counter { dir: Some(d) } => write!(f, "counter:{}", d.display()),
            MeterSpec::Trace { path, offset_s } if *offset_s == 0.0 => write!(f, "trace:{}", path.display()),
            MeterSpec::Trace { path, offset_s } => write!(f, "trace:{}:{offset_s}", path.display()),
        }
    }
}

impl MeterSpec {
    /// Builds the meter; `Ok(None)` for [`MeterSpec::None`].
    pub fn build(&self) -> Result<Option<Box<dyn Meter>>, EnergyError> {
        Ok(match self {
            MeterSpec::None => None,
            MeterSpec::Mock { watts } => Some(Box::new(MockMeter::constant(*watts))),
            MeterSpec::Counter { dir } => {
                let dir = dir.clone().unwrap_or_else(CounterMeter::default_dir);
                Some(Box::new(CounterMeter::open(dir)?))
            }
            MeterSpec::Trace { path, offset_s } => Some(Box::new(TraceMeter::open(path, *offset_s)?)),
        })
    }
}
