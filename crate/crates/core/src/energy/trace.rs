//! External power traces: CSV `timestamp_s,watts`, one sample per line.

use std::path::{Path, PathBuf};

use super::{EnergyError, Meter, PowerSample, PowerTrace, TraceSource, MAX_TRACE_RATE_HZ, MIN_TRACE_RATE_HZ};

pub const TRACE_HEADER: &str = "timestamp_s,watts";

#[derive(Debug, Clone)]
pub struct IngestedTrace {
    pub trace: PowerTrace,
    pub rate_hz: f64,
    /// Set when the rate falls outside the 1–5 kHz band; not an error.
    pub rate_warning: Option<String>,
}

pub fn parse_power_trace(text: &str) -> Result<IngestedTrace, EnergyError> {
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || (i == 0 && line == TRACE_HEADER) {
            continue;
        }
        let bad = |msg: String| EnergyError::TraceLine { line: line_no, msg };
        let (t, p) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("expected '<timestamp_s>,<watts>', got {line:?}")))?;
        let t: f64 = t.trim().parse().map_err(|_| bad(format!("bad timestamp {:?}", t.trim())))?;
        let p: f64 = p.trim().parse().map_err(|_| bad(format!("bad power {:?}", p.trim())))?;
        if !t.is_finite() {
            return Err(bad(format!("non-finite timestamp {t}")));
        }
        if !p.is_finite() || p < 0.0 {
            return Err(bad(format!("power must be finite and non-negative, got {p}")));
        }
        if let Some(prev) = samples.last().map(|s: &PowerSample| s.t) {
            if t <= prev {
                return Err(bad(format!("timestamp {t} does not increase (previous {prev})")));
            }
        }
        samples.push(PowerSample { t, p });
    }
    let trace = PowerTrace::new(samples, TraceSource::ExternalFile)?;
    let rate_hz = trace.sample_rate_hz();
    let rate_warning = (!(MIN_TRACE_RATE_HZ..=MAX_TRACE_RATE_HZ).contains(&rate_hz)).then(|| {
        format!("sample rate {rate_hz:.1} Hz is outside the {MIN_TRACE_RATE_HZ}-{MAX_TRACE_RATE_HZ} Hz band")
    });
    Ok(IngestedTrace {
        trace,
        rate_hz,
        rate_warning,
    })
}

pub fn ingest_power_trace(path: impl AsRef<Path>) -> Result<IngestedTrace, EnergyError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EnergyError::TraceIo {
        path: path.to_path_buf(),
        source,
    })?;
    parse_power_trace(&text)
}

/// Replays a recorded trace; `offset_s` is added to every timestamp to
/// align the logger's clock with ours.
pub struct TraceMeter {
    path: PathBuf,
    ingested: IngestedTrace,
}

impl TraceMeter {
    pub fn open(path: impl AsRef<Path>, offset_s: f64) -> Result<Self, EnergyError> {
        let mut ingested = ingest_power_trace(&path)?;
        ingested.trace = ingested.trace.shifted(offset_s);
        Ok(TraceMeter {
            path: path.as_ref().to_path_buf(),
            ingested,
        })
    }

    pub fn rate_warning(&self) -> Option<&str> {
        self.ingested.rate_warning.as_deref()
    }
}

impl Meter for TraceMeter {
    fn name(&self) -> String {
        format!("trace:{}", self.path.display())
    }

    fn start(&mut self) -> Result<(), EnergyError> {
        Ok(())
    }

    fn stop(&mut self) -> Result<(), EnergyError> {
        Ok(())
    }

    fn drain(&mut self) -> Result<PowerTrace, EnergyError> {
        Ok(self.ingested.trace.clone())
    }
}
