use std::time::Duration;

use super::{now, EnergyError, Meter, PowerSample, PowerTrace, TraceSource, DEFAULT_SAMPLE_PERIOD, MIN_SAMPLE_PERIOD};

/// Deterministic meter: constant power sampled on a fixed grid from the
/// start marker, with optional single-sample spikes. Samples are synthesized
/// at `drain`, so it adds no load while the workload runs.
#[derive(Debug, Clone)]
pub struct MockMeter {
    watts: f64,
    period: Duration,
    /// (sample index, watts)
    spikes: Vec<(usize, f64)>,
    window: (Option<f64>, Option<f64>),
}

impl MockMeter {
    pub fn constant(watts: f64) -> Self {
        MockMeter {
            watts,
            period: DEFAULT_SAMPLE_PERIOD,
            spikes: Vec::new(),
            window: (None, None),
        }
    }

    pub fn with_period(mut self, period: Duration) -> Result<Self, EnergyError> {
        if period < MIN_SAMPLE_PERIOD {
            return Err(EnergyError::PeriodTooShort(period));
        }
        self.period = period;
        Ok(self)
    }

    /// Replaces the power of sample `index` (counted from the start marker).
    pub fn with_spike(mut self, index: usize, watts: f64) -> Self {
        self.spikes.push((index, watts));
        self
    }

    pub fn watts(&self) -> f64 {
        self.watts
    }

    /// Samples on the grid `t0 + k·period` plus one exactly at `t1`.
    pub fn synthesize(&self, t0: f64, t1: f64) -> Vec<PowerSample> {
        let dt = self.period.as_secs_f64();
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let t = t0 + k as f64 * dt;
            if t >= t1 {
                break;
            }
            out.push(PowerSample { t, p: self.power(k) });
            k += 1;
        }
        out.push(PowerSample { t: t1, p: self.power(k) });
        out
    }

    fn power(&self, k: usize) -> f64 {
        self.spikes
            .iter()
            .rev()
            .find(|(i, _)| *i == k)
            .map_or(self.watts, |&(_, w)| w)
    }
}

impl Meter for MockMeter {
    fn name(&self) -> String {
        format!("mock:{}", self.watts)
    }

    fn start(&mut self) -> Result<(), EnergyError> {
        self.window = (Some(now()), None);
        Ok(())
    }

    fn stop(&mut self) -> Result<(), EnergyError> {
        if self.window.0.is_none() {
            return Err(EnergyError::NotStarted(self.name()));
        }
        self.window.1 = Some(now());
        Ok(())
    }

    fn drain(&mut self) -> Result<PowerTrace, EnergyError> {
        match self.window {
            (Some(t0), Some(t1)) => {
                self.window = (None, None);
                // Clock granularity can make a tiny window empty.
                let t1 = if t1 > t0 { t1 } else { t0 + 1e-9 };
                PowerTrace::new(self.synthesize(t0, t1), TraceSource::Mock)
            }
            _ => Err(EnergyError::NotStarted(self.name())),
        }
    }
}
