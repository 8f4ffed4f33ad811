//! Cumulative energy counter in the powercap sysfs convention: a directory
//! holding `energy_uj` and `max_energy_range_uj`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::{now, EnergyError, Meter, PowerSample, PowerTrace, TraceSource, DEFAULT_SAMPLE_PERIOD, MIN_SAMPLE_PERIOD};

pub const POWERCAP_ENV: &str = "CONVBENCH_POWERCAP_DIR";
pub const DEFAULT_POWERCAP_DIR: &str = "/sys/class/powercap/intel-rapl:0";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterReading {
    pub t: f64,
    pub energy_uj: u64,
}

/// Counter increment from `prev` to `curr`, assuming at most one wrap at
/// `max_range`.
pub fn wrapping_delta(prev: u64, curr: u64, max_range: u64) -> u64 {
    if curr >= prev {
        curr - prev
    } else {
        max_range - prev + curr
    }
}

/// Converts consecutive counter reads into power samples. Each interval's
/// average power is stamped at the interval end; the first read repeats the
/// first interval's power so the trace spans every read.
pub fn counter_samples(readings: &[CounterReading], max_range: u64) -> Result<Vec<PowerSample>, EnergyError> {
    let mut out = Vec::with_capacity(readings.len());
    for w in readings.windows(2) {
        let dt = w[1].t - w[0].t;
        if !(dt > 0.0) {
            return Err(EnergyError::NonMonotonicTime { prev: w[0].t, next: w[1].t });
        }
        let p = wrapping_delta(w[0].energy_uj, w[1].energy_uj, max_range) as f64 * 1e-6 / dt;
        if out.is_empty() {
            out.push(PowerSample { t: w[0].t, p });
        }
        out.push(PowerSample { t: w[1].t, p });
    }
    Ok(out)
}

fn read_u64(path: &Path) -> Result<u64, EnergyError> {
    let text = fs::read_to_string(path).map_err(|source| EnergyError::CounterUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    text.trim().parse().map_err(|_| EnergyError::BadCounterValue {
        path: path.to_path_buf(),
        value: text.trim().to_string(),
    })
}

struct Sampler {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<()>,
    rx: mpsc::Receiver<Result<CounterReading, String>>,
}

pub struct CounterMeter {
    dir: PathBuf,
    max_range: u64,
    period: Duration,
    sampler: Option<Sampler>,
    readings: Vec<CounterReading>,
}

impl CounterMeter {
    /// `$CONVBENCH_POWERCAP_DIR`, falling back to the package-0 RAPL domain.
    pub fn default_dir() -> PathBuf {
        std::env::var_os(POWERCAP_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_POWERCAP_DIR))
    }

    /// Checks both files are readable before any measurement starts.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EnergyError> {
        let dir = dir.into();
        read_u64(&dir.join("energy_uj"))?;
        let range_path = dir.join("max_energy_range_uj");
        if !range_path.exists() {
            return Err(EnergyError::WrapLimitMissing(range_path));
        }
        let max_range = read_u64(&range_path)?;
        Ok(CounterMeter {
            dir,
            max_range,
            period: DEFAULT_SAMPLE_PERIOD,
            sampler: None,
            readings: Vec::new(),
        })
    }

    pub fn with_period(mut self, period: Duration) -> Result<Self, EnergyError> {
        if period < MIN_SAMPLE_PERIOD {
            return Err(EnergyError::PeriodTooShort(period));
        }
        self.period = period;
        Ok(self)
    }

    pub fn max_range(&self) -> u64 {
        self.max_range
    }

    pub fn read(&self) -> Result<CounterReading, EnergyError> {
        let energy_uj = read_u64(&self.dir.join("energy_uj"))?;
        Ok(CounterReading { t: now(), energy_uj })
    }
}

impl Meter for CounterMeter {
    fn name(&self) -> String {
        format!("counter:{}", self.dir.display())
    }

    fn start(&mut self) -> Result<(), EnergyError> {
        if self.sampler.is_some() {
            self.stop()?;
        }
        self.readings.clear();
        let first = self.read()?;
        let file = self.dir.join("energy_uj");
        let period = self.period;
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        tx.send(Ok(first)).ok();
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || loop {
            std::thread::sleep(period);
            // One last read after the stop marker so the trace covers it.
            let last = flag.load(Ordering::Acquire);
            let r = read_u64(&file)
                .map(|energy_uj| CounterReading { t: now(), energy_uj })
                .map_err(|e| e.to_string());
            let failed = r.is_err();
            if tx.send(r).is_err() || failed || last {
                break;
            }
        });
        self.sampler = Some(Sampler { stop, handle, rx });
        Ok(())
    }

    fn stop(&mut self) -> Result<(), EnergyError> {
        let sampler = self.sampler.take().ok_or_else(|| EnergyError::NotStarted(self.name()))?;
        sampler.stop.store(true, Ordering::Release);
        sampler.handle.join().map_err(|_| EnergyError::Meter {
            name: self.name(),
            msg: "sampler thread panicked".into(),
        })?;
        for r in sampler.rx.try_iter() {
            match r {
                Ok(r) => self.readings.push(r),
                Err(msg) => return Err(EnergyError::Meter { name: self.name(), msg }),
            }
        }
        Ok(())
    }

    fn drain(&mut self) -> Result<PowerTrace, EnergyError> {
        let readings = std::mem::take(&mut self.readings);
        PowerTrace::new(counter_samples(&readings, self.max_range)?, TraceSource::CounterMeter)
    }
}

impl Drop for CounterMeter {
    fn drop(&mut self) {
        if let Some(s) = self.sampler.take() {
            s.stop.store(true, Ordering::Release);
            let _ = s.handle.join();
        }
    }
}
