//! Result export, Pareto frontier over (latency, power), and plot-ready
//! series. Both axes are minimized.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bench::BenchResult;
use crate::error::{Error, Result};
use crate::kernel::KernelId;

/// CSV columns, in [`BenchResult`] field order; units are in the names.
pub const CSV_HEADER: [&str; 25] = [
    "problem",
    "problem_name",
    "kernel",
    "threads",
    "latency_min_s",
    "latency_median_s",
    "latency_mean_s",
    "latency_p95_s",
    "mean_power_w",
    "energy_per_op_j",
    "net_energy_per_op_j",
    "baseline_power_w",
    "flops",
    "gflops",
    "max_rel_diff",
    "warmup_iters",
    "measure_iters",
    "window_start_s",
    "window_end_s",
    "timestamp",
    "host_name",
    "host_cpus",
    "seed",
    "meter",
    "latency_only",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub latency_s: f64,
    pub power_w: f64,
    pub dominated: bool,
}

impl ParetoPoint {
    pub fn new(label: impl Into<String>, latency_s: f64, power_w: f64) -> Self {
        ParetoPoint {
            label: label.into(),
            latency_s,
            power_w,
            dominated: false,
        }
    }

    /// `self` is no worse on both axes and strictly better on one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.latency_s <= other.latency_s
            && self.power_w <= other.power_w
            && (self.latency_s < other.latency_s || self.power_w < other.power_w)
    }
}

fn check_finite(points: &[ParetoPoint]) -> Result<()> {
    match points.iter().find(|p| !p.latency_s.is_finite() || !p.power_w.is_finite()) {
        Some(p) => Err(Error::NonFinite(format!(
            "pareto point '{}' ({}, {})",
            p.label, p.latency_s, p.power_w
        ))),
        None => Ok(()),
    }
}

/// Non-dominated points sorted by latency ascending, so power strictly
/// decreases along the result. Points with identical coordinates appear
/// once, under the smallest label.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    check_finite(points)?;
    let mut order: Vec<&ParetoPoint> = points.iter().collect();
    order.sort_by(|a, b| {
        a.latency_s
            .total_cmp(&b.latency_s)
            .then(a.power_w.total_cmp(&b.power_w))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut frontier: Vec<ParetoPoint> = Vec::new();
    for p in order {
        if frontier.last().is_none_or(|best| p.power_w < best.power_w) {
            let mut p = p.clone();
            p.dominated = false;
            frontier.push(p);
        }
    }
    Ok(frontier)
}

/// Sets `dominated` on every point. Duplicates of a frontier point are not
/// dominated (dominance needs one strict inequality).
pub fn mark_dominated(points: &mut [ParetoPoint]) -> Result<()> {
    let frontier = pareto_frontier(points)?;
    for p in points.iter_mut() {
        p.dominated = !frontier
            .iter()
            .any(|f| f.latency_s == p.latency_s && f.power_w == p.power_w);
    }
    Ok(())
}

/// One point per result with a power figure: mean latency vs mean power.
pub fn pareto_points(results: &[BenchResult]) -> Vec<ParetoPoint> {
    results
        .iter()
        .filter_map(|r| r.mean_power_w.map(|w| ParetoPoint::new(r.label(), r.latency_mean_s, w)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    JsonLines,
}

impl ExportFormat {
    /// `.csv` is CSV; anything else is JSON lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ExportFormat::Csv,
            _ => ExportFormat::JsonLines,
        }
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json-lines" | "jsonl" => Ok(ExportFormat::JsonLines),
            _ => Err(format!("unknown format '{s}' (expected csv or json-lines)")),
        }
    }
}

pub fn write_csv<W: Write>(results: &[BenchResult], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchResult>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Config(format!(
            "unexpected CSV header; expected {}",
            CSV_HEADER.join(",")
        )));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_json_lines<W: Write>(results: &[BenchResult], mut out: W) -> Result<()> {
    for r in results {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<json-lines>", e))?;
    }
    out.flush().map_err(|e| Error::io("<json-lines>", e))
}

pub fn read_json_lines<R: Read>(mut input: R) -> Result<Vec<BenchResult>> {
    let mut text = String::new();
    input
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<json-lines>", e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn export(results: &[BenchResult], path: &Path, format: ExportFormat) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let out = std::io::BufWriter::new(file);
    match format {
        ExportFormat::Csv => write_csv(results, out),
        ExportFormat::JsonLines => write_json_lines(results, out),
    }
}

pub fn import(path: &Path, format: ExportFormat) -> Result<Vec<BenchResult>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        ExportFormat::Csv => read_csv(file),
        ExportFormat::JsonLines => read_json_lines(file),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotAxes {
    EnergyVsThreads,
    LatencyVsPower,
}

impl FromStr for PlotAxes {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "energy-vs-threads" => Ok(PlotAxes::EnergyVsThreads),
            "latency-vs-power" => Ok(PlotAxes::LatencyVsPower),
            _ => Err(format!(
                "unknown axes '{s}' (expected energy-vs-threads or latency-vs-power)"
            )),
        }
    }
}

impl fmt::Display for PlotAxes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlotAxes::EnergyVsThreads => "energy-vs-threads",
            PlotAxes::LatencyVsPower => "latency-vs-power",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub threads: usize,
    pub energy_per_op_j: Option<f64>,
    pub latency_mean_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergySeries {
    pub problem: String,
    pub kernel: KernelId,
    /// Sorted by thread count ascending.
    pub points: Vec<SeriesPoint>,
}

/// One series per (problem, kernel).
pub fn energy_series(results: &[BenchResult]) -> Vec<EnergySeries> {
    let mut groups: BTreeMap<(String, KernelId), Vec<SeriesPoint>> = BTreeMap::new();
    for r in results {
        let problem = r.problem_name.clone().unwrap_or_else(|| r.problem.clone());
        groups.entry((problem, r.kernel)).or_default().push(SeriesPoint {
            threads: r.threads,
            energy_per_op_j: r.energy_per_op_j,
            latency_mean_s: r.latency_mean_s,
        });
    }
    groups
        .into_iter()
        .map(|((problem, kernel), mut points)| {
            points.sort_by_key(|p| p.threads);
            EnergySeries { problem, kernel, points }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Writes a plain CSV for the chosen figure family.
pub fn emit_plot_series<W: Write>(results: &[BenchResult], axes: PlotAxes, out: W) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Config("no results to plot".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    match axes {
        PlotAxes::EnergyVsThreads => {
            w.write_record(["series", "problem", "kernel", "threads", "energy_per_op_j", "latency_mean_s"])?;
            for s in energy_series(results) {
                let name = format!("{}/{}", s.problem, s.kernel);
                for p in &s.points {
                    w.write_record([
                        name.clone(),
                        s.problem.clone(),
                        s.kernel.to_string(),
                        p.threads.to_string(),
                        opt(p.energy_per_op_j),
                        p.latency_mean_s.to_string(),
                    ])?;
                }
            }
        }
        PlotAxes::LatencyVsPower => {
            let mut points = pareto_points(results);
            mark_dominated(&mut points)?;
            w.write_record(["label", "latency_s", "power_w", "on_frontier"])?;
            for p in &points {
                w.write_record([
                    p.label.clone(),
                    p.latency_s.to_string(),
                    p.power_w.to_string(),
                    (!p.dominated).to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<plot>", e))
}


#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A result with awkward floats to exercise exact round trips.
    pub(crate) fn sample(i: usize) -> BenchResult {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let lat: f64 = rng.random_range(1e-6..1e-1);
        let power: f64 = rng.random_range(1.0..200.0);
        let has_energy = i % 5 != 4;
        BenchResult {
            problem: format!("MB1_IC{}IH56_OC64OH56_KH3PH1", 8 + i),
            problem_name: (i % 3 == 0).then(|| format!("layer, \"{i}\"")),
            kernel: KernelId::ALL[i % 5],
            threads: 1 + i % 8,
            latency_min_s: lat * 0.9,
            latency_median_s: lat * 0.97,
            latency_mean_s: lat,
            latency_p95_s: lat * 1.1,
            mean_power_w: has_energy.then_some(power),
            energy_per_op_j: has_energy.then_some(power * lat),
            net_energy_per_op_j: (i % 2 == 0 && has_energy).then_some(power * lat / 3.0),
            baseline_power_w: (i % 2 == 0 && has_energy).then_some(power / 3.0),
            flops: 231_211_008 + i as u64,
            gflops: 231_211_008.0 / lat / 1e9,
            max_rel_diff: rng.random::<f64>() * 1e-6,
            warmup_iters: 200,
            measure_iters: 1000,
            window_start_s: 1000.0 + rng.random::<f64>(),
            window_end_s: 1002.0 + rng.random::<f64>(),
            timestamp: 1_790_000_000 + i as u64,
            host_name: "host".into(),
            host_cpus: 8,
            seed: i as u64,
            meter: "mock:10".into(),
            latency_only: !has_energy,
        }
    }
}
