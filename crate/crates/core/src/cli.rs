//! Command-line front end. Human summaries go to stdout; machine records
//! go only to the files named by `--out`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::bench::{self, BenchConfig, BenchResult, CaseOutcome, CaseStatus, Harness};
use crate::energy::{self, compare_meters, EnergyError, MeterSpec};
use crate::error::Error;
use crate::kernel::KernelId;
use crate::problem::{self, ConvProblem};
use crate::report::{self, ExportFormat, PlotAxes};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_CORRECTNESS: i32 = 3;
pub const EXIT_METER: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "convbench", version, about = "CPU convolution latency / power / energy benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Benchmark one kernel on one problem.
    Run {
        descriptor: String,
        #[arg(long, default_value = "direct", value_parser = parse_kernel)]
        kernel: KernelId,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Benchmark problems × kernels × thread counts, one case at a time.
    Sweep {
        #[arg(required = true)]
        descriptors: Vec<String>,
        #[arg(long, default_value = "all", value_parser = parse_kernels)]
        kernels: KernelList,
        #[arg(long = "threads-list", default_value = "1", value_delimiter = ',')]
        threads_list: Vec<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Benchmark the ResNet50v1.5 convolution layers.
    Suite {
        /// Print the layer list as JSON and exit.
        #[arg(long)]
        list: bool,
        #[arg(long, default_value = "all", value_parser = parse_kernels)]
        kernels: KernelList,
        #[arg(long = "threads-list", default_value = "1", value_delimiter = ',')]
        threads_list: Vec<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Parse a descriptor and print its canonical form and shape.
    Parse { descriptor: String },
    /// Pareto frontier of recorded results (CSV or JSON lines).
    Pareto {
        input: PathBuf,
        /// Write plot-ready CSV for `energy-vs-threads` or `latency-vs-power`.
        #[arg(long, value_parser = parse_axes)]
        plot: Option<PlotAxes>,
        #[arg(long, requires = "plot")]
        plot_out: Option<PathBuf>,
        /// Re-export the results (format from the extension).
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Show which meters are usable on this host.
    Meters,
    /// Measure one case with two meters over the same window.
    CompareMeters {
        descriptor: String,
        #[arg(long = "meter-a", value_parser = parse_meter)]
        meter_a: MeterSpec,
        #[arg(long = "meter-b", value_parser = parse_meter)]
        meter_b: MeterSpec,
        #[arg(long, default_value = "direct", value_parser = parse_kernel)]
        kernel: KernelId,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUP_ITERS)]
        warmup: usize,
        #[arg(long, default_value_t = bench::DEFAULT_MEASURE_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// none, mock:<watts>, counter[:<dir>] or trace:<file>[:offset_s]
    #[arg(long, default_value = "none", value_parser = parse_meter)]
    pub meter: MeterSpec,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP_ITERS)]
    pub warmup: usize,
    #[arg(long, default_value_t = bench::DEFAULT_MEASURE_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON-lines sink; appended to, and used to resume sweeps.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CPU list for worker pinning, e.g. `0-3` or `0,2,4,6`.
    #[arg(long, value_parser = parse_cpu_list)]
    pub pin: Option<CpuList>,
    /// Report latency only when the meter fails instead of aborting.
    #[arg(long)]
    pub allow_latency_only: bool,
    /// Seconds of idle sampling for baseline power (at least 1).
    #[arg(long)]
    pub baseline_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelList(pub Vec<KernelId>);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CpuList(pub Vec<usize>);

fn parse_kernel(s: &str) -> Result<KernelId, String> {
    s.parse()
}

fn parse_kernels(s: &str) -> Result<KernelList, String> {
    KernelId::parse_list(s).map(KernelList)
}

fn parse_meter(s: &str) -> Result<MeterSpec, String> {
    s.parse().map_err(|e: EnergyError| e.to_string())
}

fn parse_axes(s: &str) -> Result<PlotAxes, String> {
    s.parse()
}

/// Comma-separated CPU ids and inclusive ranges.
pub fn parse_cpu_list(s: &str) -> Result<CpuList, String> {
    let mut cpus = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let bad = || format!("invalid CPU list entry '{part}'");
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                cpus.extend(a..=b);
            }
            None => cpus.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(CpuList(cpus))
}

impl CommonArgs {
    fn config(&self, kernels: Vec<KernelId>, threads: Vec<usize>) -> Result<BenchConfig, Error> {
        let idle_baseline = match self.baseline_s {
            Some(s) if s.is_finite() && s >= 0.0 => Some(Duration::from_secs_f64(s)),
            Some(s) => return Err(Error::Config(format!("invalid --baseline-s {s}"))),
            None => None,
        };
        Ok(BenchConfig {
            warmup_iters: self.warmup,
            measure_iters: self.iters,
            threads,
            kernels,
            meter: self.meter.clone(),
            pin: self.pin.clone().map(|c| c.0),
            seed: self.seed,
            allow_latency_only: self.allow_latency_only,
            idle_baseline,
        })
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Descriptor(_) | Error::Config(_) => EXIT_PARSE,
        Error::Unsupported { .. } | Error::Correctness { .. } => EXIT_CORRECTNESS,
        Error::Energy(_) => EXIT_METER,
        _ => EXIT_IO,
    }
}

fn fmt_opt(v: Option<f64>, scale: f64, unit: &str) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.3} {unit}", v * scale))
}

fn summary_line(r: &BenchResult) -> String {
    format!(
        "{} kernel={} threads={} mean={:.3} ms p95={:.3} ms gflops={:.2} energy/op={} power={}{}",
        r.problem_name.as_deref().unwrap_or(&r.problem),
        r.kernel,
        r.threads,
        r.latency_mean_s * 1e3,
        r.latency_p95_s * 1e3,
        r.gflops,
        fmt_opt(r.energy_per_op_j, 1e3, "mJ"),
        fmt_opt(r.mean_power_w, 1.0, "W"),
        if r.latency_only { " (latency only)" } else { "" },
    )
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(stderr, "{text}")
            } else {
                write!(stdout, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli.command, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn parse(descriptor: &str) -> Result<ConvProblem, Error> {
    Ok(problem::parse_descriptor(descriptor)?)
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Error> {
    match cmd {
        Command::Run {
            descriptor,
            kernel,
            threads,
            common,
        } => {
            let p = parse(&descriptor)?;
            let cfg = common.config(vec![kernel], vec![threads])?;
            let mut h = Harness::new(cfg)?;
            warn_meter(&h, err);
            let r = h.run_case(&p, kernel, threads)?;
            if let Some(path) = &common.out {
                append_records(path, std::slice::from_ref(&r))?;
            }
            line(out, &summary_line(&r))?;
            Ok(EXIT_OK)
        }
        Command::Sweep {
            descriptors,
            kernels,
            threads_list,
            common,
        } => {
            let problems = descriptors.iter().map(|d| parse(d)).collect::<Result<Vec<_>, _>>()?;
            let cfg = common.config(kernels.0, threads_list)?;
            sweep(&problems, cfg, common.out.as_deref(), out, err, false)
        }
        Command::Suite {
            list,
            kernels,
            threads_list,
            common,
        } => {
            if list {
                line(out, &problem::suite_json())?;
                return Ok(EXIT_OK);
            }
            let cfg = common.config(kernels.0, threads_list)?;
            sweep(&problem::resnet50_conv_suite(), cfg, common.out.as_deref(), out, err, true)
        }
        Command::Parse { descriptor } => {
            let p = parse(&descriptor)?;
            line(out, &p.descriptor())?;
            line(
                out,
                &format!(
                    "mb={} ic={} ih={} iw={} oc={} oh={} ow={} kh={} kw={} sh={} sw={} ph={} pw={}",
                    p.mb, p.ic, p.ih, p.iw, p.oc, p.oh, p.ow, p.kh, p.kw, p.sh, p.sw, p.ph, p.pw
                ),
            )?;
            line(out, &format!("flops={}", p.flops()))?;
            let wino = KernelId::Wino.supports(&p).map_or_else(|r| format!("no ({r})"), |_| "yes".into());
            line(out, &format!("winograd={wino}"))?;
            Ok(EXIT_OK)
        }
        Command::Pareto {
            input,
            plot,
            plot_out,
            export,
        } => {
            let results = report::import(&input, ExportFormat::from_path(&input))?;
            let points = report::pareto_points(&results);
            if points.is_empty() {
                return Err(Error::Config(format!(
                    "{}: no results with power figures",
                    input.display()
                )));
            }
            let frontier = report::pareto_frontier(&points)?;
            line(out, &format!("{} points, {} on the frontier:", points.len(), frontier.len()))?;
            for p in &frontier {
                line(
                    out,
                    &format!("  {:<48} {:>10.3} ms {:>8.2} W", p.label, p.latency_s * 1e3, p.power_w),
                )?;
            }
            if let Some(axes) = plot {
                let path = plot_out.unwrap_or_else(|| PathBuf::from(format!("{axes}.csv")));
                let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                report::emit_plot_series(&results, axes, std::io::BufWriter::new(file))?;
                line(out, &format!("wrote {axes} series to {}", path.display()))?;
            }
            if let Some(path) = export {
                report::export(&results, &path, ExportFormat::from_path(&path))?;
                line(out, &format!("exported {} results to {}", results.len(), path.display()))?;
            }
            Ok(EXIT_OK)
        }
        Command::Meters => {
            line(out, "mock:<watts>      available (synthetic constant power)")?;
            let dir = energy::CounterMeter::default_dir();
            let status = match energy::CounterMeter::open(&dir) {
                Ok(_) => "available".to_string(),
                Err(e) => format!("unavailable ({e})"),
            };
            line(
                out,
                &format!("counter:<dir>     {status} [default {}; override with ${}]", dir.display(), energy::POWERCAP_ENV),
            )?;
            line(out, "trace:<file>[:s]  available (CSV timestamp_s,watts at 1-5 kHz)")?;
            Ok(EXIT_OK)
        }
        Command::CompareMeters {
            descriptor,
            meter_a,
            meter_b,
            kernel,
            threads,
            warmup,
            iters,
            seed,
        } => {
            let p = parse(&descriptor)?;
            let build = |spec: &MeterSpec| -> Result<Box<dyn energy::Meter>, Error> {
                match spec.build() {
                    Ok(Some(m)) => Ok(m),
                    Ok(None) => Err(Error::Config("compare-meters needs two real meters, not 'none'".into())),
                    Err(e) => Err(EnergyError::Meter {
                        name: spec.to_string(),
                        msg: e.to_string(),
                    }
                    .into()),
                }
            };
            let mut a = build(&meter_a)?;
            let mut b = build(&meter_b)?;
            let cfg = BenchConfig {
                warmup_iters: warmup,
                measure_iters: iters,
                threads: vec![threads],
                kernels: vec![kernel],
                seed,
                ..BenchConfig::default()
            };
            let c = bench::compare_case(&p, kernel, threads, &cfg, a.as_mut(), b.as_mut())?;
            let cmp = compare_meters(&c.a, &c.b)?;
            line(
                out,
                &format!(
                    "{} kernel={} threads={} window={:.3} s",
                    p.descriptor(),
                    kernel,
                    threads,
                    c.a.duration()
                ),
            )?;
            line(
                out,
                &format!("a {:<28} energy={:.6} J power={:.3} W", meter_a.to_string(), c.a.energy_j, c.a.mean_power_w),
            )?;
            line(
                out,
                &format!("b {:<28} energy={:.6} J power={:.3} W", meter_b.to_string(), c.b.energy_j, c.b.mean_power_w),
            )?;
            line(
                out,
                &format!(
                    "energy ratio a/b={:.4} power ratio a/b={:.4} underestimation={:.4}",
                    cmp.energy_ratio, cmp.power_ratio, cmp.underestimation
                ),
            )?;
            Ok(EXIT_OK)
        }
    }
}

fn line(out: &mut dyn Write, s: &str) -> Result<(), Error> {
    writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
}

fn warn_meter(h: &Harness, err: &mut dyn Write) {
    if let Some(m) = h.meter_error() {
        let _ = writeln!(err, "warning: meter unavailable, recording latency only: {m}");
    }
}

fn append_records(path: &std::path::Path, results: &[BenchResult]) -> Result<(), Error> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    report::write_json_lines(results, std::io::BufWriter::new(file))
}

fn sweep(
    problems: &[ConvProblem],
    cfg: BenchConfig,
    sink: Option<&std::path::Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
    totals: bool,
) -> Result<i32, Error> {
    let mut h = Harness::new(cfg)?;
    warn_meter(&h, err);
    let mut io_error = None;
    let outcomes = h.sweep(problems, sink, |o| {
        let text = match o {
            CaseOutcome::Done(r) => summary_line(r),
            CaseOutcome::Resumed(r) => format!("{} (resumed)", summary_line(r)),
            CaseOutcome::Failed { key, status, message } => format!(
                "{} kernel={} threads={} {}: {message}",
                key.problem,
                key.kernel,
                key.threads,
                status.as_str()
            ),
        };
        if let Err(e) = line(out, &text) {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    let results: Vec<&BenchResult> = outcomes.iter().filter_map(CaseOutcome::result).collect();
    let failed = |s: CaseStatus| outcomes.iter().any(|o| matches!(o, CaseOutcome::Failed { status, .. } if *status == s));
    let unsupported = outcomes
        .iter()
        .filter(|o| matches!(o, CaseOutcome::Failed { status: CaseStatus::Unsupported, .. }))
        .count();
    line(
        out,
        &format!(
            "{} results, {} unsupported, {} failed",
            results.len(),
            unsupported,
            outcomes.len() - results.len() - unsupported
        ),
    )?;
    if totals {
        // One ResNet50v1.5 pass per (kernel, threads) configuration.
        let mut groups: std::collections::BTreeMap<(KernelId, usize), (usize, f64, Option<f64>, u64)> = Default::default();
        for r in &results {
            let g = groups.entry((r.kernel, r.threads)).or_insert((0, 0.0, Some(0.0), 0));
            g.0 += 1;
            g.1 += r.latency_mean_s;
            g.2 = g.2.zip(r.energy_per_op_j).map(|(a, b)| a + b);
            g.3 += r.flops;
        }
        for ((k, t), (n, lat, energy, flops)) in groups {
            line(
                out,
                &format!(
                    "total kernel={k} threads={t} layers={n} latency={:.3} ms energy={} flops={flops}",
                    lat * 1e3,
                    fmt_opt(energy, 1.0, "J"),
                ),
            )?;
        }
    }
    Ok(if failed(CaseStatus::CorrectnessFailure) {
        EXIT_CORRECTNESS
    } else if failed(CaseStatus::MeterFailure) {
        EXIT_METER
    } else if failed(CaseStatus::Error) {
        EXIT_IO
    } else {
        EXIT_OK
    })
}
