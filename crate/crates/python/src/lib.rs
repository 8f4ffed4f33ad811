//! Python bindings: descriptors, the layer suite, kernels against the
//! oracle, harness runs with any meter, energy integration and Pareto
//! fronts.

use convbench::bench::{BenchConfig, Harness};
use convbench::energy::{self, MeterSpec, PowerSample, PowerTrace, TraceSource};
use convbench::report::{self, ParetoPoint};
use convbench::winograd;
use convbench::{ConvInputs, ConvProblem, Error, KernelId, Tensor4D};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Descriptor(_) | Error::Config(_) | Error::Shape(_) | Error::Unsupported { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn energy_err(e: energy::EnergyError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn kernel(name: &str) -> PyResult<KernelId> {
    name.parse().map_err(PyValueError::new_err)
}

#[pyclass(name = "Problem", frozen, eq, hash, skip_from_py_object)]
#[derive(Clone, PartialEq, Eq, Hash)]
struct PyProblem(ConvProblem);

#[pymethods]
impl PyProblem {
    #[new]
    fn new(descriptor: &str) -> PyResult<Self> {
        convbench::parse_descriptor(descriptor)
            .map(PyProblem)
            .map_err(|e| py_err(e.into()))
    }

    #[getter]
    fn name(&self) -> Option<String> {
        self.0.name.clone()
    }

    /// `(mb, ic, ih, iw, oc, oh, ow, kh, kw, sh, sw, ph, pw)`
    #[getter]
    fn shape(&self) -> [usize; 13] {
        let p = &self.0;
        [p.mb, p.ic, p.ih, p.iw, p.oc, p.oh, p.ow, p.kh, p.kw, p.sh, p.sw, p.ph, p.pw]
    }

    #[getter]
    fn src_dims(&self) -> [usize; 4] {
        self.0.src_dims()
    }

    #[getter]
    fn wei_dims(&self) -> [usize; 4] {
        self.0.wei_dims()
    }

    #[getter]
    fn dst_dims(&self) -> [usize; 4] {
        self.0.dst_dims()
    }

    fn descriptor(&self) -> String {
        convbench::format_descriptor(&self.0)
    }

    fn flops(&self) -> u64 {
        self.0.flops()
    }

    fn macs(&self) -> u64 {
        self.0.macs()
    }

    fn __str__(&self) -> String {
        self.descriptor()
    }

    fn __repr__(&self) -> String {
        format!("Problem('{}')", self.descriptor())
    }
}

#[pyfunction]
fn parse_descriptor(descriptor: &str) -> PyResult<PyProblem> {
    PyProblem::new(descriptor)
}

#[pyfunction]
fn resnet50_suite() -> Vec<PyProblem> {
    convbench::resnet50_conv_suite().into_iter().map(PyProblem).collect()
}

#[pyfunction]
fn featured_layer() -> PyProblem {
    PyProblem(convbench::featured_layer())
}

#[pyfunction]
fn kernels() -> Vec<String> {
    KernelId::ALL.iter().map(|k| k.to_string()).collect()
}

/// Multiplications performed by `kernel` on `problem` (Winograd counts its
/// element-wise products; the others count MACs).
#[pyfunction]
fn mult_count(problem: &PyProblem, kernel_name: &str) -> PyResult<u64> {
    winograd::mult_count(&problem.0, kernel(kernel_name)?).map_err(py_err)
}

/// Runs `kernel` on flat plain-layout `src`/`wei` buffers and returns the
/// flat output.
#[pyfunction]
#[pyo3(signature = (problem, src, wei, bias=None, kernel_name="naive", threads=1))]
fn conv2d(
    py: Python<'_>,
    problem: &PyProblem,
    src: Vec<f32>,
    wei: Vec<f32>,
    bias: Option<Vec<f32>>,
    kernel_name: &str,
    threads: usize,
) -> PyResult<Vec<f32>> {
    let k = kernel(kernel_name)?;
    let p = problem.0.clone();
    py.detach(move || -> convbench::Result<Vec<f32>> {
        let inputs = ConvInputs::new(
            Tensor4D::from_vec(p.src_dims(), src)?,
            Tensor4D::from_vec(p.wei_dims(), wei)?,
            bias,
        );
        Ok(convbench::run_kernel(k, &p, &inputs, threads)?.into_data())
    })
    .map_err(py_err)
}

/// Max relative difference between `kernel` and the naive oracle on seeded
/// inputs. `uniform` selects continuous instead of dyadic data.
#[pyfunction]
#[pyo3(signature = (problem, kernel_name, threads=1, seed=0, uniform=false))]
fn verify_kernel(
    py: Python<'_>,
    problem: &PyProblem,
    kernel_name: &str,
    threads: usize,
    seed: u64,
    uniform: bool,
) -> PyResult<f64> {
    let k = kernel(kernel_name)?;
    let p = problem.0.clone();
    py.detach(move || -> convbench::Result<f64> {
        let inputs = if uniform {
            ConvInputs::random_uniform(&p, seed)?
        } else {
            ConvInputs::random(&p, seed)?
        };
        let want = convbench::conv_naive(&p, &inputs)?;
        let got = convbench::run_kernel(k, &p, &inputs, threads)?;
        convbench::max_rel_diff(&want, &got)
    })
    .map_err(py_err)
}

/// Benchmarks one case and returns the result record as a dict. `meter`
/// uses the CLI syntax: `none`, `mock:<watts>`, `counter[:<dir>]`,
/// `trace:<file>[:offset_s]`.
#[pyfunction]
#[pyo3(signature = (problem, kernel_name="direct", threads=1, meter="none", warmup=10, iters=50, seed=0, allow_latency_only=false))]
#[allow(clippy::too_many_arguments)]
fn run_case<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    kernel_name: &str,
    threads: usize,
    meter: &str,
    warmup: usize,
    iters: usize,
    seed: u64,
    allow_latency_only: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let k = kernel(kernel_name)?;
    let spec: MeterSpec = meter.parse().map_err(energy_err)?;
    let p = problem.0.clone();
    let cfg = BenchConfig {
        warmup_iters: warmup,
        measure_iters: iters,
        threads: vec![threads],
        kernels: vec![k],
        meter: spec,
        seed,
        allow_latency_only,
        ..BenchConfig::default()
    };
    let json = py
        .detach(move || -> convbench::Result<String> {
            let mut h = Harness::new(cfg)?;
            let r = h.run_case(&p, k, threads)?;
            Ok(serde_json::to_string(&r)?)
        })
        .map_err(py_err)?;
    py.import("json")?.call_method1("loads", (json,))
}

/// Trapezoidal energy of `(t, watts)` samples over `[t0, t1]`.
#[pyfunction]
fn integrate<'py>(
    py: Python<'py>,
    times: Vec<f64>,
    watts: Vec<f64>,
    t0: f64,
    t1: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if times.len() != watts.len() {
        return Err(PyValueError::new_err("times and watts differ in length"));
    }
    let samples = times.into_iter().zip(watts).map(|(t, p)| PowerSample { t, p }).collect();
    let trace = PowerTrace::new(samples, TraceSource::ExternalFile).map_err(energy_err)?;
    let r = energy::integrate(&trace, t0, t1).map_err(energy_err)?;
    let d = PyDict::new(py);
    d.set_item("energy_j", r.energy_j)?;
    d.set_item("mean_power_w", r.mean_power_w)?;
    d.set_item("duration_s", r.duration())?;
    Ok(d)
}

/// Reads a `timestamp_s,watts` trace file; returns `(times, watts, rate_hz,
/// warning)`.
#[pyfunction]
fn ingest_trace(path: &str) -> PyResult<(Vec<f64>, Vec<f64>, f64, Option<String>)> {
    let ing = energy::ingest_power_trace(path).map_err(energy_err)?;
    let (t, p) = ing.trace.samples().iter().map(|s| (s.t, s.p)).unzip();
    Ok((t, p, ing.rate_hz, ing.rate_warning))
}

/// Labels of the non-dominated `(label, latency_s, power_w)` points, by
/// ascending latency.
#[pyfunction]
fn pareto_frontier(points: Vec<(String, f64, f64)>) -> PyResult<Vec<String>> {
    let pts: Vec<ParetoPoint> = points.into_iter().map(|(l, t, p)| ParetoPoint::new(l, t, p)).collect();
    Ok(report::pareto_frontier(&pts)
        .map_err(py_err)?
        .into_iter()
        .map(|p| p.label)
        .collect())
}

#[pymodule]
fn pyconvbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(parse_descriptor, m)?)?;
    m.add_function(wrap_pyfunction!(resnet50_suite, m)?)?;
    m.add_function(wrap_pyfunction!(featured_layer, m)?)?;
    m.add_function(wrap_pyfunction!(kernels, m)?)?;
    m.add_function(wrap_pyfunction!(mult_count, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(verify_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(run_case, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_trace, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_frontier, m)?)?;
    Ok(())
}
