//! Python bindings. Build with `maturin develop -m crates/py/Cargo.toml`
//! or `cargo build -p dse-sim-py --features extension-module` and copy the
//! shared library next to your script as `dse_sim_py.so`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;
use serde_json::Value;

use dse_sim::accel::ConvParams;
use dse_sim::cli::SuiteSpec;
use dse_sim::dse::StreamMode;
use dse_sim::sim::{self, Output};
use dse_sim::{agu, compiler, FeatureFlags};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_bound_py_any(py),
            (None, Some(u)) => u.into_bound_py_any(py),
            _ => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(a) => {
            let items = a
                .iter()
                .map(|x| json_to_py(py, x))
                .collect::<PyResult<Vec<_>>>()?;
            Ok(PyList::new(py, items)?.into_any())
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            Ok(d.into_any())
        }
    }
}

fn flags_for(level: u8) -> PyResult<FeatureFlags> {
    FeatureFlags::ladder(level)
        .ok_or_else(|| value_err(format!("ladder level {level} not in 1..=6")))
}

/// System configuration: memory geometry, core, stream designs and flags.
#[pyclass(name = "SystemConfig", module = "dse_sim_py", from_py_object)]
#[derive(Clone)]
struct PySystemConfig {
    inner: sim::SystemConfig,
}

#[pymethods]
impl PySystemConfig {
    #[new]
    #[pyo3(signature = (level = 6))]
    fn new(level: u8) -> PyResult<Self> {
        Ok(Self {
            inner: sim::SystemConfig::default().with_flags(flags_for(level)?),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: sim::SystemConfig = serde_json::from_str(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("plain data serializes")
    }

    /// Copy with ladder level `level`.
    fn with_level(&self, level: u8) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.clone().with_flags(flags_for(level)?),
        })
    }

    #[getter]
    fn level(&self) -> Option<u8> {
        self.inner.flags.level()
    }

    #[getter]
    fn flags(&self) -> String {
        self.inner.flags.label()
    }

    #[getter]
    fn num_banks(&self) -> usize {
        self.inner.memory.num_banks
    }

    #[getter]
    fn memory_bytes(&self) -> u64 {
        self.inner.bank_map().map(|m| m.size_bytes()).unwrap_or(0)
    }

    fn __repr__(&self) -> String {
        format!(
            "SystemConfig(flags={}, banks={}, latency={})",
            self.inner.flags.label(),
            self.inner.memory.num_banks,
            self.inner.memory.latency
        )
    }
}

/// A GeMM, transposed GeMM or convolution workload.
#[pyclass(name = "Workload", module = "dse_sim_py", from_py_object)]
#[derive(Clone)]
struct PyWorkload {
    inner: compiler::WorkloadSpec,
}

#[pymethods]
impl PyWorkload {
    #[staticmethod]
    #[pyo3(signature = (m, n, k, bias = false, quantize = false))]
    fn gemm(m: usize, n: usize, k: usize, bias: bool, quantize: bool) -> Self {
        let mut w = compiler::WorkloadSpec::gemm(m, n, k);
        w.bias = bias;
        w.quantize_output = quantize;
        Self { inner: w }
    }

    #[staticmethod]
    fn transposed_gemm(m: usize, n: usize, k: usize) -> Self {
        Self {
            inner: compiler::WorkloadSpec::transposed_gemm(m, n, k),
        }
    }

    /// Square-kernel convolution over an HWC input.
    #[staticmethod]
    #[pyo3(signature = (h, w, c_in, c_out, kernel, stride = 1, bias = false, quantize = false))]
    #[allow(clippy::too_many_arguments)]
    fn conv(
        h: usize,
        w: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        quantize: bool,
    ) -> Self {
        let mut spec = compiler::WorkloadSpec::conv(ConvParams {
            h,
            w,
            c_in,
            c_out,
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
        });
        spec.bias = bias;
        spec.quantize_output = quantize;
        Self { inner: spec }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("plain data serializes")
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.shape.kind_name()
    }

    #[getter]
    fn dims(&self) -> String {
        self.inner.shape.dims_label()
    }

    fn __repr__(&self) -> String {
        format!("Workload({})", self.inner.id)
    }
}

/// Outcome of one simulation.
#[pyclass(name = "RunResult", module = "dse_sim_py", frozen)]
struct PyRunResult {
    inner: sim::RunResult,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn correct(&self) -> bool {
        self.inner.correct
    }

    #[getter]
    fn utilization(&self) -> f64 {
        self.inner.metrics.utilization
    }

    #[getter]
    fn ideal_cycles(&self) -> u64 {
        self.inner.metrics.ideal_cycles
    }

    #[getter]
    fn active_cycles(&self) -> u64 {
        self.inner.metrics.active_cycles
    }

    #[getter]
    fn accesses(&self) -> u64 {
        self.inner.metrics.total_memory_accesses
    }

    #[getter]
    fn conflict_stall_cycles(&self) -> u64 {
        self.inner.metrics.conflict_stall_cycles
    }

    /// All metrics as a dict.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(
            py,
            &serde_json::to_value(&self.inner.metrics).expect("serializes"),
        )
    }

    /// Tensor placement as a dict.
    fn layout<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(
            py,
            &serde_json::to_value(&self.inner.layout).expect("serializes"),
        )
    }

    /// Simulated output, row-major: int32 values, or int8 when quantized.
    fn output(&self) -> Vec<i64> {
        match &self.inner.output {
            Output::Int32(v) => v.iter().map(|&x| x as i64).collect(),
            Output::Int8(v) => v.iter().map(|&x| x as i64).collect(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "RunResult(correct={}, utilization={:.4}, accesses={})",
            if self.inner.correct { "True" } else { "False" },
            self.inner.metrics.utilization,
            self.inner.metrics.total_memory_accesses
        )
    }
}

fn sim_err(e: sim::SimError) -> PyErr {
    match e {
        sim::SimError::Config(_) | sim::SimError::Data(_) | sim::SimError::Compile(_) => {
            value_err(e)
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Runs `workload` with random inputs drawn from `seed`.
#[pyfunction]
#[pyo3(signature = (system, workload, seed = 1))]
fn run(
    py: Python<'_>,
    system: &PySystemConfig,
    workload: &PyWorkload,
    seed: u64,
) -> PyResult<PyRunResult> {
    let (sys, w) = (system.inner.clone(), workload.inner.clone());
    let inner = py
        .detach(|| sim::run_seeded(&sys, &w, seed))
        .map_err(sim_err)?;
    Ok(PyRunResult { inner })
}

/// Runs `workload` on caller-provided int8 operands. `a` is M x K (K x M
/// for transposed GeMM, HWC input for conv), `b` is K x N (HWIO weights for
/// conv), `bias` has N (or Cout) entries.
#[pyfunction]
#[pyo3(signature = (system, workload, a, b, bias = None, quant = None))]
fn run_with_data(
    py: Python<'_>,
    system: &PySystemConfig,
    workload: &PyWorkload,
    a: Vec<i8>,
    b: Vec<i8>,
    bias: Option<Vec<i32>>,
    quant: Option<(i32, u8, i8)>,
) -> PyResult<PyRunResult> {
    let data = sim::WorkloadData {
        a,
        b,
        bias,
        quant: quant.map(
            |(multiplier, shift, zero_point)| dse_sim::accel::QuantSpec {
                multiplier,
                shift,
                zero_point,
            },
        ),
    };
    let (sys, w) = (system.inner.clone(), workload.inner.clone());
    let inner = py.detach(|| sim::run(&sys, &w, &data)).map_err(sim_err)?;
    Ok(PyRunResult { inner })
}

/// Runs every workload at every ladder level. Returns one dict per run.
#[pyfunction]
#[pyo3(signature = (system, workloads, levels = vec![1, 2, 3, 4, 5, 6], seed = 1))]
fn ablate<'py>(
    py: Python<'py>,
    system: &PySystemConfig,
    workloads: Vec<PyWorkload>,
    levels: Vec<u8>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let ladder = levels
        .into_iter()
        .map(flags_for)
        .collect::<PyResult<Vec<_>>>()?;
    let specs: Vec<_> = workloads.into_iter().map(|w| w.inner).collect();
    let sys = system.inner.clone();
    let rows = py.detach(|| sim::ablate(&sys, &specs, &ladder, seed));
    let records: Vec<Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "workload": r.workload.id,
                "kind": r.group(),
                "flags": r.flags.label(),
                "correct": r.result.as_ref().map(|x| x.correct).unwrap_or(false),
                "error": r.result.as_ref().err(),
                "metrics": r.metrics(),
            })
        })
        .collect();
    json_to_py(py, &Value::Array(records))
}

/// The deterministic synthetic suite; `spec_json` overrides the standard
/// composition.
#[pyfunction]
#[pyo3(signature = (seed = 1, spec_json = None))]
fn suite(seed: u64, spec_json: Option<&str>) -> PyResult<Vec<PyWorkload>> {
    let spec = match spec_json {
        Some(t) => serde_json::from_str::<SuiteSpec>(t).map_err(value_err)?,
        None => SuiteSpec::standard(),
    };
    Ok(spec
        .generate(seed)
        .into_iter()
        .map(|inner| PyWorkload { inner })
        .collect())
}

/// Addresses of an affine pattern: one list of lane addresses per step.
#[pyfunction]
#[pyo3(signature = (base, bounds, strides, spatial_bounds = vec![], spatial_strides = vec![]))]
fn address_sequence(
    base: u64,
    bounds: Vec<usize>,
    strides: Vec<i64>,
    spatial_bounds: Vec<usize>,
    spatial_strides: Vec<i64>,
) -> PyResult<Vec<Vec<i64>>> {
    let design = dse_sim::DseDesign {
        mode: StreamMode::Read,
        num_channels: spatial_bounds.iter().product(),
        max_temporal_dims: bounds.len(),
        spatial_bounds,
        address_buffer_depth: 1,
        data_buffer_depth: 1,
        bank_width_bits: 64,
        extensions: vec![],
    };
    let pattern = dse_sim::AccessPattern::new(base, bounds, strides, spatial_strides);
    let gen = agu::Agu::configure(&pattern, &design, u64::MAX >> 1).map_err(value_err)?;
    Ok(gen
        .map(|s| {
            s.spatial_offsets
                .iter()
                .map(|o| s.temporal_address as i64 + o)
                .collect()
        })
        .collect())
}

/// Bank mapping of a scratchpad geometry.
#[pyclass(name = "BankMap", module = "dse_sim_py", frozen)]
struct PyBankMap {
    inner: dse_sim::BankMap,
}

#[pymethods]
impl PyBankMap {
    #[new]
    fn new(
        bank_width_bits: u32,
        num_banks: usize,
        bank_depth_words: usize,
        group_options: Vec<usize>,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: dse_sim::BankMap::new(
                bank_width_bits,
                num_banks,
                bank_depth_words,
                group_options,
            )
            .map_err(value_err)?,
        })
    }

    /// (bank, wordline, byte offset) of `address` under mode option `mode`.
    fn locate(&self, address: u64, mode: usize) -> PyResult<(usize, usize, usize)> {
        let l = self.inner.map_with(mode, address).map_err(value_err)?;
        Ok((l.bank, l.wordline, l.byte_offset))
    }

    #[getter]
    fn size_bytes(&self) -> u64 {
        self.inner.size_bytes()
    }
}

#[pymodule]
fn dse_sim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySystemConfig>()?;
    m.add_class::<PyWorkload>()?;
    m.add_class::<PyRunResult>()?;
    m.add_class::<PyBankMap>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(run_with_data, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(suite, m)?)?;
    m.add_function(wrap_pyfunction!(address_sequence, m)?)?;
    Ok(())
}
