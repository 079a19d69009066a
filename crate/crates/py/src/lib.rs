// SPDX-License-Identifier: Apache-2.0

//! Python bindings. Reports cross the boundary as plain dicts and lists.

use std::cell::RefCell;
use std::path::Path;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use prlsim::estimator::{self, EstimatorParams, EPSILON_MAX_ITERATIONS};
use prlsim::mmu::WalkEvent;
use prlsim::tracker::{Observed, VmId};
use prlsim::{scenario, MemAccess, Op, SimError, TrackingConfig, WorkloadSpec};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_err(e: SimError) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        value_err(e)
    }
}

fn to_python<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_op(op: &str) -> PyResult<Op> {
    match op {
        "R" | "r" => Ok(Op::Read),
        "W" | "w" => Ok(Op::Write),
        other => Err(value_err(format!("op must be 'R' or 'W', got {other:?}"))),
    }
}

fn accesses_from(rows: Vec<(u64, u32, u64, String)>) -> PyResult<Vec<MemAccess>> {
    rows.into_iter().map(|(t, vcpu, gppn, op)| Ok(MemAccess { t, vcpu, gppn, op: parse_op(&op)? })).collect()
}

/// Synthetic trace as a list of `(t_ns, vcpu, gppn, "R"|"W")` tuples.
#[pyfunction]
#[pyo3(signature = (pattern, pages, hot_pages=None, iters=1, wi=50, cold_prefix=false, seed=0, gap_ns=100))]
#[allow(clippy::too_many_arguments)]
fn generate(
    pattern: &str,
    pages: u64,
    hot_pages: Option<u64>,
    iters: u64,
    wi: u32,
    cold_prefix: bool,
    seed: u64,
    gap_ns: u64,
) -> PyResult<Vec<(u64, u32, u64, char)>> {
    let spec = WorkloadSpec {
        pattern: pattern.parse().map_err(value_err)?,
        n_pages: pages,
        hot_pages: hot_pages.unwrap_or(pages),
        d_iters: iters,
        wi,
        cold_prefix,
        seed,
        inter_access_gap: gap_ns,
    };
    let trace = prlsim::generate(&spec).map_err(value_err)?;
    Ok(trace.accesses.iter().map(|a| (a.t, a.vcpu, a.gppn, a.op.code())).collect())
}

/// Number of pages accessed at least `tau` times.
#[pyfunction]
fn oracle_wss(accesses: Vec<(u64, u32, u64, String)>, tau: u64) -> PyResult<u64> {
    let params = EstimatorParams { tau, ..EstimatorParams::default() };
    params.validate().map_err(value_err)?;
    Ok(estimator::estimate_oracle(accesses_from(accesses)?, &params).wss_pages)
}

/// Shrinks memory by 5% from `start` while `boots_ok` accepts it.
#[pyfunction]
#[pyo3(signature = (boots_ok, start, max_iterations=EPSILON_MAX_ITERATIONS))]
fn estimate_epsilon(boots_ok: &Bound<'_, PyAny>, start: f64, max_iterations: usize) -> PyResult<f64> {
    let failure: RefCell<Option<PyErr>> = RefCell::new(None);
    let result = estimator::estimate_epsilon(
        |m| {
            if failure.borrow().is_some() {
                return false;
            }
            match boots_ok.call1((m,)).and_then(|r| r.is_truthy()) {
                Ok(ok) => ok,
                Err(e) => {
                    *failure.borrow_mut() = Some(e);
                    false
                }
            }
        },
        start,
        max_iterations,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    result.map_err(value_err)
}

/// A simulation scenario; keys match the scenario file format.
#[pyclass(name = "Scenario")]
struct PyScenario {
    inner: prlsim::Scenario,
}

#[pymethods]
impl PyScenario {
    /// `Scenario(pattern="rwrw", pages=1024, mode="pml", mu="1ms", ...)`
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut text = String::new();
        if let Some(kwargs) = kwargs {
            for (k, v) in kwargs.iter() {
                let value = if v.is_instance_of::<pyo3::types::PyBool>() {
                    v.extract::<bool>()?.to_string()
                } else {
                    v.str()?.to_string()
                };
                text.push_str(&format!("{} = {}\n", k.str()?, value));
            }
        }
        Self::from_text(&text, None)
    }

    #[staticmethod]
    #[pyo3(signature = (text, base_dir=None))]
    fn from_text(text: &str, base_dir: Option<&str>) -> PyResult<Self> {
        let inner = scenario::parse(text, base_dir.map(Path::new)).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        match scenario::load(Path::new(path)) {
            Ok(inner) => Ok(Self { inner }),
            Err(e @ scenario::ScenarioError::Io { .. }) => Err(PyOSError::new_err(e.to_string())),
            Err(e) => Err(value_err(e)),
        }
    }

    /// The scenario in file format.
    fn render(&self) -> String {
        scenario::render(&self.inner)
    }

    /// Full run report as a dict.
    fn run(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let report = py.detach(|| prlsim::run(&self.inner)).map_err(sim_err)?;
        to_python(py, &report)
    }

    /// Run report in the CLI's `key,value` CSV form.
    fn report_csv(&self, py: Python<'_>) -> PyResult<String> {
        let report = py.detach(|| prlsim::run(&self.inner)).map_err(sim_err)?;
        Ok(prlsim::report::report_csv(&report))
    }

    /// One dict per estimator: PRL, PML, VMware, Oracle.
    fn compare(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let cmp = py.detach(|| prlsim::run_paired(&self.inner)).map_err(sim_err)?;
        to_python(py, &cmp.rows)
    }

    /// The dist[i] series of the logging estimator.
    fn dist(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let report = py.detach(|| prlsim::run(&self.inner)).map_err(sim_err)?;
        let run = report.loop_run().ok_or_else(|| value_err("no PRL or PML estimator in this scenario"))?;
        to_python(py, run)
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?})", scenario::render(&self.inner))
    }
}

/// One vCPU's logging hardware, driven walk by walk.
#[pyclass(name = "Tracker")]
struct PyTracker {
    inner: prlsim::Tracker,
}

#[pymethods]
impl PyTracker {
    #[new]
    #[pyo3(signature = (mode="paml", buffer_entries=512, vmexit_cost_ns=4000, handler_latency_ns=20, vcpu=0))]
    fn new(mode: &str, buffer_entries: usize, vmexit_cost_ns: u64, handler_latency_ns: u64, vcpu: u32) -> PyResult<Self> {
        let config = TrackingConfig {
            mode: mode.parse().map_err(value_err)?,
            buffer_entries,
            vmexit_cost_ns,
            handler_latency_per_entry_ns: handler_latency_ns,
        };
        let inner = prlsim::Tracker::new(config, VmId(0), vcpu).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Presents one EPT walk. Returns `("logged"|"dropped"|"ignored", None)`
    /// or `("full", entries)` when the walk raised a full event.
    #[pyo3(signature = (gppn, t, op="R", dirty_set=false))]
    fn observe(&mut self, gppn: u64, t: u64, op: &str, dirty_set: bool) -> PyResult<(&'static str, Option<Vec<u64>>)> {
        let access = MemAccess { t, vcpu: self.inner.vcpu(), gppn, op: parse_op(op)? };
        let outcome = self.inner.observe(&WalkEvent { access, dirty_set }, t).map_err(value_err)?;
        Ok(match outcome {
            Observed::Logged => ("logged", None),
            Observed::Dropped => ("dropped", None),
            Observed::Ignored => ("ignored", None),
            Observed::FullEventRaised(e) => ("full", Some(e.entries)),
        })
    }

    fn reset_index(&mut self) -> PyResult<()> {
        self.inner.reset_index().map_err(value_err)
    }

    fn drain_residual(&mut self) -> PyResult<Vec<u64>> {
        self.inner.drain_residual().map_err(value_err)
    }

    #[getter]
    fn index(&self) -> i64 {
        self.inner.index()
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_python(py, &self.inner.stats())
    }
}

#[pymodule]
pub fn prlsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_wss, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_epsilon, m)?)?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyTracker>()?;
    m.add("PAGE_SIZE", prlsim::PAGE_SIZE)?;
    Ok(())
}
