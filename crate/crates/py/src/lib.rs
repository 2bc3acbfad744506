use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use wcps_core::analysis::{self, ClosedLoopEnsemble};
use wcps_core::control;
use wcps_core::linalg::{from_rows, to_rows};
use wcps_core::scenario::runner::static_schedule;
use wcps_core::scenario::trace::write_trace;
use wcps_core::scenario::{self, ScenarioConfig, SweepParam};
use wcps_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Validation(_) | Error::Json(_) | Error::Overload { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn parse(config: &str, seed: Option<u64>) -> PyResult<ScenarioConfig> {
    let mut cfg = ScenarioConfig::from_json(config).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Run a scenario given as JSON text and return the summary as JSON text.
/// The per-tick trace is written as CSV when `trace_path` is given.
#[pyfunction]
#[pyo3(signature = (config, seed=None, trace_path=None))]
fn run_scenario(py: Python<'_>, config: &str, seed: Option<u64>, trace_path: Option<&str>) -> PyResult<String> {
    let cfg = parse(config, seed)?;
    let out = py.detach(|| scenario::run_scenario(&cfg)).map_err(to_py)?;
    if let Some(p) = trace_path {
        write_trace(std::path::Path::new(p), &out.trace).map_err(to_py)?;
    }
    json(&out.summary)
}

/// Per-value medians and quartiles of a parameter sweep, as JSON text.
#[pyfunction]
fn sweep(py: Python<'_>, config: &str, param: &str, values: Vec<f64>, seeds: Vec<u64>) -> PyResult<String> {
    let cfg = parse(config, None)?;
    let param = SweepParam::from_name(param).map_err(to_py)?;
    let table = py.detach(|| scenario::sweep(&cfg, param, &values, &seeds)).map_err(to_py)?;
    json(&table.aggregates)
}

#[pyfunction]
fn check_stability(config: &str) -> PyResult<String> {
    json(&scenario::check_stability(&parse(config, None)?).map_err(to_py)?)
}

#[pyfunction]
fn synthesize_schedule(config: &str) -> PyResult<String> {
    json(&static_schedule(&parse(config, None)?).map_err(to_py)?)
}

/// Stabilizing solution of the discrete Riccati equation.
#[pyfunction]
fn solve_dare(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, q: Vec<Vec<f64>>, r: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = |rows: Vec<Vec<f64>>| from_rows(&rows).map_err(to_py);
    let p = control::solve_dare(&m(a)?, &m(b)?, &m(q)?, &m(r)?).map_err(to_py)?;
    Ok(to_rows(&p))
}

/// Spectral radius of the second-moment operator and the verdict for a
/// loop that applies `matrix` with probability `p` each step.
#[pyfunction]
fn mean_square_stable(members: Vec<(f64, Vec<Vec<f64>>)>) -> PyResult<(f64, bool)> {
    let members = members
        .into_iter()
        .map(|(p, a)| Ok((p, from_rows(&a).map_err(to_py)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let ens = ClosedLoopEnsemble::new(members).map_err(to_py)?;
    let report = analysis::mean_square_stable(&ens).map_err(to_py)?;
    Ok((report.spectral_radius, report.stable))
}

#[pyfunction]
#[pyo3(signature = (a_closed, a_open, tol=1e-9))]
fn scalar_stability_boundary(a_closed: f64, a_open: f64, tol: f64) -> PyResult<f64> {
    analysis::scalar_stability_boundary(a_closed, a_open, tol).map_err(to_py)
}

#[pymodule]
fn wcps(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(check_stability, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(solve_dare, m)?)?;
    m.add_function(wrap_pyfunction!(mean_square_stable, m)?)?;
    m.add_function(wrap_pyfunction!(scalar_stability_boundary, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
