//! Python bindings. Reports come back as plain dicts and lists, built from
//! the same JSON documents the command line writes.

use std::path::Path;

use blochspec_core::bands;
use blochspec_core::cli::{self, Cli, Tolerances};
use blochspec_core::error::Error;
use blochspec_core::expansion::ExpansionParams;
use blochspec_core::galerkin;
use blochspec_core::operator::OperatorSpec;
use blochspec_core::pipeline::{self, SearchParams};
use blochspec_core::singular::{self, ClassifyParams};
use blochspec_core::testfn::TestFunction;
use clap::Parser;
use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde_json::{json, Value};

create_exception!(blochspec, NumericalError, PyException);

fn to_py_err(e: Error) -> PyErr {
    let doc = cli::error_json(&e).to_string();
    if e.is_numerical() {
        NumericalError::new_err(doc)
    } else {
        PyValueError::new_err(doc)
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (v.to_string(),))?.unbind())
}

/// Accepts an operator document or a path to one.
fn load_operator(operator: &str) -> PyResult<OperatorSpec> {
    let spec = if operator.trim_start().starts_with('{') {
        OperatorSpec::from_json_str(operator)
    } else {
        OperatorSpec::from_json_file(Path::new(operator))
    };
    spec.map_err(to_py_err)
}

fn test_function(spec: &OperatorSpec, descriptor: Option<&str>) -> PyResult<TestFunction> {
    match descriptor {
        Some(text) => {
            let tf: cli::TestFunctionConfig =
                serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("test_function: {e}")))?;
            tf.build(spec.m).map_err(to_py_err)
        }
        None => TestFunction::bump((-1.0, 1.0), vec![Complex64::new(1.0, 0.0); spec.m]).map_err(to_py_err),
    }
}

fn c2(z: Complex64) -> [f64; 2] {
    [z.re, z.im]
}

/// Bloch eigenpairs at quasimomentum `t`, sorted by modulus then argument.
#[pyfunction]
#[pyo3(signature = (operator, t, k_trunc = 16))]
fn eigenpairs(py: Python<'_>, operator: &str, t: f64, k_trunc: usize) -> PyResult<Py<PyAny>> {
    let spec = load_operator(operator)?;
    let pairs = py.detach(|| galerkin::solve_eigen(&spec, Complex64::new(t, 0.0), k_trunc)).map_err(to_py_err)?;
    let doc: Vec<Value> = pairs
        .iter()
        .map(|p| {
            let (k, j) = p.dominant_mode();
            json!({"lambda": c2(p.lambda), "alpha": p.alpha.re, "k": k, "j": j + 1})
        })
        .collect();
    to_py(py, &Value::Array(doc))
}

/// Tracked bands: the summary document plus `lambda` samples per band.
#[pyfunction]
#[pyo3(signature = (operator, k_trunc = 32, t_grid_size = 64))]
fn track_bands(py: Python<'_>, operator: &str, k_trunc: usize, t_grid_size: usize) -> PyResult<Py<PyAny>> {
    let spec = load_operator(operator)?;
    let set = py.detach(|| bands::track_bands(&spec, k_trunc, &bands::default_t_grid(t_grid_size))).map_err(to_py_err)?;
    let mut doc = cli::bands_json(&set, &spec).map_err(to_py_err)?;
    doc["t_grid"] = json!(set.t_grid);
    for (b, out) in set.bands.iter().zip(doc["bands"].as_array_mut().expect("bands array")) {
        out["lambda"] = json!(b.lambda.iter().map(|z| c2(*z)).collect::<Vec<_>>());
        out["alpha"] = json!(b.alpha);
    }
    to_py(py, &doc)
}

/// Closed-form comparison (when available) and the monodromy cross-check.
#[pyfunction]
#[pyo3(signature = (operator, k_trunc = 32, t_points = 16, k_max = 8, tol = 1e-6))]
fn oracle_check(py: Python<'_>, operator: &str, k_trunc: usize, t_points: usize, k_max: usize, tol: f64) -> PyResult<Py<PyAny>> {
    let spec = load_operator(operator)?;
    let doc = py
        .detach(|| -> blochspec_core::Result<Value> {
            let exact = match pipeline::closed_form(&spec) {
                Some(_) => serde_json::to_value(pipeline::exact_case_check(&spec, k_trunc, &bands::default_t_grid(64))?)?,
                None => Value::Null,
            };
            let mono = pipeline::oracle_check(&spec, k_trunc, &bands::default_t_grid(t_points), k_max, tol, blochspec_core::floquet::DEFAULT_TOL)?;
            Ok(json!({"exact_case": exact, "monodromy": mono}))
        })
        .map_err(to_py_err)?;
    to_py(py, &doc)
}

/// Multiple-eigenvalue catalog and singularity classification.
#[pyfunction]
#[pyo3(signature = (operator, k_trunc = 32, t_grid_size = 64, seed = 42))]
fn singularities(py: Python<'_>, operator: &str, k_trunc: usize, t_grid_size: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let spec = load_operator(operator)?;
    let run = py
        .detach(|| {
            let probes = singular::default_probes(spec.m, 5, seed);
            pipeline::analyze_singularities(&spec, k_trunc, t_grid_size, &SearchParams::default(), &probes, 1e-6, &ClassifyParams::default())
        })
        .map_err(to_py_err)?;
    let mut doc = run.report.to_json();
    doc["catalog"] = json!({
        "a": run.catalog.a.iter().map(|z| c2(*z)).collect::<Vec<_>>(),
        "A": run.catalog.sets,
    });
    to_py(py, &doc)
}

/// Reconstruct a test function from its Bloch expansion. `test_function` is
/// a JSON descriptor as in the run configuration; the default is a bump on
/// `(-1, 1)` with unit weights.
#[pyfunction]
#[pyo3(signature = (operator, k_branch = 8, windows = None, test_function = None, seed = 42))]
fn expand(
    py: Python<'_>,
    operator: &str,
    k_branch: usize,
    windows: Option<Vec<(f64, f64)>>,
    test_function: Option<&str>,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let spec = load_operator(operator)?;
    let f = self::test_function(&spec, test_function)?;
    let mut params = ExpansionParams::new(k_branch);
    if let Some(w) = windows {
        params.windows = w;
    }
    let res = py
        .detach(|| {
            let probes = singular::default_probes(spec.m, 5, seed);
            pipeline::expand(&f, &spec, 64, &SearchParams::default(), &probes, 1e-6, &ClassifyParams::default(), &params)
        })
        .map_err(to_py_err)?
        .1;
    let mut doc = res.to_json();
    doc["x"] = json!(res.x);
    doc["reconstruction"] = json!(res.reconstruction.chunks(res.m).map(|c| c.iter().map(|z| c2(*z)).collect::<Vec<_>>()).collect::<Vec<_>>());
    to_py(py, &doc)
}

/// Fast invariant checks; returns `{"checks": [...], "pass": bool}`.
#[pyfunction]
#[pyo3(signature = (operator, k_trunc = 16, seed = 42))]
fn selfcheck(py: Python<'_>, operator: &str, k_trunc: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let spec = load_operator(operator)?;
    let f = test_function(&spec, None)?;
    let checks = py.detach(|| cli::selfcheck(&spec, &f, k_trunc, &Tolerances::default(), seed)).map_err(to_py_err)?;
    let pass = checks.iter().all(|c| c.pass);
    to_py(py, &json!({"checks": checks, "pass": pass}))
}

/// Run the command line with the given arguments; returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<i32> {
    let argv = std::iter::once("blochspec".to_string()).chain(args);
    let parsed = Cli::try_parse_from(argv).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.detach(|| cli::run(parsed)))
}

#[pymodule]
fn blochspec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    m.add_function(wrap_pyfunction!(eigenpairs, m)?)?;
    m.add_function(wrap_pyfunction!(track_bands, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(singularities, m)?)?;
    m.add_function(wrap_pyfunction!(expand, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
