//! Python module `qsdlab`.
//!
//! Each function returns the same JSON report the `qsd` command prints.
//! Unusable input raises `ValueError`; a check that fails is reported, not raised.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use qsd_core::commands::{self, Depth};
use qsd_core::io::InputError;
use qsd_core::oracle::VerifyOptions;
use qsd_core::report::Report;

fn finish(r: Result<Report, InputError>) -> PyResult<String> {
    r.map(|rep| rep.to_json()).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Communication classes of a chain given as chain-file text.
#[pyfunction]
fn analyze(py: Python<'_>, text: &str) -> PyResult<String> {
    finish(py.allow_threads(|| commands::chain_report(text, Depth::Classes, VerifyOptions::default())))
}

/// Certificate of a chain given as chain-file text.
#[pyfunction]
fn qsd(py: Python<'_>, text: &str) -> PyResult<String> {
    finish(py.allow_threads(|| commands::chain_report(text, Depth::Certificate, VerifyOptions::default())))
}

#[pyfunction]
#[pyo3(signature = (text, n=4000, samples=0, seed=0))]
fn verify(py: Python<'_>, text: &str, n: usize, samples: u64, seed: u64) -> PyResult<String> {
    let opts = VerifyOptions { n_max: n, samples, seed, ..VerifyOptions::default() };
    finish(py.allow_threads(|| commands::chain_report(text, Depth::Verification, opts)))
}

#[pyfunction]
#[pyo3(signature = (case, seed=0, instances=100, n_max=400))]
fn operator_lab(py: Python<'_>, case: u32, seed: u64, instances: usize, n_max: usize) -> PyResult<String> {
    finish(py.allow_threads(|| commands::lab_report(case, seed, instances, n_max)))
}

/// Drift and truncation stability of a rule file; `v` overrides its `V =` line.
#[pyfunction]
#[pyo3(signature = (rules, v=None, n=vec![100, 200, 400]))]
fn lyapunov(py: Python<'_>, rules: &str, v: Option<&str>, n: Vec<usize>) -> PyResult<String> {
    finish(py.allow_threads(|| commands::lyapunov_report(rules, v, &n)))
}

#[pymodule]
fn qsdlab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(qsd, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(operator_lab, m)?)?;
    m.add_function(wrap_pyfunction!(lyapunov, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
