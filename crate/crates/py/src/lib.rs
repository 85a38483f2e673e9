//! Python bindings: the optimal-density oracle, IDX loading and the
//! experiment runner.

use std::collections::BTreeMap;
use std::path::PathBuf;

use dale_core::dataio::load_idx;
use dale_core::expcli::{self, ConfigMap};
use dale_core::lambda_oracle;
use dale_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Io(_) | Error::Idx { .. } | Error::Data(_) => PyOSError::new_err(msg),
        Error::Divergence { .. } => PyArithmeticError::new_err(msg),
        Error::Degenerate(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

/// Optimal perturbation density on a uniform grid of cells with volume
/// `cell_volume`. Returns `(density, mu)`.
#[pyfunction]
fn lambda_star(values: Vec<f64>, cell_volume: f64, gamma: f64) -> PyResult<(Vec<f64>, f64)> {
    let d = lambda_oracle::lambda_star(&values, cell_volume, gamma).map_err(to_py)?;
    Ok((d.density, d.mu.unwrap_or(f64::NAN)))
}

/// Density proportional to the loss.
#[pyfunction]
fn oversmoothed_lambda(values: Vec<f64>, cell_volume: f64) -> PyResult<Vec<f64>> {
    Ok(lambda_oracle::oversmoothed_lambda(&values, cell_volume)
        .map_err(to_py)?
        .density)
}

/// Expected loss under `lambda_star(values, cell_volume, gamma)`.
#[pyfunction]
fn expected_loss(values: Vec<f64>, cell_volume: f64, gamma: f64) -> PyResult<f64> {
    let d = lambda_oracle::lambda_star(&values, cell_volume, gamma).map_err(to_py)?;
    lambda_oracle::expected_loss(&d, &values).map_err(to_py)
}

/// Reads an IDX image/label pair. Returns `(rows, dim, pixels, labels)` with
/// `pixels` flattened row-major and scaled to `[0, 1]`.
#[pyfunction]
fn load_idx_pair(images: PathBuf, labels: PathBuf) -> PyResult<(usize, usize, Vec<f64>, Vec<usize>)> {
    let ds = load_idx(&images, &labels).map_err(to_py)?;
    let (n, d) = (ds.len(), ds.dim());
    Ok((n, d, ds.inputs.into_raw_vec_and_offset().0, ds.labels))
}

/// Default value of every config key.
#[pyfunction]
fn default_config() -> BTreeMap<String, String> {
    ConfigMap::default().as_map().clone()
}

/// Trains one model from config overrides (same keys as the CLI) and
/// returns the final metrics. Outputs are written under `out`.
#[pyfunction]
#[pyo3(signature = (overrides = BTreeMap::new()))]
fn train(overrides: BTreeMap<String, String>) -> PyResult<BTreeMap<String, f64>> {
    let pairs: Vec<(String, String)> = overrides.into_iter().collect();
    let cfg = ConfigMap::resolve(None, &pairs).map_err(to_py)?;
    let m = expcli::run_single(&cfg).map_err(to_py)?.metrics;
    Ok(BTreeMap::from([
        ("clean_acc".to_string(), m.clean_acc),
        ("fgsm_acc".to_string(), m.fgsm_acc),
        ("pgd_acc".to_string(), m.pgd_acc),
        ("final_nu".to_string(), m.final_nu),
        ("train_clean_loss".to_string(), m.train_clean_loss),
        ("slack".to_string(), m.slack),
    ]))
}

#[pymodule]
fn dale(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lambda_star, m)?)?;
    m.add_function(wrap_pyfunction!(oversmoothed_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(expected_loss, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx_pair, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
