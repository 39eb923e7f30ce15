//! Python bindings: thin wrappers over the core chain/simulation/estimation
//! API, converting matrices to and from nested lists.

use aggmom::chain::{generate_random_chain, TransitionMatrix};
use aggmom::estimators::{
    error_metric, estimate_cls, estimate_limle, estimate_mom, estimate_mom_nonstationary,
    estimate_naive, project_to_stochastic, stationary_error_metric, EstimatorKind,
};
use aggmom::linalg::Matrix;
use aggmom::noise::{apply_noise_ensemble, ensemble_totals, estimate_binomial_params, NoiseSpec};
use aggmom::simulate::{realization_rng, simulate_ensemble, CountSeries, Ensemble};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: aggmom::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn rows_to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(err)
}

/// A row-stochastic transition matrix over `s` states.
#[pyclass(name = "TransitionMatrix")]
#[derive(Clone)]
struct PyTransitionMatrix {
    inner: TransitionMatrix,
}

#[pymethods]
impl PyTransitionMatrix {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = TransitionMatrix::new(rows_to_matrix(rows)?).map_err(err)?;
        Ok(PyTransitionMatrix { inner })
    }

    /// Draw a random ergodic chain; rows are Dirichlet with concentration
    /// `d / s` per entry.
    #[staticmethod]
    fn random(s: usize, d: f64, seed: u64) -> PyResult<Self> {
        let inner = generate_random_chain(s, d, &mut realization_rng(seed, 0)).map_err(err)?;
        Ok(PyTransitionMatrix { inner })
    }

    #[getter]
    fn s(&self) -> usize {
        self.inner.s()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(self.inner.matrix())
    }

    /// Unique stationary distribution.
    fn stationary(&self) -> PyResult<Vec<f64>> {
        self.inner.stationary_distribution().map_err(err)
    }

    /// Closed-form stationary count moments for population size `n`:
    /// returns a dict with keys m, sigma0, sigma1, lambda0, lambda1,
    /// lambda0_inverse.
    fn moments<'py>(&self, py: Python<'py>, n: u64) -> PyResult<Bound<'py, PyAny>> {
        let mom = self.inner.analytic_moments(n).map_err(err)?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("m", mom.m.clone())?;
        d.set_item("sigma0", matrix_to_rows(&mom.sigma0))?;
        d.set_item("sigma1", matrix_to_rows(&mom.sigma1))?;
        d.set_item("lambda0", matrix_to_rows(&mom.lambda0))?;
        d.set_item("lambda1", matrix_to_rows(&mom.lambda1))?;
        d.set_item(
            "lambda0_inverse",
            matrix_to_rows(&mom.lambda0_inverse().map_err(err)?),
        )?;
        Ok(d.into_any())
    }

    /// Autocovariance of the single-individual pair indicator for lags
    /// `1..=k_max`.
    fn autocovariance(&self, i: usize, j: usize, k_max: usize) -> PyResult<Vec<f64>> {
        self.inner.autocovariance_curve(i, j, k_max).map_err(err)
    }

    /// Probability limit of plain least squares under additive noise with
    /// per-state variance `sigma2`.
    fn cls_noisy_limit(&self, n: u64, sigma2: f64) -> PyResult<Vec<Vec<f64>>> {
        let v = Matrix::identity(self.inner.s()).scale(sigma2);
        Ok(matrix_to_rows(
            &self.inner.cls_noisy_limit(n, &v).map_err(err)?,
        ))
    }

    fn __repr__(&self) -> String {
        format!("TransitionMatrix(s={})", self.inner.s())
    }
}

/// A collection of simulated or observed count series (realizations).
#[pyclass(name = "Ensemble")]
struct PyEnsemble {
    inner: Ensemble,
}

#[pymethods]
impl PyEnsemble {
    /// Build from nested lists: counts[k][t][i] is the count of state `i`
    /// at time `t` in realization `k`.
    #[new]
    #[pyo3(signature = (counts, integral = true))]
    fn new(counts: Vec<Vec<Vec<f64>>>, integral: bool) -> PyResult<Self> {
        let mut series = Vec::with_capacity(counts.len());
        for realization in counts {
            let t_len = realization.len();
            let s = realization.first().map(|r| r.len()).unwrap_or(0);
            let mut data = Vec::with_capacity(t_len * s);
            for row in &realization {
                if row.len() != s {
                    return Err(PyValueError::new_err("ragged count rows"));
                }
                data.extend_from_slice(row);
            }
            series.push(CountSeries::new(s, t_len, data, integral).map_err(err)?);
        }
        Ok(PyEnsemble {
            inner: Ensemble::new(series).map_err(err)?,
        })
    }

    #[getter]
    fn s(&self) -> usize {
        self.inner.s()
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.t_len()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn counts(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner
            .series()
            .iter()
            .map(|cs| (0..cs.t_len()).map(|t| cs.row(t).to_vec()).collect())
            .collect()
    }

    /// Apply one draw of observation noise, e.g. `"binomial:0.5"`.
    fn apply_noise(&self, noise: &str, seed: u64) -> PyResult<PyEnsemble> {
        let model = NoiseSpec::parse(noise)
            .and_then(|spec| spec.build(self.inner.s()))
            .map_err(err)?;
        let noisy = apply_noise_ensemble(&model, &self.inner, &mut realization_rng(seed, 0))
            .map_err(err)?;
        Ok(PyEnsemble { inner: noisy })
    }

    fn __repr__(&self) -> String {
        format!(
            "Ensemble(k={}, t={}, s={})",
            self.inner.k(),
            self.inner.t_len(),
            self.inner.s()
        )
    }
}

/// Simulate `k` independent realizations of aggregate counts of `n`
/// individuals over `t` steps. `init` defaults to the stationary start.
#[pyfunction]
#[pyo3(signature = (chain, n, t, k, seed, init = None))]
fn simulate(
    chain: &PyTransitionMatrix,
    n: u64,
    t: usize,
    k: usize,
    seed: u64,
    init: Option<Vec<f64>>,
) -> PyResult<PyEnsemble> {
    let ens = simulate_ensemble(&chain.inner, n, t, k, init.as_deref(), seed).map_err(err)?;
    Ok(PyEnsemble { inner: ens })
}

/// Run one estimator over an ensemble. `method` is one of mom, cls, limle,
/// naive, mom_nonstationary; `noise` names the observation model the data
/// carries; `n` is the population size (needed by mom and
/// mom_nonstationary). Returns a dict with raw, projected, and warning.
#[pyfunction]
#[pyo3(signature = (ensemble, method, noise = "none", n = None, seed = 0))]
fn estimate<'py>(
    py: Python<'py>,
    ensemble: &PyEnsemble,
    method: &str,
    noise: &str,
    n: Option<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let kind = EstimatorKind::parse(method).map_err(err)?;
    let model = NoiseSpec::parse(noise)
        .and_then(|spec| spec.build(ensemble.inner.s()))
        .map_err(err)?;
    let need_n = matches!(kind, EstimatorKind::Mom | EstimatorKind::MomNonstationary);
    let n = match (n, need_n) {
        (Some(v), _) => v,
        (None, false) => 0.0,
        (None, true) => {
            return Err(PyValueError::new_err(format!(
                "method {} needs the population size n",
                method
            )));
        }
    };
    let est = match kind {
        EstimatorKind::Mom => estimate_mom(&ensemble.inner, &model, n),
        EstimatorKind::Cls => estimate_cls(&ensemble.inner),
        EstimatorKind::Limle => estimate_limle(&ensemble.inner, &model, seed),
        EstimatorKind::Naive => estimate_naive(&ensemble.inner, &model),
        EstimatorKind::MomNonstationary => estimate_mom_nonstationary(&ensemble.inner, &model, n),
    }
    .map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("raw", matrix_to_rows(&est.p_raw))?;
    d.set_item("projected", matrix_to_rows(est.p_projected.matrix()))?;
    d.set_item("warning", est.warning.clone())?;
    Ok(d.into_any())
}

/// Moment-matched `(n, alpha)` from the observed totals of a
/// binomially-thinned ensemble.
#[pyfunction]
fn estimate_detection(ensemble: &PyEnsemble) -> PyResult<(f64, f64)> {
    let params = estimate_binomial_params(&ensemble_totals(&ensemble.inner)).map_err(err)?;
    Ok((params.n, params.alpha))
}

/// Euclidean projection of each row onto the probability simplex.
#[pyfunction]
fn project(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let p = project_to_stochastic(&rows_to_matrix(rows)?).map_err(err)?;
    Ok(matrix_to_rows(p.matrix()))
}

/// Entrywise mean squared error `(1/S^2) ||p_hat - p_true||_F^2`.
#[pyfunction]
fn mse(p_hat: Vec<Vec<f64>>, p_true: &PyTransitionMatrix) -> PyResult<f64> {
    error_metric(&rows_to_matrix(p_hat)?, &p_true.inner).map_err(err)
}

/// Mean squared error between the stationary distributions of a projected
/// estimate and the truth; None when the estimate has no unique
/// stationary distribution.
#[pyfunction]
fn stationary_mse(p_hat: Vec<Vec<f64>>, p_true: &PyTransitionMatrix) -> PyResult<Option<f64>> {
    let est = TransitionMatrix::new(rows_to_matrix(p_hat)?).map_err(err)?;
    stationary_error_metric(&est, &p_true.inner).map_err(err)
}

#[pymodule]
fn _aggmom(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTransitionMatrix>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_detection, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_mse, m)?)?;
    Ok(())
}
