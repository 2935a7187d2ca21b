//! Python bindings: the solver, the rate formulas, Gram matrices, packings
//! and synthetic data, with plain lists for vectors and matrices.

use lpmkl::harness::{self, ExperimentPlan};
use lpmkl::synth::{build_truth, sample_dataset, TruthSpec};
use lpmkl::theory::{self, TheoryParams};
use lpmkl::{GramMatrix, KernelSpec, MklProblem, SolverOptions, SpectralKernel};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: lpmkl::Error) -> PyErr {
    match e {
        lpmkl::Error::Numeric(_) | lpmkl::Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_fn(n, width, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Result of an lp-MKL fit.
#[pyclass(frozen, get_all)]
pub struct Solution {
    /// Block coefficients in the square-root parameterization, so that the
    /// fitted block values are `sqrt(K_m) beta_m`.
    beta: Vec<Vec<f64>>,
    block_norms: Vec<f64>,
    theta: Option<Vec<f64>>,
    fitted: Vec<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
}

#[pymethods]
impl Solution {
    fn __repr__(&self) -> String {
        format!(
            "Solution(objective={:.6e}, iterations={}, converged={})",
            self.objective, self.iterations, self.converged
        )
    }
}

fn problem(grams: Vec<Vec<Vec<f64>>>, y: Vec<f64>, p: f64, lambda1: f64) -> PyResult<MklProblem> {
    let grams = grams
        .iter()
        .map(|g| GramMatrix::new(matrix(g)?).map_err(to_py))
        .collect::<PyResult<Vec<_>>>()?;
    MklProblem::new(DVector::from_vec(y), &grams, p, lambda1).map_err(to_py)
}

/// Fits lp-MKL on precomputed Gram matrices. `method` is `"auto"`,
/// `"theta"` (needs `p <= 2`) or `"direct"`.
#[pyfunction]
#[pyo3(signature = (grams, y, p, lambda1, method = "auto"))]
fn solve(grams: Vec<Vec<Vec<f64>>>, y: Vec<f64>, p: f64, lambda1: f64, method: &str) -> PyResult<Solution> {
    let problem = problem(grams, y, p, lambda1)?;
    let opts = SolverOptions::default();
    let sol = match method {
        "auto" => lpmkl::solve(&problem, &opts),
        "theta" => lpmkl::solve_theta_path(&problem, &opts),
        "direct" => lpmkl::solve_direct(&problem, &opts),
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
    }
    .map_err(to_py)?;
    Ok(Solution {
        beta: sol.beta_blocks.iter().map(|a| a.iter().copied().collect()).collect(),
        block_norms: sol.block_norms.clone(),
        theta: sol.theta.clone(),
        fitted: sol.fitted.iter().copied().collect(),
        objective: sol.objective,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

/// Kernel weights for block norms at `1 <= p < 2`.
#[pyfunction]
fn theta_update(block_norms: Vec<f64>, p: f64) -> PyResult<Vec<f64>> {
    lpmkl::theta_update(&block_norms, p).map_err(to_py)
}

fn spectral_spec(decay_s: f64, truncation: usize, scale_c: Option<f64>) -> PyResult<KernelSpec> {
    let kernel = match scale_c {
        Some(c) => SpectralKernel::new(decay_s, truncation, c),
        None => SpectralKernel::normalized(decay_s, truncation),
    }
    .map_err(to_py)?;
    Ok(KernelSpec::Spectral(kernel))
}

/// Gram matrix of the spectral kernel on points in `[0, 1]`; the scale is
/// normalized so that `sup k(x, x) < 1` unless `scale_c` is given.
#[pyfunction]
#[pyo3(signature = (points, decay_s, truncation = 200, scale_c = None))]
fn spectral_gram(points: Vec<f64>, decay_s: f64, truncation: usize, scale_c: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let spec = spectral_spec(decay_s, truncation, scale_c)?;
    let pts: Vec<Vec<f64>> = points.into_iter().map(|x| vec![x]).collect();
    Ok(rows(lpmkl::gram(&spec, &pts).map_err(to_py)?.values()))
}

#[pyfunction]
fn gaussian_gram(points: Vec<Vec<f64>>, bandwidth: f64) -> PyResult<Vec<Vec<f64>>> {
    let spec = KernelSpec::Gaussian { bandwidth };
    Ok(rows(lpmkl::gram(&spec, &points).map_err(to_py)?.values()))
}

#[pyfunction]
fn gram_sqrt(gram: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let g = GramMatrix::new(matrix(&gram)?).map_err(to_py)?;
    Ok(rows(&lpmkl::gram_sqrt(&g).map_err(to_py)?))
}

#[pyfunction]
#[pyo3(signature = (gram, k_min = 2, k_max = 30))]
fn estimate_decay(gram: Vec<Vec<f64>>, k_min: usize, k_max: usize) -> PyResult<f64> {
    let g = GramMatrix::new(matrix(&gram)?).map_err(to_py)?;
    lpmkl::estimate_decay(&g, k_min..=k_max).map_err(to_py)
}

#[pyfunction]
fn kappa_estimate(grams: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let grams = grams
        .iter()
        .map(|g| GramMatrix::new(matrix(g)?).map_err(to_py))
        .collect::<PyResult<Vec<_>>>()?;
    theory::kappa_estimate(&grams).map_err(to_py)
}

/// Rate constants. `p` may be `float("inf")`.
#[pyclass(name = "TheoryParams", frozen)]
pub struct PyTheoryParams {
    inner: TheoryParams,
}

#[pymethods]
impl PyTheoryParams {
    #[new]
    #[pyo3(signature = (n, M, p, s, R_p, kappa = 1.0, L = 1.0, c_free = 1.0))]
    #[allow(non_snake_case, clippy::too_many_arguments)]
    fn new(n: u64, M: u64, p: f64, s: f64, R_p: f64, kappa: f64, L: f64, c_free: f64) -> PyResult<Self> {
        let mut inner = TheoryParams::new(n, M, p, s, R_p).map_err(to_py)?;
        inner.kappa = kappa;
        inner.noise_bound = L;
        inner.c_free = c_free;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn optimal_lambda(&self) -> PyResult<f64> {
        Ok(theory::optimal_lambda(&self.inner).map_err(to_py)?.lambda)
    }

    fn sample_size_ok(&self) -> PyResult<bool> {
        Ok(theory::optimal_lambda(&self.inner).map_err(to_py)?.sample_size_ok)
    }

    /// Leading term of the predicted squared `L2` error.
    fn predicted_rate(&self) -> PyResult<f64> {
        Ok(theory::predicted_rate(&self.inner).map_err(to_py)?.leading)
    }

    fn predicted_rate_terms(&self) -> PyResult<[f64; 3]> {
        Ok(theory::predicted_rate(&self.inner).map_err(to_py)?.full)
    }

    fn zeta_n(&self, lambda1: f64) -> PyResult<f64> {
        theory::zeta_n(&self.inner, lambda1).map_err(to_py)
    }

    fn u_n_bound(&self, f_norm_l2: f64, f_norm_h: f64, lambda1: f64) -> PyResult<f64> {
        theory::u_n_bound(f_norm_l2, f_norm_h, &self.inner, lambda1).map_err(to_py)
    }

    fn minimax_lower_bound(&self, radius: f64) -> PyResult<f64> {
        theory::minimax_lower_bound(&self.inner, radius).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let t = &self.inner;
        format!(
            "TheoryParams(n={}, M={}, p={}, s={}, R_p={})",
            t.n,
            t.m,
            t.p.value(),
            t.s,
            t.r_p
        )
    }
}

#[pyfunction]
fn eta(t: f64, n: u64) -> f64 {
    theory::eta(t, n)
}

#[pyfunction]
fn r_p_norm(h_norms: Vec<f64>, p: f64) -> f64 {
    theory::r_p_norm(&h_norms, p)
}

/// Greedy code over `[N]^M` with pairwise Hamming distance above `M/2`.
#[pyfunction]
#[allow(non_snake_case)]
fn greedy_packing(N: u32, M: u32) -> PyResult<Vec<Vec<u32>>> {
    theory::greedy_packing(N, M, (M / 2) as usize).map_err(to_py)
}

/// `(Q*, ceil(Q*))` of the packing bound.
#[pyfunction]
#[allow(non_snake_case)]
fn packing_bound(N: u32, M: u32) -> PyResult<(f64, u64)> {
    let b = theory::packing_lower_bound(N, M).map_err(to_py)?;
    Ok((b.q_star, b.q_star_ceil))
}

/// Draws a truth with the given block RKHS norms and samples `n` points.
/// Returns `(x, y, truth_values)` with `x` as rows of length `M`.
#[pyfunction]
#[pyo3(signature = (norm_pattern, n, seed, data_seed, decay_s = 0.5, noise_bound = 1.0))]
#[allow(clippy::type_complexity)]
fn generate(
    norm_pattern: Vec<f64>,
    n: usize,
    seed: u64,
    data_seed: u64,
    decay_s: f64,
    noise_bound: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let kernel = spectral_spec(decay_s, lpmkl::kernel::DEFAULT_TRUNCATION, None)?;
    let truth = build_truth(&TruthSpec::custom(norm_pattern, seed), &kernel).map_err(to_py)?;
    let data = sample_dataset(&truth, n, noise_bound, data_seed).map_err(to_py)?;
    Ok((
        rows(&data.x),
        data.y.iter().copied().collect(),
        data.truth_values.iter().copied().collect(),
    ))
}

/// Runs a sweep from a JSON or TOML plan file and returns the records CSV.
#[pyfunction]
fn sweep(plan_path: &str) -> PyResult<String> {
    let plan = ExperimentPlan::load(plan_path).map_err(to_py)?;
    let out = harness::sweep(&plan).map_err(to_py)?;
    harness::records_to_csv(&out.records).map_err(to_py)
}

#[pymodule]
fn lpmkl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Solution>()?;
    m.add_class::<PyTheoryParams>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(theta_update, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_gram, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_gram, m)?)?;
    m.add_function(wrap_pyfunction!(gram_sqrt, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_decay, m)?)?;
    m.add_function(wrap_pyfunction!(kappa_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(eta, m)?)?;
    m.add_function(wrap_pyfunction!(r_p_norm, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_packing, m)?)?;
    m.add_function(wrap_pyfunction!(packing_bound, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
