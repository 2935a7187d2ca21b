//! lp-mixed-norm multiple kernel learning with the squared loss.
//!
//! The estimator minimizes
//!
//! ```text
//! (1/n) ||y - sum_m f_m(x)||^2 + lambda1 * (sum_m ||f_m||_{H_m}^p)^(2/p)
//! ```
//!
//! Each kernel enters through a factor `F_m` with `K_m = F_m F_m^T`. For Gram
//! matrices the factor is the symmetric square root, so a block is written
//! `f_m(x_i) = (F_m beta_m)_i` with `||f_m||_{H_m} = ||beta_m||_2`. Any other
//! exact factorization (for example explicit spectral features) gives the same
//! estimator in rotated coordinates.
//!
//! Two routes are provided:
//!
//! * [`solve_theta_path`]: alternating minimization over kernel weights
//!   `theta` under `sum_m theta_m^(p/(2-p)) = 1`, valid for `1 <= p <= 2`.
//! * [`solve_direct`]: accelerated gradient on the block coefficients with a
//!   smoothed block norm, valid for every `p >= 1`.
//!
//! [`solve`] dispatches between them.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{GramMatrix, PSD_TOL};

/// Lower bound on kernel weights inside the alternating scheme.
pub const THETA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Relative decrease and stationarity level ending each first-order stage.
    pub tol_obj: f64,
    /// Relative objective decrease per sweep (alternating scheme) or Newton
    /// decrement (final polish) below which the solver stops.
    pub tol_decrease: f64,
    /// Sweep budget of the alternating scheme.
    pub max_sweeps: usize,
    /// Step budget of the first-order scheme (all smoothing stages together).
    pub max_steps: usize,
    pub theta_floor: f64,
    /// First and last block-norm smoothing levels of the first-order scheme.
    pub smoothing_start: f64,
    pub smoothing_end: f64,
    /// Damped Newton iterations after the last smoothing stage.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_obj: 1e-8,
            tol_decrease: 1e-14,
            max_sweeps: 10_000,
            max_steps: 50_000,
            theta_floor: THETA_FLOOR,
            smoothing_start: 1e-3,
            smoothing_end: 1e-10,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    factor: DMatrix<f64>,
    gram: Option<DMatrix<f64>>,
}

/// Responses, kernels on a shared sample, exponent `p` and regularization `lambda1`.
#[derive(Debug, Clone)]
pub struct MklProblem {
    y: DVector<f64>,
    blocks: Vec<Block>,
    p: f64,
    lambda1: f64,
}

impl MklProblem {
    /// Builds a problem from Gram matrices; each is factored by its symmetric
    /// square root. Fails on non-PSD input.
    pub fn new(y: DVector<f64>, grams: &[GramMatrix], p: f64, lambda1: f64) -> Result<Self> {
        let blocks = grams
            .iter()
            .enumerate()
            .map(|(m, g)| {
                let factor = psd_sqrt(g.values()).map_err(|e| Error::Input(format!("kernel {m}: {e}")))?;
                Ok(Block {
                    factor,
                    gram: Some(g.values().clone()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(y, blocks, p, lambda1)
    }

    /// Builds a problem from explicit factors `F_m` (`n x r_m`, `K_m = F_m F_m^T`).
    pub fn from_factors(y: DVector<f64>, factors: Vec<DMatrix<f64>>, p: f64, lambda1: f64) -> Result<Self> {
        let blocks = factors.into_iter().map(|factor| Block { factor, gram: None }).collect();
        Self::assemble(y, blocks, p, lambda1)
    }

    fn assemble(y: DVector<f64>, blocks: Vec<Block>, p: f64, lambda1: f64) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Input("empty response vector".into()));
        }
        if blocks.is_empty() {
            return Err(Error::Input("at least one kernel is required".into()));
        }
        for (m, b) in blocks.iter().enumerate() {
            if b.factor.nrows() != n || b.factor.ncols() == 0 {
                return Err(Error::Input(format!(
                    "kernel {m} has {} rows, expected {n}",
                    b.factor.nrows()
                )));
            }
            if b.factor.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("kernel {m} has non-finite entries")));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("responses must be finite".into()));
        }
        check_exponent(p)?;
        check_lambda(lambda1)?;
        Ok(Self { y, blocks, p, lambda1 })
    }

    /// Reads the JSON problem format `{y, gram_files, p, lambda1}`; Gram file
    /// paths are resolved relative to the JSON file.
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ProblemFile = serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("{}:{}:{}", path.display(), e.line(), e.column()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let grams = file
            .gram_files
            .iter()
            .map(|g| GramMatrix::load_csv(base.join(g)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(DVector::from_vec(file.y), &grams, file.p, file.lambda1)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn num_kernels(&self) -> usize {
        self.blocks.len()
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn factor(&self, m: usize) -> &DMatrix<f64> {
        &self.blocks[m].factor
    }

    /// Block dimensions `r_m`.
    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.factor.ncols()).collect()
    }

    pub fn gram(&self, m: usize) -> Cow<'_, DMatrix<f64>> {
        let b = &self.blocks[m];
        match &b.gram {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(&b.factor * b.factor.transpose()),
        }
    }

    pub fn with_lambda(&self, lambda1: f64) -> Result<Self> {
        check_lambda(lambda1)?;
        Ok(Self {
            lambda1,
            ..self.clone()
        })
    }

    pub fn with_p(&self, p: f64) -> Result<Self> {
        check_exponent(p)?;
        Ok(Self { p, ..self.clone() })
    }

    /// Restriction to a subset of samples. Rows of a factor of `K` factor the
    /// corresponding principal submatrix, so block coordinates are shared
    /// with the full problem.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|&i| i >= self.n()) {
            return Err(Error::Input("subset row out of range".into()));
        }
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                factor: b.factor.select_rows(rows.iter()),
                gram: b
                    .gram
                    .as_ref()
                    .map(|g| g.select_rows(rows.iter()).select_columns(rows.iter())),
            })
            .collect();
        Self::assemble(y, blocks, self.p, self.lambda1)
    }

    /// `sum_m F_m beta_m` evaluated on the rows of this problem.
    pub fn predict(&self, beta_blocks: &[DVector<f64>]) -> Result<DVector<f64>> {
        self.check_blocks(beta_blocks)?;
        let mut out = DVector::zeros(self.n());
        for (b, beta) in self.blocks.iter().zip(beta_blocks) {
            out.gemv(1.0, &b.factor, beta, 1.0);
        }
        Ok(out)
    }

    fn check_blocks(&self, beta_blocks: &[DVector<f64>]) -> Result<()> {
        if beta_blocks.len() != self.num_kernels() {
            return Err(Error::Input(format!(
                "expected {} coefficient blocks, got {}",
                self.num_kernels(),
                beta_blocks.len()
            )));
        }
        for (m, (b, beta)) in self.blocks.iter().zip(beta_blocks).enumerate() {
            if beta.len() != b.factor.ncols() {
                return Err(Error::Input(format!(
                    "block {m} has length {}, expected {}",
                    beta.len(),
                    b.factor.ncols()
                )));
            }
        }
        Ok(())
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::Input(format!("p must be a finite real >= 1, got {p}")));
    }
    Ok(())
}

fn check_lambda(lambda1: f64) -> Result<()> {
    if !(lambda1 > 0.0 && lambda1.is_finite()) {
        return Err(Error::Input(format!("lambda1 must be positive, got {lambda1}")));
    }
    Ok(())
}

fn psd_sqrt(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(g.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let top = eig.eigenvalues.max().max(0.0);
    let low = eig.eigenvalues.min();
    if low < -PSD_TOL * top || (top == 0.0 && low < 0.0) {
        return Err(Error::Input(format!(
            "Gram matrix is not positive semidefinite: eigenvalue {low:e} (largest {top:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    let s = &scaled * eig.eigenvectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub y: Vec<f64>,
    pub gram_files: Vec<PathBuf>,
    pub p: f64,
    pub lambda1: f64,
}

/// Result of a solve. `beta_blocks` are in the coordinates of the problem's
/// factors.
#[derive(Debug, Clone, PartialEq)]
pub struct MklSolution {
    pub beta_blocks: Vec<DVector<f64>>,
    pub block_norms: Vec<f64>,
    /// Kernel weights, present when the alternating route was used.
    pub theta: Option<Vec<f64>>,
    pub objective: f64,
    pub fitted: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// JSON view of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub block_norms: Vec<f64>,
    pub theta: Option<Vec<f64>>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl From<&MklSolution> for SolutionReport {
    fn from(s: &MklSolution) -> Self {
        Self {
            block_norms: s.block_norms.clone(),
            theta: s.theta.clone(),
            objective: s.objective,
            iterations: s.iterations,
            converged: s.converged,
        }
    }
}

/// `(sum_m norms_m^p)^(1/p)`, computed with rescaling to avoid overflow.
pub(crate) fn mixed_norm(norms: &[f64], p: f64) -> f64 {
    let top = norms.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0.0;
    }
    if p.is_infinite() {
        return top;
    }
    top * norms.iter().map(|v| (v / top).powf(p)).sum::<f64>().powf(1.0 / p)
}

/// `(1/n) ||y - sum_m F_m beta_m||^2 + lambda1 (sum_m ||beta_m||^p)^(2/p)`.
pub fn objective_value(problem: &MklProblem, beta_blocks: &[DVector<f64>]) -> Result<f64> {
    let fitted = problem.predict(beta_blocks)?;
    let norms: Vec<f64> = beta_blocks.iter().map(|b| b.norm()).collect();
    Ok(objective_parts(problem, &fitted, &norms))
}

fn objective_parts(problem: &MklProblem, fitted: &DVector<f64>, norms: &[f64]) -> f64 {
    let n = problem.n() as f64;
    let residual = (problem.y() - fitted).norm_squared() / n;
    residual + problem.lambda1 * mixed_norm(norms, problem.p).powi(2)
}

/// Closed-form kernel weights minimizing `sum_m ||f_m||^2 / theta_m` under
/// `sum_m theta_m^q = 1`, `q = p / (2 - p)`, for `p` in `[1, 2)`.
///
/// Weights are floored at [`THETA_FLOOR`] and renormalized. All-zero norms
/// give the uniform feasible point `M^(-1/q)`.
pub fn theta_update(block_norms: &[f64], p: f64) -> Result<Vec<f64>> {
    theta_update_with_floor(block_norms, p, THETA_FLOOR)
}

pub(crate) fn theta_update_with_floor(block_norms: &[f64], p: f64, floor: f64) -> Result<Vec<f64>> {
    if !(1.0..2.0).contains(&p) {
        return Err(Error::Input(format!("theta update needs p in [1, 2), got {p}")));
    }
    if block_norms.is_empty() || block_norms.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input("block norms must be finite and nonnegative".into()));
    }
    let q = p / (2.0 - p);
    let m = block_norms.len() as f64;
    let top = block_norms.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(vec![m.powf(-1.0 / q); block_norms.len()]);
    }
    // theta_m = ||f_m||^(2-p) / (sum_l ||f_l||^p)^((2-p)/p); scale invariant.
    let scaled: Vec<f64> = block_norms.iter().map(|v| v / top).collect();
    let denom = scaled.iter().map(|v| v.powf(p)).sum::<f64>().powf((2.0 - p) / p);
    let mut theta: Vec<f64> = scaled.iter().map(|v| (v.powf(2.0 - p) / denom).max(floor)).collect();
    let constraint: f64 = theta.iter().map(|t| t.powf(q)).sum();
    let rescale = constraint.powf(-1.0 / q);
    theta.iter_mut().for_each(|t| *t *= rescale);
    Ok(theta)
}

/// Solves the lp-MKL problem, dispatching on `p`: the alternating kernel-weight
/// scheme for `p <= 2` (with the weight floor at `p = 1`) and the first-order
/// scheme for `p > 2`. Budget exhaustion returns the best iterate with
/// `converged = false`.
pub fn solve(problem: &MklProblem, opts: &SolverOptions) -> Result<MklSolution> {
    if problem.p <= 2.0 {
        solve_theta_path(problem, opts)
    } else {
        solve_direct(problem, opts)
    }
}

/// Ridge fit at fixed kernel weights.
struct RidgeFit {
    beta_blocks: Vec<DVector<f64>>,
    fitted: DVector<f64>,
}

/// Cached quantities for repeated ridge solves on one problem.
enum RidgeWorkspace {
    /// `n x n` systems with per-kernel Grams.
    Sample { grams: Vec<DMatrix<f64>> },
    /// `R x R` systems in factor coordinates, used when `R = sum r_m < n`.
    Factor {
        cross: DMatrix<f64>,
        fty: DVector<f64>,
        offsets: Vec<usize>,
    },
}

impl RidgeWorkspace {
    fn new(problem: &MklProblem) -> Self {
        let dims = problem.block_dims();
        let total: usize = dims.iter().sum();
        if total < problem.n() {
            let design = concat_factors(problem);
            let cross = design.transpose() * &design;
            let fty = design.tr_mul(problem.y());
            Self::Factor {
                cross,
                fty,
                offsets: offsets(&dims),
            }
        } else {
            let grams = (0..problem.num_kernels())
                .map(|m| problem.gram(m).into_owned())
                .collect();
            Self::Sample { grams }
        }
    }

    fn fit(&self, problem: &MklProblem, theta: &[f64]) -> Result<RidgeFit> {
        let n = problem.n();
        let ridge = n as f64 * problem.lambda1;
        match self {
            Self::Sample { grams } => {
                let mut k_theta = DMatrix::zeros(n, n);
                for (g, &t) in grams.iter().zip(theta) {
                    k_theta += g * t;
                }
                let mut system = k_theta.clone();
                for i in 0..n {
                    system[(i, i)] += ridge;
                }
                let alpha = cholesky_solve(system, problem.y())?;
                let fitted = &k_theta * &alpha;
                let beta_blocks = problem
                    .blocks
                    .iter()
                    .zip(theta)
                    .map(|(b, &t)| b.factor.tr_mul(&alpha) * t)
                    .collect();
                Ok(RidgeFit { beta_blocks, fitted })
            }
            Self::Factor { cross, fty, offsets } => {
                let total = cross.nrows();
                let mut scale = DVector::zeros(total);
                for (m, &t) in theta.iter().enumerate() {
                    scale.rows_mut(offsets[m], offsets[m + 1] - offsets[m]).fill(t.sqrt());
                }
                let mut system = cross.clone();
                for i in 0..total {
                    for j in 0..total {
                        system[(i, j)] *= scale[i] * scale[j];
                    }
                    system[(i, i)] += ridge;
                }
                let rhs = fty.component_mul(&scale);
                let w = cholesky_solve(system, &rhs)?;
                let beta = w.component_mul(&scale);
                let beta_blocks = split_blocks(&beta, offsets);
                let fitted = problem.predict(&beta_blocks)?;
                Ok(RidgeFit { beta_blocks, fitted })
            }
        }
    }
}

fn cholesky_solve(mut system: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = system.nrows();
    for attempt in 0..4 {
        if let Some(chol) = Cholesky::<f64, Dyn>::new(system.clone()) {
            return Ok(chol.solve(rhs));
        }
        let jitter = 1e-10 * 10f64.powi(2 * attempt) * system.trace().abs().max(1e-300) / n as f64;
        for i in 0..n {
            system[(i, i)] += jitter;
        }
    }
    Err(Error::Numeric("ridge system is not positive definite".into()))
}

fn offsets(dims: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(dims.len() + 1);
    out.push(0);
    for d in dims {
        out.push(out.last().unwrap() + d);
    }
    out
}

fn split_blocks(beta: &DVector<f64>, offsets: &[usize]) -> Vec<DVector<f64>> {
    offsets
        .windows(2)
        .map(|w| beta.rows(w[0], w[1] - w[0]).into_owned())
        .collect()
}

fn concat_factors(problem: &MklProblem) -> DMatrix<f64> {
    let dims = problem.block_dims();
    let offs = offsets(&dims);
    let mut design = DMatrix::zeros(problem.n(), *offs.last().unwrap());
    for (m, b) in problem.blocks.iter().enumerate() {
        design.columns_mut(offs[m], dims[m]).copy_from(&b.factor);
    }
    design
}

fn finish(
    problem: &MklProblem,
    beta_blocks: Vec<DVector<f64>>,
    theta: Option<Vec<f64>>,
    iterations: usize,
    converged: bool,
) -> Result<MklSolution> {
    let fitted = problem.predict(&beta_blocks)?;
    let block_norms: Vec<f64> = beta_blocks.iter().map(|b| b.norm()).collect();
    let objective = objective_parts(problem, &fitted, &block_norms);
    Ok(MklSolution {
        beta_blocks,
        block_norms,
        theta,
        objective,
        fitted,
        iterations,
        converged,
    })
}

/// Alternating minimization over `(theta, f)` for `1 <= p <= 2`: a kernel
/// ridge solve with `k_theta = sum_m theta_m k_m`, then the closed-form weight
/// update. The objective is nonincreasing across sweeps. `p = 2` keeps every
/// weight at one.
pub fn solve_theta_path(problem: &MklProblem, opts: &SolverOptions) -> Result<MklSolution> {
    let p = problem.p;
    if p > 2.0 {
        return Err(Error::UnsupportedFormulation(format!(
            "the kernel-weight formulation requires 1 <= p <= 2 (got p = {p}); use solve"
        )));
    }
    let m = problem.num_kernels();
    let workspace = RidgeWorkspace::new(problem);
    if p == 2.0 {
        let theta = vec![1.0; m];
        let fit = workspace.fit(problem, &theta)?;
        return finish(problem, fit.beta_blocks, Some(theta), 1, true);
    }

    let q = p / (2.0 - p);
    let mut theta = vec![(m as f64).powf(-1.0 / q); m];
    let mut best: Option<(f64, Vec<DVector<f64>>, Vec<f64>)> = None;
    let mut previous = f64::INFINITY;
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let fit = workspace.fit(problem, &theta)?;
        let norms: Vec<f64> = fit.beta_blocks.iter().map(|b| b.norm()).collect();
        let objective = objective_parts(problem, &fit.fitted, &norms);
        if best.as_ref().is_none_or(|b| objective <= b.0) {
            best = Some((objective, fit.beta_blocks, theta.clone()));
        }
        let decrease = previous - objective;
        if objective <= f64::MIN_POSITIVE || (decrease.abs() <= opts.tol_decrease * objective.abs()) {
            converged = true;
            break;
        }
        previous = objective;
        theta = theta_update_with_floor(&norms, p, opts.theta_floor)?;
    }
    let (_, beta_blocks, theta) = best.expect("at least one sweep runs");
    finish(problem, beta_blocks, Some(theta), sweeps, converged)
}

/// Smoothed objective on concatenated coefficients.
struct Smoothed<'a> {
    problem: &'a MklProblem,
    design: DMatrix<f64>,
    offsets: Vec<usize>,
    eps: f64,
}

impl Smoothed<'_> {
    fn value(&self, beta: &DVector<f64>) -> f64 {
        let n = self.problem.n() as f64;
        let residual = self.problem.y() - &self.design * beta;
        residual.norm_squared() / n + self.problem.lambda1 * self.regularizer(beta).0
    }

    /// Returns `(g(beta), per-block s_m)` with `s_m = sqrt(||beta_m||^2 + eps^2)`
    /// and `g = (sum_m s_m^p)^(2/p)`.
    fn regularizer(&self, beta: &DVector<f64>) -> (f64, Vec<f64>) {
        let smoothed: Vec<f64> = self
            .offsets
            .windows(2)
            .map(|w| (beta.rows(w[0], w[1] - w[0]).norm_squared() + self.eps * self.eps).sqrt())
            .collect();
        (mixed_norm(&smoothed, self.problem.p).powi(2), smoothed)
    }

    fn value_and_gradient(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let n = self.problem.n() as f64;
        let residual = self.problem.y() - &self.design * beta;
        let mut grad = self.design.tr_mul(&residual) * (-2.0 / n);
        let (g, smoothed) = self.regularizer(beta);
        let lambda = self.problem.lambda1;
        let p = self.problem.p;
        if g > 0.0 {
            // d/dbeta_m (sum s^p)^(2/p) = 2 N^(2-p) s_m^(p-2) beta_m with N = g^(1/2).
            let norm = g.sqrt();
            for (m, w) in self.offsets.windows(2).enumerate() {
                let coef = 2.0 * lambda * (smoothed[m] / norm).powf(p - 2.0);
                let mut rows = grad.rows_mut(w[0], w[1] - w[0]);
                rows.axpy(coef, &beta.rows(w[0], w[1] - w[0]), 1.0);
            }
        }
        (residual.norm_squared() / n + lambda * g, grad)
    }
}

fn largest_singular_value_sq(design: &DMatrix<f64>) -> f64 {
    let cols = design.ncols();
    let mut v = DVector::from_fn(cols, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..60 {
        let w = design.tr_mul(&(design * &v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = norm;
        v = w / norm;
    }
    estimate
}

/// First-order solve of the direct formulation for any `p >= 1`.
///
/// Block norms are smoothed as `sqrt(||beta_m||^2 + eps^2)` and `eps` is
/// annealed geometrically from `smoothing_start` to `smoothing_end`; each
/// stage runs accelerated gradient descent with backtracking and
/// function-value restarts, warm-started from the previous stage and
/// initially from the uniform-weight ridge fit.
pub fn solve_direct(problem: &MklProblem, opts: &SolverOptions) -> Result<MklSolution> {
    let dims = problem.block_dims();
    let offs = offsets(&dims);
    let design = concat_factors(problem);
    let n = problem.n() as f64;
    let p = problem.p;

    let uniform = RidgeWorkspace::new(problem).fit(problem, &vec![1.0; problem.num_kernels()])?;
    let mut beta = DVector::zeros(*offs.last().unwrap());
    for (m, b) in uniform.beta_blocks.iter().enumerate() {
        beta.rows_mut(offs[m], dims[m]).copy_from(b);
    }

    let lipschitz_data = 2.0 * largest_singular_value_sq(&design) / n;
    let mut objective = Smoothed {
        problem,
        design,
        offsets: offs.clone(),
        eps: opts.smoothing_start.max(opts.smoothing_end),
    };
    let mut lipschitz = lipschitz_data + 2.0 * problem.lambda1 * (p - 1.0).max(1.0);

    let mut steps = 0;
    let mut converged = false;
    loop {
        let last_stage = objective.eps <= opts.smoothing_end * (1.0 + 1e-9);
        let (stage_done, used) =
            accelerated_descent(&objective, &mut beta, &mut lipschitz, opts, opts.max_steps - steps);
        steps += used;
        if last_stage {
            let polished = opts.polish && newton_polish(&objective, &mut beta, opts);
            converged = stage_done || polished;
            break;
        }
        if steps >= opts.max_steps {
            break;
        }
        objective.eps = (objective.eps * 0.1).max(opts.smoothing_end);
    }
    let beta_blocks = split_blocks(&beta, &offs);
    finish(problem, beta_blocks, None, steps, converged)
}

/// Hessian of the smoothed objective.
fn smoothed_hessian(objective: &Smoothed<'_>, cross: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    let n = objective.problem.n() as f64;
    let lambda = objective.problem.lambda1;
    let p = objective.problem.p;
    let mut h = cross * (2.0 / n);
    let (g, smoothed) = objective.regularizer(beta);
    if g <= 0.0 {
        return h;
    }
    let total: f64 = smoothed.iter().map(|s| s.powf(p)).sum();
    let outer_scale = 2.0 * lambda * total.powf(2.0 / p - 1.0);
    let mut u = DVector::zeros(beta.len());
    for (m, w) in objective.offsets.windows(2).enumerate() {
        let (start, len) = (w[0], w[1] - w[0]);
        let b = beta.rows(start, len);
        let s = smoothed[m];
        let mut block = h.view_mut((start, start), (len, len));
        for i in 0..len {
            block[(i, i)] += outer_scale * s.powf(p - 2.0);
        }
        block.ger(outer_scale * (p - 2.0) * s.powf(p - 4.0), &b, &b, 1.0);
        u.rows_mut(start, len).copy_from(&(b * s.powf(p - 2.0)));
    }
    h.ger(2.0 * lambda * (2.0 - p) * total.powf(2.0 / p - 2.0), &u, &u, 1.0);
    h
}

/// Damped Newton iterations on the final smoothing stage. Returns whether
/// the Newton decrement fell below the tolerance.
fn newton_polish(objective: &Smoothed<'_>, beta: &mut DVector<f64>, opts: &SolverOptions) -> bool {
    const MAX_NEWTON: usize = 100;
    let cross = objective.design.transpose() * &objective.design;
    for _ in 0..MAX_NEWTON {
        let (f, grad) = objective.value_and_gradient(beta);
        let hessian = smoothed_hessian(objective, &cross, beta);
        let Ok(direction) = cholesky_solve(hessian, &grad) else {
            return false;
        };
        let decrement = grad.dot(&direction);
        if !decrement.is_finite() || decrement < 0.0 {
            return false;
        }
        if 0.5 * decrement <= opts.tol_decrease * f.abs().max(f64::MIN_POSITIVE) {
            return true;
        }
        let mut step = 1.0;
        loop {
            let candidate = &*beta - &direction * step;
            if objective.value(&candidate) <= f - 0.25 * step * decrement {
                *beta = candidate;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return false;
            }
        }
    }
    false
}

/// Runs accelerated gradient descent on one smoothing stage. Returns whether
/// the stage met the stopping rule and the number of gradient steps used.
fn accelerated_descent(
    objective: &Smoothed<'_>,
    beta: &mut DVector<f64>,
    lipschitz: &mut f64,
    opts: &SolverOptions,
    budget: usize,
) -> (bool, usize) {
    let mut x = beta.clone();
    let mut fx = objective.value(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut quiet = 0;
    let mut steps = 0;
    while steps < budget {
        steps += 1;
        let (fy, gy) = objective.value_and_gradient(&y);
        let gsq = gy.norm_squared();
        let mut candidate;
        let mut fc;
        loop {
            candidate = &y - &gy * (1.0 / *lipschitz);
            fc = objective.value(&candidate);
            if fc <= fy - 0.5 * gsq / *lipschitz + 1e-15 * fy.abs() {
                break;
            }
            *lipschitz *= 2.0;
            if !lipschitz.is_finite() {
                *beta = x;
                return (false, steps);
            }
        }
        // Stationarity at y: the guaranteed decrease of a gradient step.
        let stationary = 0.5 * gsq / *lipschitz <= opts.tol_obj * fy.abs().max(f64::MIN_POSITIVE);
        if fc > fx {
            // Restart momentum from the last accepted iterate. A failed plain
            // gradient step from that iterate means rounding has taken over.
            let at_anchor = y == x;
            t = 1.0;
            y = x.clone();
            if at_anchor {
                *beta = x;
                return (stationary, steps);
            }
            continue;
        }
        let decrease = fx - fc;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        y = &candidate + (&candidate - &x) * momentum;
        x = candidate;
        fx = fc;
        t = t_next;
        if decrease <= opts.tol_obj * fx.abs().max(f64::MIN_POSITIVE) && stationary {
            quiet += 1;
            if quiet >= 3 {
                *beta = x;
                return (true, steps);
            }
        } else {
            quiet = 0;
        }
        *lipschitz *= 0.95;
    }
    *beta = x;
    (false, steps)
}
