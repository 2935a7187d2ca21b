//! Kernels with controllable Mercer spectra, Gram matrices, symmetric square
//! roots and empirical spectral-decay estimation.
//!
//! The spectral family lives on `[0, 1]` with the cosine basis
//! `phi_k(x) = sqrt(2) cos(pi k x)`, which is orthonormal and zero-mean under
//! the uniform distribution. Its eigenvalues are `mu_k = scale_c * k^(-1/s)`.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of retained eigenfunctions for spectral kernels.
pub const DEFAULT_TRUNCATION: usize = 200;

/// Relative symmetry tolerance accepted for Gram matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues above `-PSD_TOL * largest` are treated as rounding noise.
pub const PSD_TOL: f64 = 1e-10;

/// Diagonal jitter, relative to `trace / n`.
pub const JITTER_REL: f64 = 1e-10;

/// Mercer kernel on `[0, 1]` with a prescribed polynomial spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralKernel {
    pub decay_s: f64,
    pub truncation: usize,
    pub scale_c: f64,
}

impl SpectralKernel {
    pub fn new(decay_s: f64, truncation: usize, scale_c: f64) -> Result<Self> {
        let kernel = Self {
            decay_s,
            truncation,
            scale_c,
        };
        kernel.validate()?;
        Ok(kernel)
    }

    /// Kernel whose scale is chosen so that `sup_x k(x, x) < 1`:
    /// `scale_c = 1 / (1.01 * 2 * sum_k k^(-1/s))`.
    pub fn normalized(decay_s: f64, truncation: usize) -> Result<Self> {
        let probe = Self::new(decay_s, truncation, 1.0)?;
        let mass: f64 = (1..=truncation).map(|k| probe.raw_eigenvalue(k)).sum();
        Self::new(decay_s, truncation, 1.0 / (1.01 * 2.0 * mass))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_s > 0.0 && self.decay_s < 1.0) {
            return Err(Error::Input(format!(
                "spectral decay must lie in (0, 1), got {}",
                self.decay_s
            )));
        }
        if self.truncation == 0 {
            return Err(Error::Input("spectral truncation must be >= 1".into()));
        }
        if !(self.scale_c > 0.0 && self.scale_c.is_finite()) {
            return Err(Error::Input(format!(
                "spectral scale must be positive, got {}",
                self.scale_c
            )));
        }
        Ok(())
    }

    fn raw_eigenvalue(&self, k: usize) -> f64 {
        (k as f64).powf(-1.0 / self.decay_s)
    }

    /// `mu_k` for `k >= 1`.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        self.scale_c * self.raw_eigenvalue(k)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        (1..=self.truncation).map(|k| self.eigenvalue(k)).collect()
    }

    /// `sup_x k(x, x) = 2 * sum_k mu_k`, attained at `x = 0`.
    pub fn sup_diagonal(&self) -> f64 {
        2.0 * self.eigenvalues().iter().sum::<f64>()
    }

    /// Feature matrix with rows `(sqrt(mu_k) phi_k(x_i))_k`, so that
    /// `features * features^T` is the Gram matrix on `xs`.
    pub fn features(&self, xs: &[f64]) -> Result<DMatrix<f64>> {
        check_unit_interval(xs)?;
        let roots: Vec<f64> = self.eigenvalues().iter().map(|m| m.sqrt()).collect();
        let mut out = DMatrix::zeros(xs.len(), self.truncation);
        let mut row = vec![0.0; self.truncation];
        for (i, &x) in xs.iter().enumerate() {
            cosine_basis(x, &mut row);
            for (k, value) in row.iter().enumerate() {
                out[(i, k)] = roots[k] * value;
            }
        }
        Ok(out)
    }
}

/// Fills `out[k-1] = phi_k(x)` for `k = 1..=out.len()` using the Chebyshev
/// recurrence `cos((k+1)t) = 2 cos(t) cos(kt) - cos((k-1)t)`.
pub fn cosine_basis(x: f64, out: &mut [f64]) {
    let t = PI * x;
    let c1 = t.cos();
    let (mut prev, mut cur) = (1.0, c1);
    for slot in out.iter_mut() {
        *slot = SQRT_2 * cur;
        let next = 2.0 * c1 * cur - prev;
        prev = cur;
        cur = next;
    }
}

fn check_unit_interval(xs: &[f64]) -> Result<()> {
    match xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(&value) => Err(Error::Domain { value }),
        None => Ok(()),
    }
}

/// Declarative kernel description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Spectral(SpectralKernel),
    Gaussian { bandwidth: f64 },
    Precomputed { gram_path: PathBuf },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelSpec::Spectral(k) => k.validate(),
            KernelSpec::Gaussian { bandwidth } if !(*bandwidth > 0.0) => Err(Error::Input(format!(
                "gaussian bandwidth must be positive, got {bandwidth}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Evaluates `k(x, x')`. Spectral kernels take one-dimensional points in `[0, 1]`.
pub fn eval_kernel(spec: &KernelSpec, x: &[f64], x_prime: &[f64]) -> Result<f64> {
    spec.validate()?;
    if x.len() != x_prime.len() {
        return Err(Error::Input(format!(
            "point dimensions differ: {} vs {}",
            x.len(),
            x_prime.len()
        )));
    }
    match spec {
        KernelSpec::Spectral(k) => {
            if x.len() != 1 {
                return Err(Error::Input(format!(
                    "spectral kernels act on scalars, got dimension {}",
                    x.len()
                )));
            }
            check_unit_interval(x)?;
            check_unit_interval(x_prime)?;
            let (a, b) = (PI * x[0], PI * x_prime[0]);
            Ok((1..=k.truncation)
                .map(|j| {
                    let kf = j as f64;
                    2.0 * k.eigenvalue(j) * ((kf * a).cos() * (kf * b).cos())
                })
                .sum())
        }
        KernelSpec::Gaussian { bandwidth } => {
            let sq: f64 = x.iter().zip(x_prime).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((-sq / (2.0 * bandwidth * bandwidth)).exp())
        }
        KernelSpec::Precomputed { .. } => Err(Error::Input("precomputed kernels have no point evaluation".into())),
    }
}

/// Symmetric PSD kernel matrix on a shared point set.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: DMatrix<f64>,
    jitter_applied: f64,
}

impl GramMatrix {
    /// Wraps a square matrix after checking symmetry; the stored matrix is
    /// exactly symmetrized.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(Error::Input(format!(
                "Gram matrix must be square and nonempty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("Gram matrix has non-finite entries".into()));
        }
        let scale = values.amax().max(f64::MIN_POSITIVE);
        let n = values.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (values[(i, j)] - values[(j, i)]).abs();
                if gap > SYMMETRY_TOL * scale {
                    return Err(Error::Input(format!(
                        "Gram matrix is not symmetric at ({i}, {j}): gap {gap:e}"
                    )));
                }
            }
        }
        let sym = (&values + values.transpose()) * 0.5;
        Ok(Self {
            values: sym,
            jitter_applied: 0.0,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    /// Copy with `1e-10 * trace / n` added to the diagonal.
    pub fn with_jitter(&self) -> Self {
        let n = self.n();
        let jitter = JITTER_REL * self.values.trace().max(0.0) / n as f64;
        let mut values = self.values.clone();
        for i in 0..n {
            values[(i, i)] += jitter;
        }
        Self {
            values,
            jitter_applied: self.jitter_applied + jitter,
        }
    }

    /// Eigenvalues sorted in decreasing order.
    pub fn eigenvalues_desc(&self) -> Vec<f64> {
        let mut eig: Vec<f64> = self.values.clone().symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        eig
    }

    /// Fails when an eigenvalue is below `-1e-10 * largest`.
    pub fn check_psd(&self) -> Result<()> {
        let eig = self.eigenvalues_desc();
        let top = eig[0].max(0.0);
        let low = *eig.last().unwrap();
        if low < -PSD_TOL * top || (top == 0.0 && low < 0.0) {
            return Err(Error::Input(format!(
                "Gram matrix is not positive semidefinite: eigenvalue {low:e} (largest {top:e})"
            )));
        }
        Ok(())
    }

    /// Reads an `n x n` comma-separated matrix.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .enumerate()
                .map(|(col, field)| {
                    field.trim().parse::<f64>().map_err(|e| {
                        Error::parse(
                            format!("{}:{}: field {}", path.display(), line_no + 1, col + 1),
                            format!("{e} ({:?})", field.trim()),
                        )
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let n = rows.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::parse(
                format!("{}:{}", path.display(), i + 1),
                format!("expected {n} values, found {}", row.len()),
            ));
        }
        if n == 0 {
            return Err(Error::parse(path.display().to_string(), "empty Gram file"));
        }
        let values = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        GramMatrix::new(values).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n() {
            for j in 0..self.n() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{:e}", self.values[(i, j)]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Gram matrix `G[i][j] = k(points[i], points[j])`.
pub fn gram(spec: &KernelSpec, points: &[Vec<f64>]) -> Result<GramMatrix> {
    spec.validate()?;
    if points.is_empty() && !matches!(spec, KernelSpec::Precomputed { .. }) {
        return Err(Error::Input("gram needs at least one point".into()));
    }
    let values = match spec {
        KernelSpec::Spectral(k) => {
            let xs = points
                .iter()
                .map(|p| match p.as_slice() {
                    [x] => Ok(*x),
                    _ => Err(Error::Input(format!(
                        "spectral kernels act on scalars, got dimension {}",
                        p.len()
                    ))),
                })
                .collect::<Result<Vec<f64>>>()?;
            let features = k.features(&xs)?;
            &features * features.transpose()
        }
        KernelSpec::Gaussian { .. } => {
            let n = points.len();
            let mut g = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = eval_kernel(spec, &points[i], &points[j])?;
                    g[(i, j)] = v;
                    g[(j, i)] = v;
                }
            }
            g
        }
        KernelSpec::Precomputed { gram_path } => {
            let g = GramMatrix::load_csv(gram_path)?;
            if !points.is_empty() && g.n() != points.len() {
                return Err(Error::Input(format!(
                    "precomputed Gram has {} rows but {} points were given",
                    g.n(),
                    points.len()
                )));
            }
            return Ok(g);
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("kernel produced a non-finite value".into()));
    }
    GramMatrix::new(values)
}

/// Symmetric PSD square root `S` with `S * S = G`; negative eigenvalues are
/// clamped to zero first.
pub fn gram_sqrt(g: &GramMatrix) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(g.values().clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    let s = &scaled * eig.eigenvectors.transpose();
    Ok((&s + s.transpose()) * 0.5)
}

/// Default fitting window `[2, min(30, n/4)]`.
pub fn default_decay_window(n: usize) -> RangeInclusive<usize> {
    2..=30.min(n / 4)
}

/// Estimated decay exponent `s` from the spectrum of `G / n`, fitting
/// `log mu_k` against `log k` over `k_range` (1-based indices).
pub fn estimate_decay(g: &GramMatrix, k_range: RangeInclusive<usize>) -> Result<f64> {
    let n = g.n() as f64;
    let spectrum: Vec<f64> = g.eigenvalues_desc().into_iter().map(|v| v / n).collect();
    estimate_decay_from_spectrum(&spectrum, k_range)
}

/// Same as [`estimate_decay`] on an explicit decreasing spectrum.
pub fn estimate_decay_from_spectrum(spectrum: &[f64], k_range: RangeInclusive<usize>) -> Result<f64> {
    let top = spectrum.iter().copied().fold(0.0, f64::max);
    let floor = PSD_TOL * top;
    let (lo, hi) = (*k_range.start().max(&1), *k_range.end());
    let points: Vec<(f64, f64)> = (lo..=hi)
        .filter(|&k| k <= spectrum.len() && spectrum[k - 1] > floor)
        .map(|k| ((k as f64).ln(), spectrum[k - 1].ln()))
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "decay fit needs at least 3 positive eigenvalues in [{lo}, {hi}], found {}",
            points.len()
        )));
    }
    let fit = crate::stats::least_squares_line(&points)?;
    if !(fit.slope < 0.0) {
        return Err(Error::Numeric(format!(
            "spectrum is not decaying (fitted slope {})",
            fit.slope
        )));
    }
    Ok(-1.0 / fit.slope)
}
