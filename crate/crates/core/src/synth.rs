//! Product-space synthetic design: `M` independent uniform coordinates, one
//! shared spectral RKHS acting on each coordinate, truths with prescribed
//! per-block RKHS norms and bounded uniform noise.
//!
//! Because the cosine basis is zero-mean and the coordinates are independent,
//! the blocks are orthogonal in `L2`, so `||sum_m f_m||^2 = sum_m ||f_m||^2`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{cosine_basis, KernelSpec, SpectralKernel};
use crate::stats::mean_and_stderr;

pub const DEFAULT_TRUTH_TRUNCATION: usize = 50;

/// SplitMix64 finalizer folded over `parts`; used to derive independent
/// seeds for cells, replicates and streams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &part in parts {
        state ^= part;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Sparse,
    Dense,
    Custom,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::Sparse => "sparse",
            Pattern::Dense => "dense",
            Pattern::Custom => "custom",
        }
    }

    /// Norm pattern of a named shape: `(1, 0, ..., 0)` or `(1, ..., 1)`.
    pub fn norms(self, m: usize) -> Result<Vec<f64>> {
        match self {
            Pattern::Sparse => {
                let mut v = vec![0.0; m];
                v[0] = 1.0;
                Ok(v)
            }
            Pattern::Dense => Ok(vec![1.0; m]),
            Pattern::Custom => Err(Error::Input("custom patterns carry explicit norms".into())),
        }
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(Pattern::Sparse),
            "dense" => Ok(Pattern::Dense),
            "custom" => Ok(Pattern::Custom),
            other => Err(Error::Input(format!("unknown pattern {other:?}"))),
        }
    }
}

fn default_truth_truncation() -> usize {
    DEFAULT_TRUTH_TRUNCATION
}

/// Target block norms `||f*_m||_H` and how the truth is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub norm_pattern: Vec<f64>,
    pub pattern_name: Pattern,
    #[serde(default = "default_truth_truncation")]
    pub truth_truncation: usize,
    pub seed: u64,
}

impl TruthSpec {
    pub fn named(pattern: Pattern, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::Input("truth needs at least one block".into()));
        }
        Ok(Self {
            norm_pattern: pattern.norms(m)?,
            pattern_name: pattern,
            truth_truncation: DEFAULT_TRUTH_TRUNCATION,
            seed,
        })
    }

    pub fn custom(norm_pattern: Vec<f64>, seed: u64) -> Self {
        Self {
            norm_pattern,
            pattern_name: Pattern::Custom,
            truth_truncation: DEFAULT_TRUTH_TRUNCATION,
            seed,
        }
    }
}

/// Additive function `f(x) = sum_m sum_k c[m][k] phi_k(x_m)` on `[0, 1]^M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineExpansion {
    pub blocks: Vec<Vec<f64>>,
}

impl CosineExpansion {
    pub fn dim(&self) -> usize {
        self.blocks.len()
    }

    pub fn eval_block(&self, m: usize, x: f64) -> f64 {
        let coefs = &self.blocks[m];
        let mut basis = vec![0.0; coefs.len()];
        cosine_basis(x, &mut basis);
        coefs.iter().zip(&basis).map(|(c, b)| c * b).sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let longest = self.blocks.iter().map(Vec::len).max().unwrap_or(0);
        let mut basis = vec![0.0; longest];
        let mut total = 0.0;
        for (coefs, &xm) in self.blocks.iter().zip(x) {
            cosine_basis(xm, &mut basis[..coefs.len()]);
            total += coefs.iter().zip(&basis).map(|(c, b)| c * b).sum::<f64>();
        }
        total
    }

    /// Exact `||f||^2_{L2}` under the uniform product design.
    pub fn l2_norm_sq(&self) -> f64 {
        self.blocks.iter().flatten().map(|c| c * c).sum()
    }

    /// `f - other`, padding the shorter blocks with zeros.
    pub fn minus(&self, other: &CosineExpansion) -> Result<CosineExpansion> {
        if self.dim() != other.dim() {
            return Err(Error::Input("expansions have different block counts".into()));
        }
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(a, b)| {
                let len = a.len().max(b.len());
                (0..len)
                    .map(|k| a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        Ok(CosineExpansion { blocks })
    }
}

/// A drawn truth `f* = sum_m f*_m` with its kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub kernel: SpectralKernel,
    pub pattern: Pattern,
    pub seed: u64,
    pub expansion: CosineExpansion,
}

impl Truth {
    pub fn num_blocks(&self) -> usize {
        self.expansion.dim()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.expansion.eval(x)
    }

    /// `||f*_m||_H = (sum_k b_{m,k}^2 / mu_k)^(1/2)`.
    pub fn rkhs_norm(&self, m: usize) -> f64 {
        self.expansion.blocks[m]
            .iter()
            .enumerate()
            .map(|(k, b)| b * b / self.kernel.eigenvalue(k + 1))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("truth serializes")
    }
}

/// Draws `b_{m,k} = g_k mu_k` with standard normal `g_k` for `k <= truth_truncation`
/// and rescales each block to its target RKHS norm. Blocks with target zero are
/// identically zero. Every block consumes its draws, so block `m` is identical
/// across patterns that share a seed.
pub fn build_truth(spec: &TruthSpec, kernel: &KernelSpec) -> Result<Truth> {
    let KernelSpec::Spectral(kernel) = kernel else {
        return Err(Error::Input("truths are built from spectral kernels".into()));
    };
    kernel.validate()?;
    if spec.norm_pattern.is_empty() {
        return Err(Error::Input("norm pattern is empty".into()));
    }
    if spec.norm_pattern.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Input(
            "norm pattern entries must be finite and nonnegative".into(),
        ));
    }
    let truncation = spec.truth_truncation;
    if truncation == 0 || truncation > kernel.truncation {
        return Err(Error::Input(format!(
            "truth truncation {truncation} must lie in [1, {}]",
            kernel.truncation
        )));
    }
    let mu = kernel.eigenvalues();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut blocks = Vec::with_capacity(spec.norm_pattern.len());
    for (m, &target) in spec.norm_pattern.iter().enumerate() {
        let mut coefs = draw_block(&mut rng, &mu[..truncation]);
        if coefs.iter().all(|&c| c == 0.0) {
            coefs = draw_block(&mut rng, &mu[..truncation]);
            if coefs.iter().all(|&c| c == 0.0) {
                return Err(Error::Numeric(format!("block {m}: coefficient draw vanished twice")));
            }
        }
        if target == 0.0 {
            blocks.push(vec![0.0; truncation]);
            continue;
        }
        let norm = coefs.iter().zip(&mu).map(|(b, m)| b * b / m).sum::<f64>().sqrt();
        let scale = target / norm;
        blocks.push(coefs.iter().map(|b| b * scale).collect());
    }
    Ok(Truth {
        kernel: *kernel,
        pattern: spec.pattern_name,
        seed: spec.seed,
        expansion: CosineExpansion { blocks },
    })
}

fn draw_block(rng: &mut ChaCha8Rng, mu: &[f64]) -> Vec<f64> {
    mu.iter()
        .map(|m| {
            let g: f64 = rng.sample(StandardNormal);
            g * m
        })
        .collect()
}

/// `n` samples of the additive model with uniform noise on `[-L, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x M`, column `m` feeding block `m`.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// `f*(x_i)`.
    pub truth_values: DVector<f64>,
    pub noise_bound: f64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        self.x.column(m).iter().copied().collect()
    }

    /// CSV with header `x_1,...,x_M,y`.
    pub fn to_csv(&self) -> String {
        let m = self.x.ncols();
        let mut out = String::new();
        let header: Vec<String> = (1..=m).map(|j| format!("x_{j}")).chain(["y".to_string()]).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.n() {
            for j in 0..m {
                write!(out, "{},", self.x[(i, j)]).unwrap();
            }
            writeln!(out, "{}", self.y[i]).unwrap();
        }
        out
    }
}

pub fn sample_dataset(truth: &Truth, n: usize, noise_bound: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Input("dataset needs n >= 1".into()));
    }
    if !(noise_bound > 0.0 && noise_bound.is_finite()) {
        return Err(Error::Input(format!("noise bound must be positive, got {noise_bound}")));
    }
    let m = truth.num_blocks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>());
    let truth_values = DVector::from_fn(n, |i, _| {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        truth.eval(&row)
    });
    let y = DVector::from_fn(n, |i, _| truth_values[i] + rng.random_range(-noise_bound..=noise_bound));
    Ok(Dataset {
        x,
        y,
        truth_values,
        noise_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of `||estimate - truth||^2_{L2}` over `n_test` fresh
/// uniform points in `[0, 1]^dim`.
pub fn measure_l2_error<E, T>(estimate: E, truth: T, dim: usize, n_test: usize, seed: u64) -> Result<ErrorEstimate>
where
    E: Fn(&[f64]) -> f64,
    T: Fn(&[f64]) -> f64,
{
    if n_test == 0 {
        return Err(Error::Input("n_test must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point = vec![0.0; dim];
    let sq: Vec<f64> = (0..n_test)
        .map(|_| {
            point.iter_mut().for_each(|v| *v = rng.random::<f64>());
            (estimate(&point) - truth(&point)).powi(2)
        })
        .collect();
    let (mean, stderr) = mean_and_stderr(&sq);
    Ok(ErrorEstimate { mean, stderr })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn kernel() -> KernelSpec {
        KernelSpec::Spectral(SpectralKernel::normalized(0.5, 200).unwrap())
    }

    #[test]
    fn zero_target_gives_zero_block() {
        let truth = build_truth(&TruthSpec::named(Pattern::Sparse, 3, 9).unwrap(), &kernel()).unwrap();
        assert!(truth.expansion.blocks[1].iter().all(|&c| c == 0.0));
        assert_eq!(truth.expansion.eval_block(2, 0.37), 0.0);
    }

    #[test]
    fn built_norms_hit_targets() {
        let spec = TruthSpec::custom(vec![0.5, 2.0, 1.0, 0.0], 4);
        let truth = build_truth(&spec, &kernel()).unwrap();
        for (m, &target) in spec.norm_pattern.iter().enumerate() {
            assert!((truth.rkhs_norm(m) - target).abs() <= 1e-10 * target.max(1.0));
        }
    }

    #[test]
    fn sparse_and_dense_share_first_block() {
        let s = build_truth(&TruthSpec::named(Pattern::Sparse, 4, 21).unwrap(), &kernel()).unwrap();
        let d = build_truth(&TruthSpec::named(Pattern::Dense, 4, 21).unwrap(), &kernel()).unwrap();
        assert_eq!(s.expansion.blocks[0], d.expansion.blocks[0]);
    }

    #[test]
    fn truth_requires_spectral_kernel() {
        let spec = TruthSpec::named(Pattern::Dense, 2, 0).unwrap();
        assert!(build_truth(&spec, &KernelSpec::Gaussian { bandwidth: 1.0 }).is_err());
        let mut long = spec.clone();
        long.truth_truncation = 500;
        assert!(build_truth(&long, &kernel()).is_err());
    }

    #[test]
    fn vanishing_noise_reproduces_truth() {
        let truth = build_truth(&TruthSpec::named(Pattern::Dense, 2, 1).unwrap(), &kernel()).unwrap();
        let data = sample_dataset(&truth, 50, 1e-12, 3).unwrap();
        assert!((&data.y - &data.truth_values).amax() <= 1e-10);
    }

    #[test]
    fn datasets_are_deterministic() {
        let truth = build_truth(&TruthSpec::named(Pattern::Dense, 3, 1).unwrap(), &kernel()).unwrap();
        let a = sample_dataset(&truth, 40, 0.5, 77).unwrap();
        let b = sample_dataset(&truth, 40, 0.5, 77).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with("x_1,x_2,x_3,y\n"));
    }

    #[test]
    fn error_of_exact_and_shifted_estimates() {
        let truth = build_truth(&TruthSpec::named(Pattern::Dense, 2, 5).unwrap(), &kernel()).unwrap();
        let f = |x: &[f64]| truth.eval(x);
        let exact = measure_l2_error(f, f, 2, 1000, 1).unwrap();
        assert_eq!(exact.mean, 0.0);
        let shifted = measure_l2_error(|x: &[f64]| f(x) + 0.3, f, 2, 1000, 1).unwrap();
        assert_relative_eq!(shifted.mean, 0.09, max_relative = 1e-12);
    }

    #[test]
    fn mixed_seeds_differ_by_component() {
        assert_ne!(mix_seed(&[1, 2, 3]), mix_seed(&[1, 2, 4]));
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[5, 6]), mix_seed(&[5, 6]));
    }
}
