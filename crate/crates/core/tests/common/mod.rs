#![allow(dead_code)]

use lpmkl::{gram, GramMatrix, KernelSpec, SpectralKernel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomProblem {
    pub grams: Vec<GramMatrix>,
    pub y: DVector<f64>,
    pub lambda: f64,
}

/// Small problems with `n <= 30`, `M <= 4`, mixing Gaussian kernels on one or
/// two coordinates and spectral kernels on one coordinate.
pub fn battery(count: usize, seed: u64) -> Vec<RandomProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_problem(&mut rng)).collect()
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> RandomProblem {
    let n = rng.random_range(6..=30);
    let m = rng.random_range(1..=4);
    let points: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
    let grams = (0..m)
        .map(|j| {
            if rng.random_bool(0.5) {
                let width = rng.random_range(0.15..1.0);
                let dims = rng.random_range(1..=2);
                let pts: Vec<Vec<f64>> = points
                    .iter()
                    .map(|x| (0..dims).map(|d| x[(j + d) % 4]).collect())
                    .collect();
                gram(&KernelSpec::Gaussian { bandwidth: width }, &pts).unwrap()
            } else {
                let s = rng.random_range(0.3..0.7);
                let kernel = SpectralKernel::normalized(s, 50).unwrap();
                let pts: Vec<Vec<f64>> = points.iter().map(|x| vec![x[j]]).collect();
                gram(&KernelSpec::Spectral(kernel), &pts).unwrap()
            }
        })
        .collect();
    let y = DVector::from_fn(n, |i, _| {
        let x = &points[i];
        (3.0 * x[0]).sin() + 0.5 * x[1] * x[1] + rng.random_range(-0.3..0.3)
    });
    let lambda = 10f64.powf(rng.random_range(-3.0..-1.0));
    RandomProblem { grams, y, lambda }
}

/// Kernel ridge `alpha = (K + n lambda I)^{-1} y` with fitted values and the
/// objective `(1/n)||y - K alpha||^2 + lambda alpha^T K alpha`.
pub struct RidgeOracle {
    pub fitted: DVector<f64>,
    pub objective: f64,
}

pub fn ridge_oracle(k: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> RidgeOracle {
    let n = y.len();
    let system = k + DMatrix::identity(n, n) * (n as f64 * lambda);
    let alpha = system.lu().solve(y).expect("ridge system is regular");
    let fitted = k * &alpha;
    let residual = y - &fitted;
    let objective = residual.norm_squared() / n as f64 + lambda * alpha.dot(&(k * &alpha));
    RidgeOracle { fitted, objective }
}

pub fn sum_gram(grams: &[GramMatrix]) -> DMatrix<f64> {
    grams
        .iter()
        .fold(DMatrix::zeros(grams[0].n(), grams[0].n()), |acc, g| acc + g.values())
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Prints past the test harness's output capture.
pub fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}
