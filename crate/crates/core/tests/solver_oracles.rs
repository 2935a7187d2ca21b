mod common;

use common::{battery, random_problem, rel_diff, ridge_oracle, sum_gram};
use lpmkl::{
    gram_sqrt, objective_value, solve, solve_direct, solve_theta_path, theta_update, Error, GramMatrix, MklProblem,
    MklSolution, SolverOptions,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn problem_for(prob: &common::RandomProblem, p: f64) -> MklProblem {
    MklProblem::new(prob.y.clone(), &prob.grams, p, prob.lambda).unwrap()
}

#[test]
fn single_kernel_matches_ridge_closed_form_for_every_p() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seen = 0;
    while seen < 8 {
        let prob = random_problem(&mut rng);
        if prob.grams.len() != 1 {
            continue;
        }
        seen += 1;
        let oracle = ridge_oracle(prob.grams[0].values(), &prob.y, prob.lambda);
        for p in [1.0, 1.3, 2.0, 3.0, 6.0] {
            let sol = solve(&problem_for(&prob, p), &SolverOptions::default()).unwrap();
            let gap = (&sol.fitted - &oracle.fitted).amax();
            assert!(gap <= 1e-8, "p = {p}: fitted gap {gap:e}");
        }
    }
}

#[test]
fn p_two_matches_sum_kernel_ridge() {
    for prob in battery(20, 12) {
        let oracle = ridge_oracle(&sum_gram(&prob.grams), &prob.y, prob.lambda);
        let sol = solve(&problem_for(&prob, 2.0), &SolverOptions::default()).unwrap();
        assert!((&sol.fitted - &oracle.fitted).amax() <= 1e-6);
        assert!(rel_diff(sol.objective, oracle.objective) <= 1e-10);
    }
}

#[test]
fn symmetric_pair_at_p_one_and_a_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let prob = loop {
        let p = random_problem(&mut rng);
        if p.grams.len() == 1 {
            break p;
        }
    };
    let grams = vec![prob.grams[0].clone(), prob.grams[0].clone()];
    let problem = MklProblem::new(prob.y.clone(), &grams, 1.5, prob.lambda).unwrap();
    let sol = solve_theta_path(&problem, &SolverOptions::default()).unwrap();
    let theta = sol.theta.unwrap();
    let expected = 2f64.powf(-1.0 / 3.0);
    assert!(
        (theta[0] - expected).abs() < 1e-10 && (theta[1] - expected).abs() < 1e-10,
        "{theta:?}"
    );
}

#[test]
fn theta_path_agrees_with_direct_solver_at_p_one_and_a_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut seen = 0;
    while seen < 10 {
        let prob = random_problem(&mut rng);
        if prob.grams.len() != 3 {
            continue;
        }
        seen += 1;
        let problem = problem_for(&prob, 1.5);
        let a = solve_theta_path(&problem, &SolverOptions::default()).unwrap();
        let b = solve_direct(&problem, &SolverOptions::default()).unwrap();
        assert!((a.objective - b.objective).abs() <= 1e-6 * (1.0 + a.objective.abs()));
    }
}

/// Minimizes `a1/t1 + a2/t2` on `t1^2 + t2^2 = 1` by golden-section search
/// over the angle.
fn constrained_oracle(a: [f64; 2]) -> [f64; 2] {
    let f = |t: f64| a[0] / t.cos() + a[1] / t.sin();
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (1e-9, std::f64::consts::FRAC_PI_2 - 1e-9);
    for _ in 0..200 {
        let x1 = hi - ratio * (hi - lo);
        let x2 = lo + ratio * (hi - lo);
        if f(x1) < f(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let t = 0.5 * (lo + hi);
    [t.cos(), t.sin()]
}

#[test]
fn theta_update_solves_the_weight_subproblem() {
    let theta = theta_update(&[2.0, 1.0], 4.0 / 3.0).unwrap();
    let oracle = constrained_oracle([4.0, 1.0]);
    assert!((theta[0] - oracle[0]).abs() < 1e-8 && (theta[1] - oracle[1]).abs() < 1e-8);
    assert!((theta[0].powi(2) + theta[1].powi(2) - 1.0).abs() < 1e-10);
}

#[test]
fn theta_path_objective_never_increases() {
    for prob in battery(10, 15) {
        let problem = problem_for(&prob, 1.2);
        let mut previous = f64::INFINITY;
        for sweeps in 1..15 {
            let opts = SolverOptions {
                max_sweeps: sweeps,
                tol_decrease: 0.0,
                ..SolverOptions::default()
            };
            let obj = solve_theta_path(&problem, &opts).unwrap().objective;
            assert!(obj <= previous * (1.0 + 1e-12), "sweep {sweeps}: {obj} > {previous}");
            previous = obj;
        }
    }
}

#[test]
fn theta_path_rejects_p_above_two() {
    let prob = &battery(1, 16)[0];
    let err = solve_theta_path(&problem_for(prob, 2.5), &SolverOptions::default()).unwrap_err();
    assert!(matches!(err, Error::UnsupportedFormulation(_)));
}

#[test]
fn solution_invariants_hold() {
    for prob in battery(12, 17) {
        for p in [1.0, 1.5, 2.0, 3.0] {
            let problem = problem_for(&prob, p);
            let sol = solve(&problem, &SolverOptions::default()).unwrap();
            for (beta, norm) in sol.beta_blocks.iter().zip(&sol.block_norms) {
                assert!((beta.norm() - norm).abs() <= 1e-10);
            }
            let recomputed = objective_value(&problem, &sol.beta_blocks).unwrap();
            assert!(rel_diff(sol.objective, recomputed) <= 1e-10);
            if let (Some(theta), true) = (&sol.theta, p < 2.0) {
                let q = p / (2.0 - p);
                let total: f64 = theta.iter().map(|t| t.powf(q)).sum();
                assert!(theta.iter().all(|t| *t >= 0.0));
                assert!((total - 1.0).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn objective_matches_hand_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let n = 5;
    let grams: Vec<GramMatrix> = (0..2)
        .map(|_| {
            let a = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
            GramMatrix::new(&a * a.transpose()).unwrap()
        })
        .collect();
    let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let (p, lambda) = (1.7, 0.3);
    let problem = MklProblem::new(y.clone(), &grams, p, lambda).unwrap();
    let blocks: Vec<DVector<f64>> = (0..2)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();

    let mut residual = 0.0;
    for i in 0..n {
        let mut fit = 0.0;
        for (m, block) in blocks.iter().enumerate() {
            let factor = problem.factor(m);
            for j in 0..n {
                fit += factor[(i, j)] * block[j];
            }
        }
        residual += (y[i] - fit).powi(2);
    }
    let norms: Vec<f64> = blocks
        .iter()
        .map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mixed = (norms[0].powf(p) + norms[1].powf(p)).powf(1.0 / p);
    let expected = residual / n as f64 + lambda * mixed * mixed;
    assert!(rel_diff(objective_value(&problem, &blocks).unwrap(), expected) <= 1e-12);

    let zero = vec![DVector::zeros(n), DVector::zeros(n)];
    assert!(rel_diff(objective_value(&problem, &zero).unwrap(), y.norm_squared() / n as f64) <= 1e-15);
}

#[test]
fn factors_are_gram_square_roots() {
    for prob in battery(8, 19) {
        for g in &prob.grams {
            let s = gram_sqrt(g).unwrap();
            assert!((&s * &s - g.values()).amax() <= 1e-8);
            assert!((&s - s.transpose()).amax() <= 1e-12);
        }
    }
}

#[test]
fn zero_response_gives_zero_blocks() {
    let prob = &battery(1, 20)[0];
    for p in [1.0, 1.5, 2.0, 4.0] {
        let problem = MklProblem::new(DVector::zeros(prob.y.len()), &prob.grams, p, 0.1).unwrap();
        let sol = solve(&problem, &SolverOptions::default()).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert!(sol.block_norms.iter().all(|v| *v == 0.0));
    }
}

/// One-sided directional derivative of the unsmoothed objective. Blocks whose
/// norm is below `1e-8` of the largest are snapped to zero first.
fn directional_derivative(problem: &MklProblem, sol: &MklSolution, dir: &[DVector<f64>]) -> f64 {
    let n = problem.n() as f64;
    let p = problem.p();
    let largest = sol.block_norms.iter().copied().fold(0.0, f64::max);
    let blocks: Vec<DVector<f64>> = sol
        .beta_blocks
        .iter()
        .map(|b| {
            if b.norm() <= 1e-8 * largest {
                DVector::zeros(b.len())
            } else {
                b.clone()
            }
        })
        .collect();
    let fitted = problem.predict(&blocks).unwrap();
    let residual = problem.y() - fitted;
    let change = problem.predict(dir).unwrap();
    let data = -2.0 / n * residual.dot(&change);

    let norms: Vec<f64> = blocks.iter().map(|b| b.norm()).collect();
    let total: f64 = norms.iter().map(|v| v.powf(p)).sum();
    if total == 0.0 {
        // g = (sum ||b||^p)^(2/p) is quadratic in the scale near zero.
        return data;
    }
    let mut inner = 0.0;
    for ((b, d), norm) in blocks.iter().zip(dir).zip(&norms) {
        inner += if *norm > 0.0 {
            p * norm.powf(p - 2.0) * b.dot(d)
        } else if p == 1.0 {
            d.norm()
        } else {
            0.0
        };
    }
    data + problem.lambda1() * (2.0 / p) * total.powf(2.0 / p - 1.0) * inner
}

#[test]
fn returned_points_are_stationary() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for prob in battery(10, 22) {
        for p in [1.0, 1.5, 2.0, 3.0, 5.0] {
            let problem = problem_for(&prob, p);
            let sol = solve(&problem, &SolverOptions::default()).unwrap();
            for _ in 0..64 {
                let dir: Vec<DVector<f64>> = sol
                    .beta_blocks
                    .iter()
                    .map(|b| DVector::from_fn(b.len(), |_, _| rng.random_range(-1.0..1.0)))
                    .collect();
                let scale = dir.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
                let dir: Vec<DVector<f64>> = dir.into_iter().map(|d| d / scale).collect();
                let dd = directional_derivative(&problem, &sol, &dir);
                assert!(dd >= -1e-6, "p = {p}: directional derivative {dd:e}");
            }
        }
    }
}

#[test]
fn mixed_norm_shrinks_along_the_regularization_path() {
    for prob in battery(6, 23) {
        for p in [1.0, 1.5, 2.0, 3.0] {
            let mut previous = f64::INFINITY;
            for k in 0..12 {
                let lambda = 10f64.powf(-4.0 + 0.4 * k as f64);
                let problem = MklProblem::new(prob.y.clone(), &prob.grams, p, lambda).unwrap();
                let sol = solve(&problem, &SolverOptions::default()).unwrap();
                let aggregate = sol.block_norms.iter().map(|v| v.powf(p)).sum::<f64>().powf(1.0 / p);
                assert!(aggregate <= previous * (1.0 + 1e-6), "p = {p}, lambda = {lambda:e}");
                previous = aggregate;
            }
        }
    }
}

#[test]
fn p_one_selects_the_active_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let n = 40;
    let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let kernel = lpmkl::KernelSpec::Spectral(lpmkl::SpectralKernel::normalized(0.5, 50).unwrap());
    let grams: Vec<GramMatrix> = (0..3)
        .map(|m| {
            let pts: Vec<Vec<f64>> = points.iter().map(|x| vec![x[m]]).collect();
            lpmkl::gram(&kernel, &pts).unwrap()
        })
        .collect();
    let y = DVector::from_fn(n, |i, _| (2.0 * std::f64::consts::PI * points[i][0]).cos());
    let problem = MklProblem::new(y, &grams, 1.0, 0.05).unwrap();
    let sol = solve(&problem, &SolverOptions::default()).unwrap();
    assert!(sol.block_norms[0] > 1e-2);
    assert!(
        sol.block_norms[1] < 1e-6 && sol.block_norms[2] < 1e-6,
        "{:?}",
        sol.block_norms
    );
}

#[test]
fn objective_is_convex_along_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for prob in battery(10, 26) {
        for p in [1.0, 1.5, 3.0] {
            let problem = problem_for(&prob, p);
            let n = problem.n();
            let draw = |rng: &mut ChaCha8Rng| -> Vec<DVector<f64>> {
                (0..problem.num_kernels())
                    .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0)))
                    .collect()
            };
            let (a, b) = (draw(&mut rng), draw(&mut rng));
            let mid: Vec<DVector<f64>> = a.iter().zip(&b).map(|(x, y)| (x + y) * 0.5).collect();
            let lhs = objective_value(&problem, &mid).unwrap();
            let rhs = 0.5 * objective_value(&problem, &a).unwrap() + 0.5 * objective_value(&problem, &b).unwrap();
            assert!(lhs <= rhs + 1e-12);
        }
    }
}
