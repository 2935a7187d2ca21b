use lpmkl::kernel::{gram, GramMatrix, KernelSpec, SpectralKernel};
use lpmkl::theory::{
    kappa_estimate, localized_rate, optimal_lambda, predicted_rate, u_n_bound, zeta_branches, zeta_n, TheoryParams,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(n: u64, m: u64, p: f64, s: f64) -> TheoryParams {
    TheoryParams::new(n, m, p, s, 1.0).unwrap()
}

/// The three terms written out from scratch with `1/p` in place of `s/p`.
fn zeta_terms(n: f64, m: f64, p: f64, s: f64, lambda: f64) -> [f64; 3] {
    let inv_p = if p.is_infinite() { 0.0 } else { 1.0 / p };
    let log_m = if m >= 2.0 { m.ln() } else { 1.0 };
    let a = (m * log_m / n).sqrt();
    let b = m.powf(0.5 + 0.5 * s - s * inv_p) / (n.sqrt() * lambda.powf(0.5 * s));
    let m_pow = ((1.0 + 4.0 * s - s * s) / 2.0 - s * (3.0 - s) * inv_p) / (1.0 + s);
    let c = m.powf(m_pow) / (lambda.powf(s * (3.0 - s) / (2.0 * (1.0 + s))) * n.powf(1.0 / (1.0 + s)));
    [a, b, c]
}

fn dominant(t: [f64; 3]) -> usize {
    (0..3).max_by(|&i, &j| t[i].total_cmp(&t[j])).unwrap()
}

#[test]
fn each_zeta_branch_can_dominate() {
    let cases = [
        (params(1_000_000, 50, 1.0, 0.5), 0.5, 0),
        (params(10_000, 64, 2.0, 0.9), 1e-2, 1),
        (params(100, 8, 1.0, 0.3), 1e-9, 2),
    ];
    for (p, lambda, want) in cases {
        let oracle = zeta_terms(p.n as f64, p.m as f64, p.p.0, p.s, lambda);
        assert_eq!(dominant(oracle), want, "oracle branches {oracle:?}");
        let got = zeta_branches(&p, lambda).unwrap();
        for k in 0..3 {
            assert!(
                (got[k] - oracle[k]).abs() <= 1e-12 * oracle[k],
                "branch {k}: {} vs {}",
                got[k],
                oracle[k]
            );
        }
        let z = zeta_n(&p, lambda).unwrap();
        assert!((z - 2.0 * oracle[want]).abs() <= 1e-12 * z);
    }
}

#[test]
fn doubling_n_shrinks_first_branch_by_root_two() {
    let a = zeta_branches(&params(400, 5, 1.5, 0.4), 0.01).unwrap()[0];
    let b = zeta_branches(&params(800, 5, 1.5, 0.4), 0.01).unwrap()[0];
    assert!((b / a - 0.5f64.sqrt()).abs() < 1e-14);
}

#[test]
fn zeta_hand_values_at_p_two_and_infinity() {
    let z2 = zeta_n(&params(100, 4, 2.0, 0.5), 0.1).unwrap();
    let zinf = zeta_n(&params(100, 4, f64::INFINITY, 0.5), 0.1).unwrap();
    assert!((z2 - 0.7113117640155691).abs() < 1e-12, "{z2}");
    assert!((zinf - 1.0059467437463483).abs() < 1e-12, "{zinf}");
}

#[test]
fn u_n_dominates_young_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    for _ in 0..20 {
        let n = rng.random_range(2..100_000u64);
        let m = rng.random_range(1..200u64);
        let p = if rng.random_bool(0.2) {
            f64::INFINITY
        } else {
            rng.random_range(1.0..8.0)
        };
        let s = rng.random_range(0.05..0.95);
        let lambda = 10f64.powf(rng.random_range(-6.0..0.0));
        let l2 = 10f64.powf(rng.random_range(-3.0..1.0));
        let h = 10f64.powf(rng.random_range(-3.0..1.0));
        let tp = params(n, m, p, s);
        let u = u_n_bound(l2, h, &tp, lambda).unwrap();
        let young = l2.powf(1.0 - s) * h.powf(s) / (n as f64).sqrt();
        assert!(
            u >= young * (1.0 - 1e-12),
            "U={u} young={young} n={n} M={m} p={p} s={s}"
        );
    }
}

#[test]
fn u_n_zero_and_homogeneous() {
    let tp = params(300, 6, 1.3, 0.6);
    assert_eq!(u_n_bound(0.0, 0.0, &tp, 0.02).unwrap(), 0.0);
    let base = u_n_bound(0.4, 1.7, &tp, 0.02).unwrap();
    let scaled = u_n_bound(1.2, 5.1, &tp, 0.02).unwrap();
    assert!((scaled - 3.0 * base).abs() < 1e-13 * scaled);
}

#[test]
fn dense_rate_flat_in_p_and_sparse_rate_smallest_at_p_one() {
    let ps = [1.0, 1.25, 1.5, 2.0, 4.0, 8.0];
    let (n, m, s) = (1000u64, 16u64, 0.5);
    let dense: Vec<f64> = ps
        .iter()
        .map(|&p| {
            let r = (m as f64).powf(1.0 / p);
            predicted_rate(&TheoryParams::new(n, m, p, s, r).unwrap())
                .unwrap()
                .leading
        })
        .collect();
    for d in &dense {
        assert!((d / dense[0] - 1.0).abs() < 1e-12, "{dense:?}");
    }
    let sparse: Vec<f64> = ps
        .iter()
        .map(|&p| {
            predicted_rate(&TheoryParams::new(n, m, p, s, 1.0).unwrap())
                .unwrap()
                .leading
        })
        .collect();
    assert!(sparse.windows(2).all(|w| w[0] < w[1]), "{sparse:?}");
    for (&p, &rate) in ps.iter().zip(&sparse) {
        assert!((rate / localized_rate(n, m, p, s) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn theory_quantities_finite_on_lattice() {
    for n in [1u64, 10, 1000, 1_000_000] {
        for m in [1u64, 2, 7, 100] {
            for p in [1.0, 1.01, 2.0, 3.5, f64::INFINITY] {
                for s in [0.01, 0.5, 0.99] {
                    let tp = params(n, m, p, s);
                    let lam = optimal_lambda(&tp).unwrap().lambda;
                    let rate = predicted_rate(&tp).unwrap();
                    let z = zeta_n(&tp, lam).unwrap();
                    let values = [lam, z, rate.leading, rate.full[1], rate.full[2]];
                    assert!(
                        values.iter().all(|v| v.is_finite() && *v > 0.0),
                        "{values:?} at n={n} M={m} p={p} s={s}"
                    );
                }
            }
        }
    }
}

#[test]
fn optimal_lambda_scales_with_n() {
    for s in [0.2, 0.5, 0.8] {
        let a = optimal_lambda(&params(1000, 3, 1.5, s)).unwrap().lambda;
        let b = optimal_lambda(&params(2000, 3, 1.5, s)).unwrap().lambda;
        assert!((b / a - 2f64.powf(-1.0 / (1.0 + s))).abs() < 1e-13);
    }
}

fn spectral_gram(points: &[f64], s: f64) -> GramMatrix {
    let kernel = SpectralKernel::normalized(s, 100).unwrap();
    let pts: Vec<Vec<f64>> = points.iter().map(|&x| vec![x]).collect();
    gram(&KernelSpec::Spectral(kernel), &pts).unwrap()
}

#[test]
fn kappa_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let n = rng.random_range(5..25);
        let grams: Vec<GramMatrix> = (0..rng.random_range(1..4))
            .map(|_| {
                let xs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
                spectral_gram(&xs, rng.random_range(0.3..0.7))
            })
            .collect();
        let k = kappa_estimate(&grams).unwrap();
        assert!((0.0..=1.0).contains(&k), "{k}");
    }
}

#[test]
fn kappa_one_for_orthogonal_ranges_and_zero_for_shared() {
    let n = 6;
    let proj = |idx: &[usize]| {
        let mut m = DMatrix::zeros(n, n);
        for &i in idx {
            m[(i, i)] = 1.0;
        }
        GramMatrix::new(m).unwrap()
    };
    let k = kappa_estimate(&[proj(&[0, 1]), proj(&[2, 3, 4])]).unwrap();
    assert!((k - 1.0).abs() < 1e-12, "{k}");
    let k = kappa_estimate(&[proj(&[0, 1]), proj(&[1, 2])]).unwrap();
    assert!(k.abs() < 1e-12, "{k}");
    let k = kappa_estimate(&[proj(&[0, 1, 2, 3])]).unwrap();
    assert!((k - 1.0).abs() < 1e-12);
}
