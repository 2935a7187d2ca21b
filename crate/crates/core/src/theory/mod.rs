//! Closed-form quantities of the lp-MKL convergence analysis.
//!
//! Every universal constant the analysis leaves unspecified is folded into the
//! single multiplier `c_free` (default 1): rate exponents are the testable
//! content, constants are not. `p = infinity` is accepted everywhere a rate
//! formula is evaluated and is handled through the limit of the exponents.

mod packing;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernel::GramMatrix;

pub use packing::{greedy_packing, hamming, packing_lower_bound, PackingBound, MAX_SEARCH_SPACE};

/// Relative eigenvalue cutoff defining the numerical column space of a Gram matrix.
pub const RANK_TOL: f64 = 1e-10;

/// Exponent `p >= 1`, possibly infinite. Serialized as a number or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Exponent(pub f64);

impl Exponent {
    pub const INFINITY: Exponent = Exponent(f64::INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl Serialize for Exponent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Exponent(v)),
            Raw::Text(t) => match t.trim().to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "∞" => Ok(Exponent::INFINITY),
                other => other
                    .parse::<f64>()
                    .map(Exponent)
                    .map_err(|_| serde::de::Error::custom(format!("invalid exponent {t:?}"))),
            },
        }
    }
}

fn default_c_free() -> f64 {
    1.0
}

fn default_kappa() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

/// Problem constants entering the rate formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub n: u64,
    #[serde(rename = "M")]
    pub m: u64,
    pub p: Exponent,
    pub s: f64,
    #[serde(rename = "R_p")]
    pub r_p: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(rename = "L", default = "default_noise")]
    pub noise_bound: f64,
    #[serde(default = "default_c_free")]
    pub c_free: f64,
}

impl TheoryParams {
    pub fn new(n: u64, m: u64, p: f64, s: f64, r_p: f64) -> Result<Self> {
        let params = Self {
            n,
            m,
            p: Exponent(p),
            s,
            r_p,
            kappa: 1.0,
            noise_bound: 1.0,
            c_free: 1.0,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Input(what.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.m == 0 {
            return bad("M must be positive");
        }
        if !(self.p.0 >= 1.0) {
            return bad("p must be >= 1");
        }
        if !(self.s > 0.0 && self.s < 1.0) {
            return bad("s must lie in (0, 1)");
        }
        if !(self.r_p > 0.0 && self.r_p.is_finite()) {
            return bad("R_p must be positive");
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return bad("kappa must lie in (0, 1]");
        }
        if !(self.noise_bound > 0.0) {
            return bad("L must be positive");
        }
        if !(self.c_free > 0.0 && self.c_free.is_finite()) {
            return bad("c_free must be positive");
        }
        Ok(())
    }

    fn nf(&self) -> f64 {
        self.n as f64
    }

    fn mf(&self) -> f64 {
        self.m as f64
    }

    /// `s / p`, zero for `p = infinity`.
    fn s_over_p(&self) -> f64 {
        self.s / self.p.0
    }
}

/// `log M`, with the `M = 1` case replaced by 1 so the `M log M / n` branch
/// never vanishes.
pub fn log_m(m: u64) -> f64 {
    if m >= 2 {
        (m as f64).ln()
    } else {
        1.0
    }
}

/// `max(1, sqrt(t), t / sqrt(n))`.
pub fn eta(t: f64, n: u64) -> f64 {
    1f64.max(t.sqrt()).max(t / (n as f64).sqrt())
}

/// The three branches inside the maximum defining `zeta_n`.
pub fn zeta_branches(params: &TheoryParams, lambda: f64) -> Result<[f64; 3]> {
    params.validate()?;
    if !(lambda > 0.0) {
        return Err(Error::Input(format!("lambda must be positive, got {lambda}")));
    }
    let (n, m, s) = (params.nf(), params.mf(), params.s);
    let sp = params.s_over_p();
    let first = (m * log_m(params.m) / n).sqrt();
    let second = lambda.powf(-s / 2.0) * m.powf((1.0 + s) / 2.0 - sp) / n.sqrt();
    let m_exp = (1.0 + 4.0 * s - s * s) / (2.0 * (1.0 + s)) - sp * (3.0 - s) / (1.0 + s);
    let l_exp = -s * (3.0 - s) / (2.0 * (1.0 + s));
    let third = m.powf(m_exp) * lambda.powf(l_exp) / n.powf(1.0 / (1.0 + s));
    Ok([first, second, third])
}

/// `zeta_n = 2 * max(sqrt(M log M / n), ..., ...)` at regularization `lambda`.
pub fn zeta_n(params: &TheoryParams, lambda: f64) -> Result<f64> {
    let b = zeta_branches(params, lambda)?;
    Ok(2.0 * b[0].max(b[1]).max(b[2]))
}

/// Product form of the per-block localized complexity bound `U_n(f_m)`:
/// `(branch maximum) * (||f||_L2 / sqrt(M) + lambda^(1/2) ||f||_H / M^(1-1/p))`.
///
/// It dominates `||f||_L2^(1-s) ||f||_H^s / sqrt(n)` and
/// `||f||_L2^((1-s)^2/(1+s)) ||f||_H^(s(3-s)/(1+s)) / n^(1/(1+s))`.
pub fn u_n_bound(f_norm_l2: f64, f_norm_h: f64, params: &TheoryParams, lambda: f64) -> Result<f64> {
    if !(f_norm_l2 >= 0.0 && f_norm_h >= 0.0) {
        return Err(Error::Input("function norms must be nonnegative".into()));
    }
    let b = zeta_branches(params, lambda)?;
    let m = params.mf();
    let inv_p = 1.0 / params.p.0;
    let factor = f_norm_l2 / m.sqrt() + lambda.sqrt() * f_norm_h / m.powf(1.0 - inv_p);
    Ok(b[0].max(b[1]).max(b[2]) * factor)
}

/// `(sum_m h_m^p)^(1/p)`; the maximum for `p = infinity`.
pub fn r_p_norm(h_norms: &[f64], p: f64) -> f64 {
    crate::solver::mixed_norm(h_norms, p)
}

/// `c n^(-1/(1+s)) M^(1 - 2s/(p(1+s))) R^(2s/(1+s))`, shared by the upper and
/// lower bounds.
fn leading_term(params: &TheoryParams, radius: f64) -> f64 {
    let (n, m, s) = (params.nf(), params.mf(), params.s);
    params.c_free
        * n.powf(-1.0 / (1.0 + s))
        * m.powf(1.0 - 2.0 * params.s_over_p() / (1.0 + s))
        * radius.powf(2.0 * s / (1.0 + s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub lambda: f64,
    /// Whether `n >= M^(2/p) R_p^(-2) (log M)^((1+s)/s)` and
    /// `n >= (R_p / M^(1/p))^(4s/(1-s))` hold.
    pub sample_size_ok: bool,
}

/// Rate-optimal regularization `c n^(-1/(1+s)) M^(1 - 2s/(p(1+s))) R_p^(-2/(1+s))`.
pub fn optimal_lambda(params: &TheoryParams) -> Result<LambdaChoice> {
    params.validate()?;
    let (n, m, s, r) = (params.nf(), params.mf(), params.s, params.r_p);
    let inv_p = 1.0 / params.p.0;
    let lambda = params.c_free
        * n.powf(-1.0 / (1.0 + s))
        * m.powf(1.0 - 2.0 * params.s_over_p() / (1.0 + s))
        * r.powf(-2.0 / (1.0 + s));
    let need_first = m.powf(2.0 * inv_p) * r.powi(-2) * m.ln().powf((1.0 + s) / s);
    let need_second = (r / m.powf(inv_p)).powf(4.0 * s / (1.0 - s));
    Ok(LambdaChoice {
        lambda,
        sample_size_ok: n >= need_first && n >= need_second,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedRate {
    pub leading: f64,
    /// The three terms of the full bound at the optimal regularization.
    pub full: [f64; 3],
}

/// Predicted `||f_hat - f*||^2_{L2}` at the optimal regularization.
pub fn predicted_rate(params: &TheoryParams) -> Result<PredictedRate> {
    params.validate()?;
    let (n, m, s, r) = (params.nf(), params.mf(), params.s, params.r_p);
    let sp = params.s_over_p();
    let leading = leading_term(params, r);
    let second = params.c_free * m * log_m(params.m) / n;
    let third = params.c_free
        * n.powf(-1.0 / (1.0 + s) - (s - 1.0).powi(2) / (1.0 + s).powi(2))
        * m.powf(1.0 - 2.0 * sp * (3.0 - s) / (1.0 + s).powi(2))
        * r.powf(2.0 * s * (3.0 - s) / (1.0 + s).powi(2));
    Ok(PredictedRate {
        leading,
        full: [leading, second, third],
    })
}

/// Minimax lower bound on the lp-mixed-norm ball of radius `radius`.
pub fn minimax_lower_bound(params: &TheoryParams, radius: f64) -> Result<f64> {
    params.validate()?;
    if !(radius > 0.0) {
        return Err(Error::Input(format!("radius must be positive, got {radius}")));
    }
    Ok(leading_term(params, radius))
}

/// Rate factor `n^(-1/2) M^(1-1/p)` of the non-localized global bounds.
pub fn global_bound_rate(n: u64, m: u64, p: f64) -> f64 {
    (n as f64).powf(-0.5) * (m as f64).powf(1.0 - 1.0 / p)
}

/// Rate factor `n^(-1/(1+s)) M^(1 - 2s/(p(1+s)))` of the localized bound.
pub fn localized_rate(n: u64, m: u64, p: f64, s: f64) -> f64 {
    (n as f64).powf(-1.0 / (1.0 + s)) * (m as f64).powf(1.0 - 2.0 * s / (p * (1.0 + s)))
}

/// Entropy-number bound `c_free C min(i, n)^(1/(2s)) i^(-1/s)` for the
/// empirical norm.
pub fn entropy_bound(i: u64, n: u64, s: f64, big_c: f64, c_free: f64) -> Result<f64> {
    if i == 0 || n == 0 {
        return Err(Error::Input("entropy index and sample size must be >= 1".into()));
    }
    if !(s > 0.0 && s < 1.0) || !(big_c >= 1.0) {
        return Err(Error::Input("entropy bound needs s in (0, 1) and C >= 1".into()));
    }
    let i_f = i as f64;
    Ok(c_free * big_c * (i.min(n) as f64).powf(1.0 / (2.0 * s)) * i_f.powf(-1.0 / s))
}

/// Orthonormal basis of the numerical column space of a Gram matrix.
fn column_space(g: &GramMatrix) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(g.values().clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("eigendecomposition did not converge".into()))?;
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return Err(Error::Degenerate("Gram matrix has no positive eigenvalue".into()));
    }
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > RANK_TOL * top)
        .collect();
    Ok(eig.eigenvectors.select_columns(keep.iter()))
}

/// Empirical incoherence: the smallest eigenvalue of the block matrix
/// `[Q_i^T Q_j]`, where `Q_m` spans the column space of `K_m`. Equals
/// `min ||sum u_m||^2 / sum ||u_m||^2` over `u_m` in those column spaces.
pub fn kappa_estimate(grams: &[GramMatrix]) -> Result<f64> {
    let n = grams
        .first()
        .ok_or_else(|| Error::Input("kappa needs at least one Gram matrix".into()))?
        .n();
    if grams.iter().any(|g| g.n() != n) {
        return Err(Error::Input("Gram matrices must share one point set".into()));
    }
    let bases = grams.iter().map(column_space).collect::<Result<Vec<_>>>()?;
    let width: usize = bases.iter().map(|b| b.ncols()).sum();
    let mut stacked = DMatrix::zeros(n, width);
    let mut col = 0;
    for b in &bases {
        stacked.columns_mut(col, b.ncols()).copy_from(b);
        col += b.ncols();
    }
    let block = stacked.transpose() * &stacked;
    let smallest = block.symmetric_eigenvalues().min();
    Ok(smallest.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(n: u64, m: u64, p: f64, s: f64, r: f64) -> TheoryParams {
        TheoryParams::new(n, m, p, s, r).unwrap()
    }

    #[test]
    fn eta_examples() {
        assert_eq!(eta(1.0, 7), 1.0);
        assert_eq!(eta(4.0, 4), 2.0);
        assert_eq!(eta(100.0, 25), 20.0);
    }

    #[test]
    fn r_p_examples() {
        let mut sparse = vec![0.0; 6];
        sparse[0] = 1.0;
        for p in [1.0, 1.5, 2.0, 7.0, f64::INFINITY] {
            assert_relative_eq!(r_p_norm(&sparse, p), 1.0, epsilon = 1e-15);
        }
        assert_relative_eq!(r_p_norm(&[1.0; 8], 2.0), 8f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(r_p_norm(&[2.0, 3.0], 1.0), 5.0, epsilon = 1e-15);
        assert_eq!(r_p_norm(&[2.0, 3.0], f64::INFINITY), 3.0);
    }

    #[test]
    fn optimal_lambda_examples() {
        let l = optimal_lambda(&params(64, 1, 2.0, 0.5, 1.0)).unwrap();
        assert_relative_eq!(l.lambda, 1.0 / 16.0, epsilon = 1e-15);
        for n in [10u64, 1000, 123_456] {
            let l = optimal_lambda(&params(n, 1, 1.7, 0.3, 1.0)).unwrap();
            assert_relative_eq!(l.lambda, (n as f64).powf(-1.0 / 1.3), max_relative = 1e-14);
        }
    }

    #[test]
    fn optimal_lambda_under_dense_truth() {
        // Substituting R_p = M^(1/p) leaves lambda = n^(-1/(1+s)) M^(1-2/p);
        // unlike the rate, the regularization still depends on p.
        let (n, m, s) = (500u64, 6u64, 0.4);
        for p in [1.0, 1.5, 3.0] {
            let r = (m as f64).powf(1.0 / p);
            let lam = optimal_lambda(&params(n, m, p, s, r)).unwrap().lambda;
            let expected = (n as f64).powf(-1.0 / (1.0 + s)) * (m as f64).powf(1.0 - 2.0 / p);
            assert_relative_eq!(lam, expected, max_relative = 1e-13);
        }
    }

    #[test]
    fn dense_truth_rate_is_m_times_single_kernel_rate() {
        let (n, m, s) = (1000u64, 8u64, 0.5);
        for p in [1.0, 1.5, 2.0, 4.0, f64::INFINITY] {
            let r = r_p_norm(&vec![1.0; m as usize], p);
            let rate = predicted_rate(&params(n, m, p, s, r)).unwrap();
            assert_relative_eq!(rate.leading, 8.0 * 1000f64.powf(-2.0 / 3.0), max_relative = 1e-12);
        }
    }

    #[test]
    fn sparse_truth_rate_is_minimized_at_p_one() {
        let rates: Vec<f64> = [1.0, 1.5, 2.0, 4.0]
            .iter()
            .map(|&p| predicted_rate(&params(1000, 8, p, 0.5, 1.0)).unwrap().leading)
            .collect();
        assert!(rates.windows(2).all(|w| w[0] < w[1]), "{rates:?}");
    }

    #[test]
    fn single_kernel_rate_collapses() {
        for n in [16u64, 64, 4096] {
            let rate = predicted_rate(&params(n, 1, 2.0, 0.5, 1.0)).unwrap();
            assert_relative_eq!(rate.leading, (n as f64).powf(-2.0 / 3.0), max_relative = 1e-14);
        }
    }

    #[test]
    fn infinite_p_lower_bound() {
        let p = params(300, 5, f64::INFINITY, 0.6, 2.5);
        let expected = 300f64.powf(-1.0 / 1.6) * 5.0 * 2.5f64.powf(1.2 / 1.6);
        assert_relative_eq!(minimax_lower_bound(&p, 2.5).unwrap(), expected, max_relative = 1e-14);
    }

    #[test]
    fn lower_bound_is_monotone_in_radius_and_m() {
        let base = params(200, 4, 1.5, 0.5, 1.0);
        let mut prev = 0.0;
        for r in [0.1, 0.5, 1.0, 3.0] {
            let v = minimax_lower_bound(&base, r).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        let mut prev = 0.0;
        for m in [1u64, 2, 5, 50] {
            let v = minimax_lower_bound(&params(200, m, 1.5, 0.5, 1.0), 1.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn zeta_first_branch_scales_with_inverse_root_n() {
        let a = zeta_branches(&params(100, 4, 2.0, 0.5, 1.0), 0.1).unwrap();
        let b = zeta_branches(&params(200, 4, 2.0, 0.5, 1.0), 0.1).unwrap();
        assert_relative_eq!(b[0] / a[0], 0.5f64.sqrt(), max_relative = 1e-14);
    }

    #[test]
    fn zeta_single_kernel_uses_unit_log() {
        let b = zeta_branches(&params(100, 1, 2.0, 0.5, 1.0), 0.1).unwrap();
        assert_relative_eq!(b[0], 0.1, max_relative = 1e-14);
    }

    #[test]
    fn entropy_bound_examples() {
        assert_relative_eq!(entropy_bound(1, 10, 0.5, 3.0, 1.0).unwrap(), 3.0, epsilon = 1e-15);
        for i in 1..=10u64 {
            let v = entropy_bound(i, 10, 0.4, 2.0, 1.5).unwrap();
            assert_relative_eq!(v, 3.0 * (i as f64).powf(-1.25), max_relative = 1e-14);
        }
        let tail: Vec<f64> = (10..40u64)
            .map(|i| entropy_bound(i, 10, 0.4, 2.0, 1.0).unwrap())
            .collect();
        assert!(tail.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn u_n_vanishes_and_is_homogeneous() {
        let p = params(100, 3, 1.5, 0.4, 1.0);
        assert_eq!(u_n_bound(0.0, 0.0, &p, 0.05).unwrap(), 0.0);
        let a = u_n_bound(0.3, 1.2, &p, 0.05).unwrap();
        let b = u_n_bound(0.9, 3.6, &p, 0.05).unwrap();
        assert_relative_eq!(b, 3.0 * a, max_relative = 1e-14);
    }

    #[test]
    fn exponent_serde() {
        let p: TheoryParams = serde_json::from_str(r#"{"n": 10, "M": 2, "p": "inf", "s": 0.5, "R_p": 1}"#).unwrap();
        assert!(p.p.is_infinite());
        assert_eq!(p.c_free, 1.0);
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains(r#""p":"inf""#), "{text}");
    }

    #[test]
    fn kappa_rejects_zero_gram() {
        let z = GramMatrix::new(DMatrix::zeros(3, 3)).unwrap();
        assert!(matches!(kappa_estimate(&[z]), Err(Error::Degenerate(_))));
    }
}
