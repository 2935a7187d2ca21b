//! Hamming-distance packings of `[N]^M`: the combinatorial step of the
//! minimax lower bound.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};

/// Largest `N^M` the greedy scan will enumerate.
pub const MAX_SEARCH_SPACE: u64 = 10_000_000;

pub fn hamming(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn search_space(alphabet: u32, length: u32) -> Result<u64> {
    if alphabet < 2 || length < 2 || !length.is_multiple_of(2) {
        return Err(Error::Input(format!(
            "packing needs N >= 2 and an even M >= 2, got N = {alphabet}, M = {length}"
        )));
    }
    (alphabet as u64)
        .checked_pow(length)
        .filter(|&size| size <= MAX_SEARCH_SPACE)
        .ok_or_else(|| {
            Error::Size(format!(
                "N^M = {alphabet}^{length} exceeds the {MAX_SEARCH_SPACE} codeword limit"
            ))
        })
}

/// Greedy code over `[N]^M` (symbols `0..N`): scans words in lexicographic
/// order and keeps each word whose Hamming distance to every kept word
/// exceeds `min_dist_exclusive`.
pub fn greedy_packing(alphabet: u32, length: u32, min_dist_exclusive: usize) -> Result<Vec<Vec<u32>>> {
    let total = search_space(alphabet, length)?;
    let len = length as usize;
    let mut code: Vec<Vec<u32>> = Vec::new();
    let mut word = vec![0u32; len];
    for index in 0..total {
        if index > 0 {
            // Lexicographic successor: increment the last position with carry.
            for pos in (0..len).rev() {
                word[pos] += 1;
                if word[pos] < alphabet {
                    break;
                }
                word[pos] = 0;
            }
        }
        if code.iter().all(|c| hamming(c, &word) > min_dist_exclusive) {
            code.push(word.clone());
        }
    }
    Ok(code)
}

/// Counting bound of the packing argument.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PackingBound {
    /// `Q* = N^M / (2 C(M, M/2) N^(M/2))` as an exact fraction `num/den`.
    pub q_star_num: String,
    pub q_star_den: String,
    pub q_star: f64,
    pub q_star_ceil: u64,
    /// `(M/2) log(N/16)`, a lower bound on `log Q*`.
    pub log_bound: f64,
}

fn binomial(n: u32, k: u32) -> BigUint {
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Exact `Q*` and its logarithmic lower bound.
pub fn packing_lower_bound(alphabet: u32, length: u32) -> Result<PackingBound> {
    if alphabet < 2 || length < 2 || !length.is_multiple_of(2) {
        return Err(Error::Input(format!(
            "packing bound needs N >= 2 and an even M >= 2, got N = {alphabet}, M = {length}"
        )));
    }
    let half = length / 2;
    let num = BigUint::from(alphabet).pow(half);
    let den = BigUint::from(2u32) * binomial(length, half);
    let q = BigRational::new(num.into(), den.into());
    let ceil = q.ceil().to_integer();
    let q_star = q.numer().to_f64().unwrap_or(f64::INFINITY) / q.denom().to_f64().unwrap_or(f64::INFINITY);
    Ok(PackingBound {
        q_star_num: q.numer().to_string(),
        q_star_den: q.denom().to_string(),
        q_star,
        q_star_ceil: if ceil.is_zero() {
            0
        } else {
            ceil.to_u64().unwrap_or(u64::MAX)
        },
        log_bound: half as f64 * (alphabet as f64 / 16.0).ln(),
    })
}
