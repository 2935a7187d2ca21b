//! lp-mixed-norm multiple kernel learning.
//!
//! * [`kernel`]: spectral and Gaussian kernels, Gram matrices, square roots,
//!   spectral-decay estimation.
//! * [`solver`]: the lp-MKL estimator for every `p >= 1`, with a kernel-weight
//!   route for `1 <= p <= 2`.
//! * [`theory`]: closed-form rates, localized complexity terms, incoherence
//!   estimation and the packing construction behind the minimax lower bound.
//! * [`synth`]: product-space synthetic data with truths of prescribed block norms.
//! * [`harness`]: seeded rate-scaling sweeps and log-log slope fits.
//! * [`cli`]: the `lpmkl` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod solver;
pub mod stats;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
pub use kernel::{estimate_decay, eval_kernel, gram, gram_sqrt, GramMatrix, KernelSpec, SpectralKernel};
pub use solver::{
    objective_value, solve, solve_direct, solve_theta_path, theta_update, MklProblem, MklSolution, SolverOptions,
};
