//! Seeded rate-scaling sweeps over `(n, M, p, s, pattern)` and log-log slope
//! fits against the theoretical exponent `-1/(1+s)`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernel::{KernelSpec, SpectralKernel, DEFAULT_TRUNCATION};
use crate::solver::{solve, MklProblem, SolverOptions};
use crate::stats::{least_squares_line, mean_and_stderr, spearman};
use crate::synth::{build_truth, measure_l2_error, mix_seed, sample_dataset, Pattern, Truth, TruthSpec};
use crate::theory::{optimal_lambda, predicted_rate, r_p_norm, TheoryParams};

/// Slope band around the theoretical exponent: `[theory - STEEP, theory + SHALLOW]`.
pub const SLOPE_BAND_STEEP: f64 = 11.0 / 60.0;
pub const SLOPE_BAND_SHALLOW: f64 = 1.0 / 6.0;
/// Largest max/min error ratio across `p` accepted as flat.
pub const FLAT_RATIO: f64 = 2.0;
pub const MIN_SLOPE_POINTS: usize = 4;

const TRAIN_FRACTION: f64 = 0.8;

/// How the regularization parameter of a cell is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    /// `optimal_lambda` with the plan's `c_free`.
    Theory,
    /// Holdout selection over the plan's `lambda_grid`.
    GridCv,
    Fixed(f64),
}

impl Serialize for LambdaRule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaRule::Theory => serializer.serialize_str("theory"),
            LambdaRule::GridCv => serializer.serialize_str("grid_cv"),
            LambdaRule::Fixed(v) => serializer.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaRule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Value(f64),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Name(name) => match name.as_str() {
                "theory" => Ok(LambdaRule::Theory),
                "grid_cv" => Ok(LambdaRule::GridCv),
                other => Err(serde::de::Error::custom(format!(
                    "unknown lambda rule {other:?}; expected \"theory\", \"grid_cv\" or a number"
                ))),
            },
            Raw::Value(v) => Ok(LambdaRule::Fixed(v)),
        }
    }
}

fn default_lambda_rule() -> LambdaRule {
    LambdaRule::GridCv
}

fn default_noise_bound() -> f64 {
    1.0
}

fn default_one() -> f64 {
    1.0
}

fn default_truncation() -> usize {
    DEFAULT_TRUNCATION
}

fn default_truth_truncation() -> usize {
    crate::synth::DEFAULT_TRUTH_TRUNCATION
}

/// `10^-4, 10^-3.75, ..., 10^0`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=16).map(|j| 10f64.powf(-4.0 + 0.25 * j as f64)).collect()
}

/// Solver settings for sweeps: the rate study needs far less accuracy than the
/// oracle checks.
pub fn sweep_solver_options() -> SolverOptions {
    SolverOptions {
        tol_obj: 1e-6,
        tol_decrease: 1e-7,
        max_sweeps: 500,
        max_steps: 5_000,
        polish: false,
        ..SolverOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub n_grid: Vec<usize>,
    #[serde(rename = "M_grid")]
    pub m_grid: Vec<usize>,
    pub p_grid: Vec<f64>,
    pub s_values: Vec<f64>,
    pub patterns: Vec<Pattern>,
    pub replicates: usize,
    #[serde(default = "default_lambda_rule")]
    pub lambda_rule: LambdaRule,
    pub n_test: usize,
    pub master_seed: u64,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    /// Uniform noise half-width `L`.
    #[serde(default = "default_noise_bound")]
    pub noise_bound: f64,
    #[serde(default = "default_one")]
    pub c_free: f64,
    /// Eigenvalues kept by the spectral kernel.
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_truth_truncation")]
    pub truth_truncation: usize,
    /// Parallel cells; `None` uses every available core.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "sweep_solver_options")]
    pub solver: SolverOptions,
}

impl ExperimentPlan {
    /// Plan with defaults for every optional field.
    pub fn new(
        n_grid: Vec<usize>,
        m_grid: Vec<usize>,
        p_grid: Vec<f64>,
        s_values: Vec<f64>,
        patterns: Vec<Pattern>,
        replicates: usize,
    ) -> Self {
        Self {
            n_grid,
            m_grid,
            p_grid,
            s_values,
            patterns,
            replicates,
            lambda_rule: default_lambda_rule(),
            n_test: 2000,
            master_seed: 0,
            lambda_grid: default_lambda_grid(),
            noise_bound: default_noise_bound(),
            c_free: 1.0,
            truncation: DEFAULT_TRUNCATION,
            truth_truncation: default_truth_truncation(),
            workers: None,
            solver: sweep_solver_options(),
        }
    }

    /// Reads a plan from JSON, or TOML when the extension is `.toml`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let plan: Self = if is_toml {
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| {
                Error::parse(
                    format!("{} line {} column {}", path.display(), e.line(), e.column()),
                    e.to_string(),
                )
            })?
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("n_grid must be strictly increasing".into()));
        }
        if self.n_grid.iter().any(|&n| n < 5) {
            return Err(Error::Input("every n must be at least 5 for the holdout split".into()));
        }
        if self.m_grid.contains(&0) {
            return Err(Error::Input("M_grid entries must be >= 1".into()));
        }
        if let Some(p) = self.p_grid.iter().find(|p| !(**p >= 1.0 && p.is_finite())) {
            return Err(Error::Domain { value: *p });
        }
        if let Some(s) = self.s_values.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
            return Err(Error::Domain { value: *s });
        }
        if self.patterns.contains(&Pattern::Custom) {
            return Err(Error::Input("plans accept the named patterns sparse and dense".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Input("replicates must be >= 1".into()));
        }
        if self.n_test == 0 {
            return Err(Error::Input("n_test must be >= 1".into()));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Input(
                "lambda_grid must be nonempty with positive entries".into(),
            ));
        }
        if let LambdaRule::Fixed(v) = self.lambda_rule {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain { value: v });
            }
        }
        if !(self.noise_bound > 0.0 && self.noise_bound.is_finite()) {
            return Err(Error::Domain {
                value: self.noise_bound,
            });
        }
        if !(self.c_free > 0.0 && self.c_free.is_finite()) {
            return Err(Error::Domain { value: self.c_free });
        }
        if self.truth_truncation == 0 || self.truth_truncation > self.truncation {
            return Err(Error::Input("truth_truncation must lie in [1, truncation]".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Input("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Every cell in canonical order: pattern, s, M, p, n, replicate.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &pattern in &self.patterns {
            for &s in &self.s_values {
                for &m in &self.m_grid {
                    for &p in &self.p_grid {
                        for &n in &self.n_grid {
                            for replicate in 0..self.replicates {
                                out.push(Cell {
                                    n,
                                    m,
                                    p,
                                    s,
                                    pattern,
                                    replicate,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn contains(&self, cell: &Cell) -> bool {
        self.n_grid.contains(&cell.n)
            && self.m_grid.contains(&cell.m)
            && self.p_grid.contains(&cell.p)
            && self.s_values.contains(&cell.s)
            && self.patterns.contains(&cell.pattern)
            && cell.replicate < self.replicates
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub p: f64,
    pub s: f64,
    pub pattern: Pattern,
    pub replicate: usize,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} M={} p={} s={} pattern={} replicate={}",
            self.n,
            self.m,
            self.p,
            self.s,
            self.pattern.as_str(),
            self.replicate
        )
    }
}

impl Cell {
    /// Seed of the truth. It ignores `n` and `p`, so cells differing only in
    /// those share a truth, and ignores nothing else.
    pub fn truth_seed(&self, master_seed: u64) -> u64 {
        mix_seed(&[
            master_seed,
            self.m as u64,
            self.s.to_bits(),
            pattern_code(self.pattern),
            self.replicate as u64,
        ])
    }

    /// Seed of the training sample; shared across `p`.
    pub fn data_seed(&self, master_seed: u64) -> u64 {
        mix_seed(&[self.truth_seed(master_seed), self.n as u64])
    }
}

fn pattern_code(pattern: Pattern) -> u64 {
    match pattern {
        Pattern::Sparse => 1,
        Pattern::Dense => 2,
        Pattern::Custom => 3,
    }
}

/// One row of the records CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRecord {
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub p: f64,
    pub s: f64,
    pub pattern: Pattern,
    pub replicate: usize,
    pub measured_error: f64,
    /// Monte Carlo standard error of `measured_error`.
    pub stderr: f64,
    pub lambda_used: f64,
    pub predicted_leading: f64,
    pub converged: bool,
}

impl RateRecord {
    pub fn cell(&self) -> Cell {
        Cell {
            n: self.n,
            m: self.m,
            p: self.p,
            s: self.s,
            pattern: self.pattern,
            replicate: self.replicate,
        }
    }
}

/// `sum_k sqrt(mu_k) phi_k(x) beta_k`, the block function at `x`.
fn block_value(roots: &[f64], beta: &DVector<f64>, x: f64) -> f64 {
    let c1 = (std::f64::consts::PI * x).cos();
    let (mut prev, mut cur) = (1.0, c1);
    let mut total = 0.0;
    for (root, b) in roots.iter().zip(beta.iter()) {
        total += root * b * cur;
        let next = 2.0 * c1 * cur - prev;
        prev = cur;
        cur = next;
    }
    std::f64::consts::SQRT_2 * total
}

/// Builds the spectral-feature problem of a dataset: block `m` acts on
/// coordinate `m`.
fn feature_problem(
    kernel: &SpectralKernel,
    x: &nalgebra::DMatrix<f64>,
    y: DVector<f64>,
    p: f64,
    lambda: f64,
) -> Result<MklProblem> {
    let factors = (0..x.ncols())
        .map(|m| {
            let column: Vec<f64> = x.column(m).iter().copied().collect();
            kernel.features(&column)
        })
        .collect::<Result<Vec<_>>>()?;
    MklProblem::from_factors(y, factors, p, lambda)
}

fn cell_truth(plan: &ExperimentPlan, cell: &Cell) -> Result<Truth> {
    let kernel = SpectralKernel::normalized(cell.s, plan.truncation)?;
    let mut spec = TruthSpec::named(cell.pattern, cell.m, cell.truth_seed(plan.master_seed))?;
    spec.truth_truncation = plan.truth_truncation;
    build_truth(&spec, &KernelSpec::Spectral(kernel))
}

fn theory_params(plan: &ExperimentPlan, cell: &Cell, truth: &Truth) -> Result<TheoryParams> {
    let norms: Vec<f64> = (0..cell.m).map(|m| truth.rkhs_norm(m)).collect();
    let mut params = TheoryParams::new(cell.n as u64, cell.m as u64, cell.p, cell.s, r_p_norm(&norms, cell.p))?;
    params.noise_bound = plan.noise_bound;
    params.c_free = plan.c_free;
    Ok(params)
}

/// Generates the cell's data, selects `lambda`, solves, and measures the
/// Monte Carlo `L2` error against the truth. Non-convergence is recorded, not
/// raised.
pub fn run_cell(plan: &ExperimentPlan, cell: &Cell) -> Result<RateRecord> {
    plan.validate()?;
    if !plan.contains(cell) {
        return Err(Error::Input(format!("cell {cell} is outside the plan grids")));
    }
    let truth = cell_truth(plan, cell)?;
    let kernel = truth.kernel;
    let data_seed = cell.data_seed(plan.master_seed);
    let data = sample_dataset(&truth, cell.n, plan.noise_bound, data_seed)?;
    let params = theory_params(plan, cell, &truth)?;

    let lambda = match plan.lambda_rule {
        LambdaRule::Fixed(v) => v,
        LambdaRule::Theory => optimal_lambda(&params)?.lambda,
        LambdaRule::GridCv => {
            let problem = feature_problem(&kernel, &data.x, data.y.clone(), cell.p, plan.lambda_grid[0])?;
            grid_cv_lambda(&problem, &plan.lambda_grid, mix_seed(&[data_seed, 2]), &plan.solver)?
        }
    };
    let problem = feature_problem(&kernel, &data.x, data.y.clone(), cell.p, lambda)?;
    let solution = solve(&problem, &plan.solver)?;

    let roots: Vec<f64> = kernel.eigenvalues().iter().map(|m| m.sqrt()).collect();
    let estimate = |x: &[f64]| -> f64 {
        solution
            .beta_blocks
            .iter()
            .enumerate()
            .map(|(m, beta)| block_value(&roots, beta, x[m]))
            .sum()
    };
    let error = measure_l2_error(
        estimate,
        |x| truth.eval(x),
        cell.m,
        plan.n_test,
        mix_seed(&[data_seed, 1]),
    )?;
    Ok(RateRecord {
        n: cell.n,
        m: cell.m,
        p: cell.p,
        s: cell.s,
        pattern: cell.pattern,
        replicate: cell.replicate,
        measured_error: error.mean,
        stderr: error.stderr,
        lambda_used: lambda,
        predicted_leading: predicted_rate(&params)?.leading,
        converged: solution.converged,
    })
}

/// Holdout selection of `lambda`: a seeded 80/20 split of the problem's
/// samples, one fit per grid value on the training part, and the value with
/// the smallest holdout mean squared error. Ties go to the larger `lambda`;
/// a failed fit counts as infinite error.
pub fn grid_cv_lambda(problem: &MklProblem, lambda_grid: &[f64], seed: u64, opts: &SolverOptions) -> Result<f64> {
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::Input(
            "lambda grid must be nonempty with positive entries".into(),
        ));
    }
    let mut grid = lambda_grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let n = problem.n();
    if n < 2 {
        return Err(Error::InsufficientData(
            "holdout selection needs at least two samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((TRAIN_FRACTION * n as f64).round() as usize).clamp(1, n - 1);
    let (train, holdout) = order.split_at(n_train);
    let train_problem = problem.subset(train)?;
    let holdout_problem = problem.subset(holdout)?;

    let mut best = (f64::INFINITY, grid[0]);
    for &lambda in &grid {
        let error = train_problem
            .with_lambda(lambda)
            .and_then(|pr| solve(&pr, opts))
            .and_then(|sol| holdout_problem.predict(&sol.beta_blocks))
            .map(|pred| (&pred - holdout_problem.y()).norm_squared() / holdout.len() as f64)
            .ok()
            .filter(|e| e.is_finite())
            .unwrap_or(f64::INFINITY);
        if error < best.0 {
            best = (error, lambda);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Least-squares slope of `log(mean error)` on `log n`, where the mean runs
/// over replicates at each `n`. Nonpositive means are dropped.
pub fn fit_slope(records: &[RateRecord]) -> Result<SlopeFit> {
    let points: Vec<(f64, f64)> = mean_errors_by_n(records)
        .into_iter()
        .filter(|(_, e)| *e > 0.0 && e.is_finite())
        .map(|(n, e)| ((n as f64).ln(), e.ln()))
        .collect();
    if points.len() < MIN_SLOPE_POINTS {
        return Err(Error::InsufficientData(format!(
            "slope fit needs {MIN_SLOPE_POINTS} distinct n with positive mean error, got {}",
            points.len()
        )));
    }
    let line = least_squares_line(&points)?;
    Ok(SlopeFit {
        slope: line.slope,
        stderr: line.slope_stderr,
        intercept: line.intercept,
    })
}

fn mean_errors_by_n(records: &[RateRecord]) -> Vec<(usize, f64)> {
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_n.entry(r.n).or_default().push(r.measured_error);
    }
    by_n.into_iter()
        .map(|(n, errors)| (n, mean_and_stderr(&errors).0))
        .collect()
}

pub fn theory_exponent(s: f64) -> f64 {
    -1.0 / (1.0 + s)
}

pub fn slope_band(s: f64) -> (f64, f64) {
    let theta = theory_exponent(s);
    (theta - SLOPE_BAND_STEEP, theta + SLOPE_BAND_SHALLOW)
}

/// A cell whose run raised an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutput {
    pub records: Vec<RateRecord>,
    pub failures: Vec<CellFailure>,
    pub summary: Summary,
}

/// Runs every cell of the plan on up to `plan.workers` threads. Records come
/// back in canonical cell order whatever the scheduling.
pub fn sweep(plan: &ExperimentPlan) -> Result<SweepOutput> {
    plan.validate()?;
    let cells = plan.cells();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = plan.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Numeric(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<(Cell, Result<RateRecord>)> =
        pool.install(|| cells.par_iter().map(|c| (*c, run_cell(plan, c))).collect());
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (cell, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("cell {cell} failed: {e}");
                failures.push(CellFailure {
                    cell,
                    error: e.to_string(),
                })
            }
        }
    }
    let mut summary = summarize(&records);
    summary.failed_cells = failures.len();
    Ok(SweepOutput {
        records,
        failures,
        summary,
    })
}

/// Per-configuration slope fit; a configuration shares everything but `n`
/// and the replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigurationSummary {
    pub pattern: Pattern,
    pub s: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub p: f64,
    pub n_values: Vec<usize>,
    pub mean_errors: Vec<f64>,
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub intercept: Option<f64>,
    pub theory_exponent: f64,
    pub band: [f64; 2],
    /// Slope inside the band; `None` without a slope.
    pub pass: Option<bool>,
    /// Mean error at the largest `n` below that at the smallest; `None` when
    /// the grid spans less than a factor of 8.
    pub error_decreases: Option<bool>,
    pub all_converged: bool,
}

/// Errors across `p` at fixed `(pattern, s, M, n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PProfile {
    pub pattern: Pattern,
    pub s: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub n: usize,
    pub p_values: Vec<f64>,
    pub mean_errors: Vec<f64>,
    pub max_min_ratio: f64,
    /// Dense: ratio at most `FLAT_RATIO`. Sparse: the smallest `p` is no
    /// worse than the largest.
    pub pass: bool,
}

/// Errors across `M` at fixed `(pattern, s, p, n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MProfile {
    pub pattern: Pattern,
    pub s: f64,
    pub p: f64,
    pub n: usize,
    #[serde(rename = "M_values")]
    pub m_values: Vec<usize>,
    pub mean_errors: Vec<f64>,
    pub predicted_leading: Vec<f64>,
    pub rank_correlation: f64,
    /// Mean errors strictly increasing in `M`.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub records: usize,
    pub failed_cells: usize,
    pub slope_band: String,
    pub configurations: Vec<ConfigurationSummary>,
    pub p_profiles: Vec<PProfile>,
    #[serde(rename = "M_profiles")]
    pub m_profiles: Vec<MProfile>,
}

#[derive(Debug, Clone, Copy)]
struct OrdF64(f64);

impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn group<K: Ord, F: Fn(&RateRecord) -> K>(records: &[RateRecord], key: F) -> BTreeMap<K, Vec<RateRecord>> {
    let mut out: BTreeMap<K, Vec<RateRecord>> = BTreeMap::new();
    for r in records {
        out.entry(key(r)).or_default().push(*r);
    }
    out
}

fn mean_error(records: &[RateRecord]) -> f64 {
    let errors: Vec<f64> = records.iter().map(|r| r.measured_error).collect();
    mean_and_stderr(&errors).0
}

/// Slope fits and cross-`p` / cross-`M` comparisons computed from records.
pub fn summarize(records: &[RateRecord]) -> Summary {
    let configurations = group(records, |r| (r.pattern, OrdF64(r.s), r.m, OrdF64(r.p)))
        .into_iter()
        .map(|((pattern, s, m, p), rs)| {
            let by_n = mean_errors_by_n(&rs);
            let fit = fit_slope(&rs).ok();
            let band = slope_band(s.0);
            let error_decreases = match (by_n.first(), by_n.last()) {
                (Some(lo), Some(hi)) if hi.0 >= 8 * lo.0 => Some(hi.1 < lo.1),
                _ => None,
            };
            ConfigurationSummary {
                pattern,
                s: s.0,
                m,
                p: p.0,
                n_values: by_n.iter().map(|v| v.0).collect(),
                mean_errors: by_n.iter().map(|v| v.1).collect(),
                slope: fit.map(|f| f.slope),
                slope_stderr: fit.map(|f| f.stderr),
                intercept: fit.map(|f| f.intercept),
                theory_exponent: theory_exponent(s.0),
                band: [band.0, band.1],
                pass: fit.map(|f| f.slope >= band.0 && f.slope <= band.1),
                error_decreases,
                all_converged: rs.iter().all(|r| r.converged),
            }
        })
        .collect();

    let p_profiles = group(records, |r| (r.pattern, OrdF64(r.s), r.m, r.n))
        .into_iter()
        .filter_map(|((pattern, s, m, n), rs)| {
            let by_p = group(&rs, |r| OrdF64(r.p));
            if by_p.len() < 2 {
                return None;
            }
            let p_values: Vec<f64> = by_p.keys().map(|k| k.0).collect();
            let mean_errors: Vec<f64> = by_p.values().map(|v| mean_error(v)).collect();
            let max = mean_errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = mean_errors.iter().copied().fold(f64::INFINITY, f64::min);
            let max_min_ratio = max / min;
            let pass = match pattern {
                Pattern::Dense => max_min_ratio <= FLAT_RATIO,
                _ => mean_errors[0] <= mean_errors[mean_errors.len() - 1],
            };
            Some(PProfile {
                pattern,
                s: s.0,
                m,
                n,
                p_values,
                mean_errors,
                max_min_ratio,
                pass,
            })
        })
        .collect();

    let m_profiles = group(records, |r| (r.pattern, OrdF64(r.s), OrdF64(r.p), r.n))
        .into_iter()
        .filter_map(|((pattern, s, p, n), rs)| {
            let by_m = group(&rs, |r| r.m);
            if by_m.len() < 2 {
                return None;
            }
            let m_values: Vec<usize> = by_m.keys().copied().collect();
            let mean_errors: Vec<f64> = by_m.values().map(|v| mean_error(v)).collect();
            let predicted_leading: Vec<f64> = by_m.values().map(|v| v[0].predicted_leading).collect();
            let ms: Vec<f64> = m_values.iter().map(|&m| m as f64).collect();
            let rank_correlation = spearman(&ms, &mean_errors);
            let pass = mean_errors.windows(2).all(|w| w[0] < w[1]);
            Some(MProfile {
                pattern,
                s: s.0,
                p: p.0,
                n,
                m_values,
                mean_errors,
                predicted_leading,
                rank_correlation,
                pass,
            })
        })
        .collect();

    Summary {
        records: records.len(),
        failed_cells: 0,
        slope_band: format!(
            "slope in [theory - {SLOPE_BAND_STEEP:.4}, theory + {SLOPE_BAND_SHALLOW:.4}] with theory = -1/(1+s)"
        ),
        configurations,
        p_profiles,
        m_profiles,
    }
}

pub const RECORDS_HEADER: &str =
    "n,M,p,s,pattern,replicate,measured_error,stderr,lambda_used,predicted_leading,converged";

pub fn records_to_csv(records: &[RateRecord]) -> Result<String> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in records {
        writer
            .serialize(r)
            .map_err(|e| Error::Numeric(format!("cannot serialize record: {e}")))?;
    }
    let body = writer
        .into_inner()
        .map_err(|e| Error::Numeric(format!("cannot flush records: {e}")))?;
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(out)
}

/// Parses a records CSV; errors name the offending line and field.
pub fn records_from_csv(text: &str, source: &str) -> Result<Vec<RateRecord>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(source, e.to_string()))?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    let want: Vec<&str> = RECORDS_HEADER.split(',').collect();
    if got != want {
        return Err(Error::parse(
            format!("{source} line 1"),
            format!("expected header {RECORDS_HEADER:?}"),
        ));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::parse(source, e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let record: RateRecord = row.deserialize(Some(&headers)).map_err(|e| {
            let field = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err
                    .field()
                    .and_then(|f| want.get(f as usize).copied())
                    .unwrap_or("?")
                    .to_string(),
                _ => "?".to_string(),
            };
            Error::parse(format!("{source} line {line} field {field}"), e.to_string())
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<RateRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_csv(&text, &path.display().to_string())
}
