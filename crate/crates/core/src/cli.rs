//! The `lpmkl` command-line front end. Exit codes: 0 success, 1 usage error,
//! 2 data or runtime error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::harness::{self, ExperimentPlan, Summary};
use crate::kernel::{KernelSpec, SpectralKernel, DEFAULT_TRUNCATION};
use crate::solver::{solve, MklProblem, SolutionReport, SolverOptions};
use crate::synth::{build_truth, mix_seed, sample_dataset, TruthSpec};
use crate::theory::{
    self, global_bound_rate, localized_rate, minimax_lower_bound, optimal_lambda, predicted_rate, zeta_n, TheoryParams,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lpmkl", version, about = "lp-mixed-norm multiple kernel learning")]
pub struct CliConfig {
    /// Human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pub pretty: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve an lp-MKL problem given as JSON with Gram CSV files.
    Solve(SolveArgs),
    /// Evaluate the rate formulas for a parameter file.
    Theory(TheoryArgs),
    /// Greedy Hamming packing of [N]^M and its counting bound.
    Packing(PackingArgs),
    /// Draw a truth and sample a dataset.
    Gen(GenArgs),
    /// Run a rate-scaling sweep.
    Sweep(SweepArgs),
    /// Summarize a records CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// Solution JSON; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub params: PathBuf,
}

#[derive(Debug, Args)]
pub struct PackingArgs {
    /// Alphabet size.
    #[arg(long = "N")]
    pub alphabet: u32,
    /// Word length (even).
    #[arg(long = "M")]
    pub length: u32,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub n: usize,
    /// Dataset CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the drawn truth as JSON.
    #[arg(long)]
    pub truth_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Parallel cells; overrides the plan.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub records: PathBuf,
}

/// Truth file of `gen`: a [`TruthSpec`] plus kernel, noise and sampling seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    #[serde(flatten)]
    pub truth: TruthSpec,
    #[serde(default = "default_gen_kernel")]
    pub kernel: KernelSpec,
    #[serde(default = "default_noise_bound", rename = "L")]
    pub noise_bound: f64,
    /// Sampling seed; derived from the truth seed and `n` when absent.
    #[serde(default)]
    pub data_seed: Option<u64>,
}

fn default_gen_kernel() -> KernelSpec {
    KernelSpec::Spectral(SpectralKernel::normalized(0.5, DEFAULT_TRUNCATION).expect("valid default kernel"))
}

fn default_noise_bound() -> f64 {
    1.0
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn dispatch(args: &[String]) -> i32 {
    let config = match CliConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    init_logging(config.verbose);
    match run(&config) {
        Ok(output) => {
            print!("{output}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

/// Runs the configured subcommand and returns what goes to stdout.
pub fn run(config: &CliConfig) -> Result<String> {
    match &config.command {
        Command::Solve(a) => run_solve(a, config.pretty),
        Command::Theory(a) => run_theory(a, config.pretty),
        Command::Packing(a) => run_packing(a, config.pretty),
        Command::Gen(a) => run_gen(a),
        Command::Sweep(a) => run_sweep(a, config.pretty),
        Command::Report(a) => run_report(a, config.pretty),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(format!("{} line {} column {}", path.display(), e.line(), e.column()), e))
}

fn run_solve(args: &SolveArgs, pretty: bool) -> Result<String> {
    let problem = MklProblem::load_json(&args.problem)?;
    let solution = solve(&problem, &SolverOptions::default())?;
    let report = SolutionReport::from(&solution);
    let rendered = to_json(&report);
    if let Some(out) = &args.out {
        write_file(out, &rendered)?;
    }
    if pretty {
        let mut s = String::new();
        writeln!(s, "objective   {:.10e}", report.objective).unwrap();
        writeln!(s, "iterations  {}", report.iterations).unwrap();
        writeln!(s, "converged   {}", report.converged).unwrap();
        writeln!(s, "{:>6} {:>14} {:>14}", "kernel", "block_norm", "theta").unwrap();
        for (m, norm) in report.block_norms.iter().enumerate() {
            let theta = report
                .theta
                .as_ref()
                .map_or("-".to_string(), |t| format!("{:.6e}", t[m]));
            writeln!(s, "{m:>6} {norm:>14.6e} {theta:>14}").unwrap();
        }
        return Ok(s);
    }
    Ok(if args.out.is_some() { String::new() } else { rendered })
}

fn run_theory(args: &TheoryArgs, pretty: bool) -> Result<String> {
    let params: TheoryParams = read_json(&args.params)?;
    params.validate()?;
    let choice = optimal_lambda(&params)?;
    let rate = predicted_rate(&params)?;
    let p = params.p.value();
    let value = json!({
        "params": params,
        "optimal_lambda": choice.lambda,
        "sample_size_ok": choice.sample_size_ok,
        "zeta_n": zeta_n(&params, choice.lambda)?,
        "predicted_rate": rate.leading,
        "predicted_rate_terms": rate.full,
        "minimax_lower_bound": minimax_lower_bound(&params, params.r_p)?,
        "localized_rate": localized_rate(params.n, params.m, p, params.s),
        "global_bound_rate": global_bound_rate(params.n, params.m, p),
        "theory_exponent": harness::theory_exponent(params.s),
    });
    if pretty {
        let mut s = String::new();
        for (k, v) in value
            .as_object()
            .expect("object")
            .iter()
            .filter(|(k, _)| *k != "params")
        {
            writeln!(s, "{k:<22} {v}").unwrap();
        }
        return Ok(s);
    }
    Ok(to_json(&value))
}

fn run_packing(args: &PackingArgs, pretty: bool) -> Result<String> {
    let bound = theory::packing_lower_bound(args.alphabet, args.length)?;
    let code = theory::greedy_packing(args.alphabet, args.length, (args.length / 2) as usize)?;
    let min_distance = code
        .iter()
        .enumerate()
        .flat_map(|(i, a)| code[i + 1..].iter().map(move |b| theory::hamming(a, b)))
        .min();
    if pretty {
        let mut s = String::new();
        writeln!(
            s,
            "Q* = {}/{} ({:.6})",
            bound.q_star_num, bound.q_star_den, bound.q_star
        )
        .unwrap();
        writeln!(s, "ceil(Q*) = {}", bound.q_star_ceil).unwrap();
        writeln!(s, "code size = {}", code.len()).unwrap();
        for word in &code {
            let w: Vec<String> = word.iter().map(u32::to_string).collect();
            writeln!(s, "{}", w.join(" ")).unwrap();
        }
        return Ok(s);
    }
    let q_star = if bound.q_star_den == "1" {
        bound.q_star_num.clone()
    } else {
        format!("{}/{}", bound.q_star_num, bound.q_star_den)
    };
    Ok(to_json(&json!({
        "N": args.alphabet,
        "M": args.length,
        "q_star": q_star,
        "q_star_value": bound.q_star,
        "q_star_ceil": bound.q_star_ceil,
        "log_bound": bound.log_bound,
        "code_size": code.len(),
        "min_distance": min_distance,
        "code": code,
    })))
}

fn run_gen(args: &GenArgs) -> Result<String> {
    let spec: GenSpec = read_json(&args.spec)?;
    spec.kernel.validate()?;
    let truth = build_truth(&spec.truth, &spec.kernel)?;
    let seed = spec
        .data_seed
        .unwrap_or_else(|| mix_seed(&[spec.truth.seed, args.n as u64]));
    let data = sample_dataset(&truth, args.n, spec.noise_bound, seed)?;
    write_file(&args.out, &data.to_csv())?;
    if let Some(path) = &args.truth_out {
        let mut text = truth.to_json();
        text.push('\n');
        write_file(path, &text)?;
    }
    Ok(String::new())
}

fn run_sweep(args: &SweepArgs, pretty: bool) -> Result<String> {
    let mut plan = ExperimentPlan::load(&args.plan)?;
    if args.workers.is_some() {
        plan.workers = args.workers;
        plan.validate()?;
    }
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let output = harness::sweep(&plan)?;
    write_file(
        &args.out_dir.join("records.csv"),
        &harness::records_to_csv(&output.records)?,
    )?;
    write_file(&args.out_dir.join("summary.json"), &to_json(&output.summary))?;
    write_file(&args.out_dir.join("failures.json"), &to_json(&output.failures))?;
    Ok(if pretty {
        render_summary(&output.summary)
    } else {
        String::new()
    })
}

fn run_report(args: &ReportArgs, pretty: bool) -> Result<String> {
    let records = harness::load_records(&args.records)?;
    let summary = harness::summarize(&records);
    Ok(if pretty {
        render_summary(&summary)
    } else {
        to_json(&summary)
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn render_summary(summary: &Summary) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "records: {}  failed cells: {}",
        summary.records, summary.failed_cells
    )
    .unwrap();
    if !summary.configurations.is_empty() {
        writeln!(
            s,
            "{:<8} {:>5} {:>3} {:>5} {:>9} {:>8} {:>8} {:>6}",
            "pattern", "s", "M", "p", "slope", "stderr", "theory", "pass"
        )
        .unwrap();
        for c in &summary.configurations {
            writeln!(
                s,
                "{:<8} {:>5} {:>3} {:>5} {:>9} {:>8} {:>8.4} {:>6}",
                c.pattern.as_str(),
                c.s,
                c.m,
                c.p,
                fmt_opt(c.slope),
                fmt_opt(c.slope_stderr),
                c.theory_exponent,
                c.pass.map_or("-".into(), |b| b.to_string())
            )
            .unwrap();
        }
    }
    for p in &summary.p_profiles {
        writeln!(
            s,
            "p-profile {} s={} M={} n={}: errors {:?} ratio {:.3} pass {}",
            p.pattern.as_str(),
            p.s,
            p.m,
            p.n,
            p.mean_errors,
            p.max_min_ratio,
            p.pass
        )
        .unwrap();
    }
    for m in &summary.m_profiles {
        writeln!(
            s,
            "M-profile {} s={} p={} n={}: errors {:?} rank correlation {:.3} pass {}",
            m.pattern.as_str(),
            m.s,
            m.p,
            m.n,
            m.mean_errors,
            m.rank_correlation,
            m.pass
        )
        .unwrap();
    }
    s
}
