//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage, validation or parse errors and
//! 3 when an estimator fails numerically.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::estimators::{
    gfa_fit, pca_init_with_mode, trex_fit, tyler_fixed_point, EstimatorConfig, FitReport, Mode,
    Termination,
};
use crate::io::{self, BenchRow, Fitted, ModelRecord};
use crate::subspace::{
    center_samples, euclidean_median, pca_subspace, point_to_subspace_distances, spherical_pca,
    trex_subspace, PcaRoute, Subspace,
};
use crate::synthetic::{
    planted_model, planted_subspace, run_benchmark, sample_replicate, write_bench_csv, BenchResult,
    EstimatorKind, Scenario, ScenarioKind, SubspaceScenario, Truth,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Iterations per fit in the Tyler comparison benchmark.
const TYLER_COMPARE_ITERS: usize = 20;

#[derive(Debug, Parser)]
#[command(
    name = "trex",
    version,
    about = "Robust low-rank plus diagonal scatter estimation"
)]
pub struct Cli {
    /// Worker threads; 1 forces the sequential path, 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an estimator to a CSV data file and write a model file.
    Fit(FitArgs),
    /// Run the Monte-Carlo benchmark on synthetic data.
    Bench(BenchArgs),
    /// Fit subspaces after Euclidean-median centering and report distances.
    Subspace(SubspaceArgs),
    /// Write a synthetic data set as CSV.
    Generate(GenerateArgs),
    /// Print a benchmark CSV as a table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Trex,
    Gfa,
    Tyler,
    Pca,
}

impl From<EstimatorArg> for EstimatorKind {
    fn from(arg: EstimatorArg) -> Self {
        match arg {
            EstimatorArg::Trex => EstimatorKind::Trex,
            EstimatorArg::Gfa => EstimatorKind::Gfa,
            EstimatorArg::Tyler => EstimatorKind::Tyler,
            EstimatorArg::Pca => EstimatorKind::PcaInit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dense,
    Tall,
    Auto,
}

impl From<ModeArg> for Mode {
    fn from(arg: ModeArg) -> Self {
        match arg {
            ModeArg::Dense => Mode::Dense,
            ModeArg::Tall => Mode::Tall,
            ModeArg::Auto => Mode::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Gaussian,
    StudentT,
    Contaminated,
    /// Gaussian data with m = n + 1 and a fixed iteration budget.
    TylerCompare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Trex,
    Pca,
    Spca,
}

impl MethodArg {
    fn name(self) -> &'static str {
        match self {
            MethodArg::Trex => "trex",
            MethodArg::Pca => "pca",
            MethodArg::Spca => "spca",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenerateKind {
    Gaussian,
    StudentT,
    Contaminated,
    /// Planted subspace with isotropic outliers.
    Subspace,
}

/// Iteration settings shared by every estimator.
#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Relative objective change that stops the outer loop.
    #[arg(long, default_value = "1e-6")]
    pub tol: f64,
    /// Maximum outer iterations.
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Maximum M-step iterations per outer iteration.
    #[arg(long, default_value_t = 50)]
    pub inner_iters: usize,
    /// Relative surrogate change that stops an M-step.
    #[arg(long, default_value = "1e-8")]
    pub inner_tol: f64,
    /// Run exactly this many outer iterations, ignoring --tol.
    #[arg(long)]
    pub fixed_iters: Option<usize>,
    /// Scatter representation; auto picks tall when n > 4m.
    #[arg(long, value_enum, default_value = "auto")]
    pub mode: ModeArg,
}

impl SolverArgs {
    fn config(&self, rank: usize, seed: u64) -> EstimatorConfig {
        let mut cfg = EstimatorConfig::new(rank).with_mode(self.mode.into());
        cfg.tol = self.tol;
        cfg.max_outer_iters = self.max_iters;
        cfg.max_inner_iters = self.inner_iters;
        cfg.inner_tol = self.inner_tol;
        cfg.seed = seed;
        match self.fixed_iters {
            Some(iters) => cfg.fixed_iterations(iters),
            None => cfg,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Data CSV, one sample per row; a non-numeric first line is a header.
    #[arg(long)]
    pub input: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "trex")]
    pub estimator: EstimatorArg,
    /// Number of factors; required except for tyler.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    pub scenario: ScenarioArg,
    /// Dimensions to run, comma separated.
    #[arg(long = "n", value_delimiter = ',', default_value = "50")]
    pub dims: Vec<usize>,
    /// Sample sizes, comma separated; ignored by tyler-compare (m = n + 1).
    #[arg(long = "m", value_delimiter = ',', default_value = "300")]
    pub samples: Vec<usize>,
    /// Rank of the planted model and of the fitted models.
    #[arg(long, default_value_t = 5)]
    pub rank: usize,
    /// Monte-Carlo replicates per grid point.
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Estimators to compare [default: trex,gfa, or trex,tyler for tyler-compare].
    #[arg(long, value_enum, value_delimiter = ',')]
    pub estimators: Vec<EstimatorArg>,
    /// Degrees of freedom of the student-t scenario.
    #[arg(long, default_value_t = 3.0)]
    pub nu: f64,
    /// Outlier fraction of the contaminated scenario.
    #[arg(long, default_value_t = 0.02)]
    pub outlier_fraction: f64,
    /// Result CSV.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write zero in the seconds column so output is reproducible.
    #[arg(long)]
    pub no_timings: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SubspaceArgs {
    /// Training CSV, one sample per row.
    #[arg(long)]
    pub input: PathBuf,
    /// Held-out CSV; in-sample distances are reported when omitted.
    #[arg(long)]
    pub test_input: Option<PathBuf>,
    /// Output directory for bases, center and distances.csv.
    #[arg(long)]
    pub output: PathBuf,
    /// Subspace dimension.
    #[arg(long, default_value_t = 9)]
    pub rank: usize,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "trex,pca,spca"
    )]
    pub methods: Vec<MethodArg>,
    /// Step tolerance of the Euclidean median.
    #[arg(long, default_value = "1e-8")]
    pub median_tol: f64,
    /// Iteration cap of the Euclidean median.
    #[arg(long, default_value_t = 1000)]
    pub median_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    pub kind: GenerateKind,
    #[arg(long = "n", default_value_t = 50)]
    pub dim: usize,
    #[arg(long = "m", default_value_t = 300)]
    pub samples: usize,
    #[arg(long, default_value_t = 5)]
    pub rank: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Outlier fraction (contaminated: 0.02, subspace: 0.3 when unset).
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
    /// Held-out inlier count for the subspace kind.
    #[arg(long, default_value_t = 32)]
    pub test_samples: usize,
    /// Samples CSV to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Subspace kind: held-out inliers CSV.
    #[arg(long)]
    pub test_output: Option<PathBuf>,
    /// Ground truth: model file for factor kinds, basis CSV for subspace.
    #[arg(long)]
    pub truth_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Benchmark CSV written by `trex bench --output`.
    #[arg(long)]
    pub input: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if cli.threads > 0 {
        // Fails only if a pool already exists, e.g. when called twice in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let outcome = match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Subspace(args) => cmd_subspace(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn warn_all(report: &FitReport) {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

fn check_solver(args: &SolverArgs) -> Result<()> {
    if !(args.tol > 0.0) || !(args.inner_tol > 0.0) {
        return Err(Error::InvalidInput("tolerances must be positive".into()));
    }
    if args.max_iters == 0 || args.inner_iters == 0 || args.fixed_iters == Some(0) {
        return Err(Error::InvalidInput(
            "iteration counts must be at least 1".into(),
        ));
    }
    Ok(())
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    check_solver(&args.solver)?;
    let data = io::read_samples(&args.input)?;
    let estimator = EstimatorKind::from(args.estimator);
    if args.rank.is_none() && estimator != EstimatorKind::Tyler {
        return Err(Error::InvalidInput(format!(
            "--rank is required for {}",
            estimator.name()
        )));
    }
    let cfg = args.solver.config(args.rank.unwrap_or(1), args.seed);
    if estimator != EstimatorKind::Tyler {
        cfg.validate(data.dim())?;
    }
    let start = Instant::now();
    let (fitted, report) = match estimator {
        EstimatorKind::Trex => {
            let (model, report) = trex_fit(&data, &cfg)?;
            (Fitted::Factor(model), report)
        }
        EstimatorKind::Gfa => {
            let (model, report) = gfa_fit(&data, &cfg)?;
            (Fitted::Factor(model), report)
        }
        EstimatorKind::Tyler => {
            let (scatter, report) = tyler_fixed_point(&data, &cfg)?;
            (Fitted::Scatter(scatter), report)
        }
        EstimatorKind::PcaInit => {
            let model = pca_init_with_mode(&data, cfg.rank, cfg.mode)?;
            let report = FitReport {
                termination: Termination::ToleranceMet,
                ..FitReport::default()
            };
            (Fitted::Factor(model), report)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    warn_all(&report);
    let record = ModelRecord {
        estimator: estimator.name().to_string(),
        fitted,
        iterations: report.outer_iters,
        termination: report.termination,
        objective_trace: report.objective_trace.clone(),
    };
    io::save_model(&args.output, &record)?;
    let objective = report
        .objective_trace
        .last()
        .map_or_else(|| "n/a".to_string(), |v| format!("{v:.10e}"));
    println!(
        "{}: n={} m={} iterations={} termination={} objective={} seconds={:.3}",
        estimator.name(),
        data.dim(),
        data.len(),
        report.outer_iters,
        report.termination.as_str(),
        objective,
        seconds
    );
    Ok(())
}

fn scenario_kind(arg: ScenarioArg, nu: f64, outlier_fraction: f64) -> ScenarioKind {
    match arg {
        ScenarioArg::Gaussian | ScenarioArg::TylerCompare => ScenarioKind::Gaussian,
        ScenarioArg::StudentT => ScenarioKind::StudentT { nu },
        ScenarioArg::Contaminated => ScenarioKind::Contaminated { outlier_fraction },
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    check_solver(&args.solver)?;
    if args.reps == 0 {
        return Err(Error::InvalidInput("--reps must be at least 1".into()));
    }
    let compare = args.scenario == ScenarioArg::TylerCompare;
    let estimators: Vec<EstimatorKind> = if args.estimators.is_empty() {
        if compare {
            vec![EstimatorKind::Trex, EstimatorKind::Tyler]
        } else {
            vec![EstimatorKind::Trex, EstimatorKind::Gfa]
        }
    } else {
        args.estimators.iter().map(|&e| e.into()).collect()
    };
    let mut cfg = args.solver.config(args.rank, args.seed);
    if compare && args.solver.fixed_iters.is_none() {
        cfg = cfg.fixed_iterations(TYLER_COMPARE_ITERS);
    }
    let kind = scenario_kind(args.scenario, args.nu, args.outlier_fraction);

    let mut results: Vec<BenchResult> = Vec::new();
    for &n in &args.dims {
        let truth = planted_model(n, args.rank, args.seed)?;
        let sizes = if compare {
            vec![n + 1]
        } else {
            args.samples.clone()
        };
        for m in sizes {
            let scn = Scenario::new(
                kind,
                Truth::Factor(truth.clone()),
                m,
                args.rank,
                args.reps,
                args.seed,
            )?;
            let result = run_benchmark(&scn, &estimators, &cfg)?;
            for row in &result.rows {
                if row.failures > 0 {
                    eprintln!(
                        "warning: {} failed on {} of {} replicates of {}",
                        row.estimator.name(),
                        row.failures,
                        row.replicates,
                        result.scenario
                    );
                }
            }
            results.push(result);
        }
    }

    let rows: Vec<BenchRow> = results
        .iter()
        .flat_map(|result| {
            result.rows.iter().map(|row| BenchRow {
                scenario: result.scenario.clone(),
                estimator: row.estimator.name().to_string(),
                mean_mse: row.mean_mse,
                std_mse: row.std_mse,
                mean_seconds: row.mean_seconds,
                failures: row.failures,
            })
        })
        .collect();
    print_table(&rows);
    if let Some(path) = &args.output {
        let mut out = fs::File::create(path)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(path, e))?;
        write_bench_csv(&mut out, &results, !args.no_timings)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn cmd_subspace(args: &SubspaceArgs) -> Result<()> {
    check_solver(&args.solver)?;
    if args.methods.is_empty() {
        return Err(Error::InvalidInput("no subspace methods requested".into()));
    }
    let train = io::read_samples(&args.input)?;
    let test = match &args.test_input {
        Some(path) => {
            let test = io::read_samples(path)?;
            if test.dim() != train.dim() {
                return Err(Error::DimensionMismatch {
                    expected: format!("{} columns in the test file", train.dim()),
                    found: format!("{}", test.dim()),
                });
            }
            Some(test)
        }
        None => None,
    };
    let limit = train.dim().min(train.len());
    if args.rank == 0 || args.rank > limit {
        return Err(Error::InvalidInput(format!(
            "rank must satisfy 1 <= r <= min(n, m) = {limit}, got {}",
            args.rank
        )));
    }

    let median = euclidean_median(&train, args.median_tol, args.median_iters)?;
    if median.stalled {
        eprintln!(
            "warning: Euclidean median did not converge in {} iterations",
            median.iterations
        );
    }
    let (centered, dropped) = center_samples(&train, &median.center)?;
    if dropped > 0 {
        eprintln!("warning: dropped {dropped} samples equal to the median");
    }
    let mean = train.mean();
    let cfg = args.solver.config(args.rank, args.seed);

    fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    let evaluate = test.as_ref().unwrap_or(&train);
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for &method in &args.methods {
        let (subspace, center) = match method {
            MethodArg::Trex => (trex_subspace(&centered, &cfg)?, &median.center),
            MethodArg::Spca => (spherical_pca(&centered, args.rank)?, &median.center),
            MethodArg::Pca => (pca_subspace(&train, args.rank, PcaRoute::Auto)?, &mean),
        };
        write_basis(&args.output, method, &subspace)?;
        let distances = point_to_subspace_distances(evaluate, &subspace, center)?;
        println!(
            "{}: median distance {:.6}",
            method.name(),
            median_of(&distances)
        );
        names.push(method.name().to_string());
        columns.push(distances);
    }
    io::write_matrix_file(
        &args.output.join("median.csv"),
        &DMatrix::from_row_slice(1, median.center.len(), median.center.as_slice()),
        "x",
    )?;
    io::write_columns(&args.output.join("distances.csv"), &names, &columns)
}

fn print_table(rows: &[BenchRow]) {
    println!(
        "{:<36} {:<6} {:>12} {:>12} {:>10} {:>8}",
        "scenario", "est", "mean_mse", "std_mse", "seconds", "failures"
    );
    for row in rows {
        println!(
            "{:<36} {:<6} {:>12.6} {:>12.6} {:>10.4} {:>8}",
            row.scenario, row.estimator, row.mean_mse, row.std_mse, row.mean_seconds, row.failures
        );
    }
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    print_table(&io::read_bench_csv(&args.input)?);
    Ok(())
}

fn write_basis(dir: &Path, method: MethodArg, subspace: &Subspace) -> Result<()> {
    let path = dir.join(format!("basis_{}.csv", method.name()));
    io::write_matrix_file(&path, subspace.basis(), "b")
}

fn median_of(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    match args.kind {
        GenerateKind::Subspace => {
            let scn = SubspaceScenario {
                dim: args.dim,
                rank: args.rank,
                train: args.samples,
                test: args.test_samples,
                outlier_fraction: args.outlier_fraction.unwrap_or(0.3),
                seed: args.seed,
                ..SubspaceScenario::standard(args.seed)
            };
            let planted = planted_subspace(&scn)?;
            io::write_samples(&args.output, &planted.train)?;
            if let Some(path) = &args.test_output {
                io::write_samples(path, &planted.test)?;
            }
            if let Some(path) = &args.truth_output {
                io::write_matrix_file(path, &planted.basis, "b")?;
            }
        }
        kind => {
            let kind = match kind {
                GenerateKind::StudentT => ScenarioKind::student_t(),
                GenerateKind::Contaminated => ScenarioKind::Contaminated {
                    outlier_fraction: args.outlier_fraction.unwrap_or(0.02),
                },
                _ => ScenarioKind::Gaussian,
            };
            let truth = planted_model(args.dim, args.rank, args.seed)?;
            let scn = Scenario::new(
                kind,
                Truth::Factor(truth.clone()),
                args.samples,
                args.rank,
                1,
                args.seed,
            )?;
            let draw = sample_replicate(&scn, 0)?;
            io::write_samples(&args.output, &draw.data)?;
            if let Some(path) = &args.truth_output {
                let record = ModelRecord {
                    estimator: "planted".into(),
                    fitted: Fitted::Factor(truth),
                    iterations: 0,
                    termination: Termination::ToleranceMet,
                    objective_trace: Vec::new(),
                };
                io::save_model(path, &record)?;
            }
        }
    }
    Ok(())
}
