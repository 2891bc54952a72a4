//! Estimators for low-rank plus diagonal scatter matrices.
//!
//! * [`trex_fit`]: EM for Tyler's likelihood restricted to `Σ = FFᵀ + D`.
//!   The E-step forms the weighted scatter `Ŝ = (n/m) Σᵢ xᵢxᵢᵀ / (xᵢᵀΣ⁻¹xᵢ)`,
//!   the M-step fits a factor model to `Ŝ` with Rubin & Thayer's EM.
//! * [`gfa_fit`]: Gaussian maximum likelihood factor analysis on the sample
//!   covariance, solved by the same inner EM.
//! * [`tyler_fixed_point`]: the classical unstructured Tyler iteration.
//! * [`pca_init`]: principal component factor analysis of the correlation
//!   matrix, used as the starting point of the iterative methods.

use std::borrow::Cow;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::factor_model::{check_dims, floor_diagonal, DataMatrix, FactorModel};

/// Allowed increase of the objective between accepted EM iterates.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Floor on the denominator of the relative-change rule.
const ABS_GUARD: f64 = 1e-12;

/// How products with the weighted scatter are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Materialize the `n × n` scatter matrix.
    Dense,
    /// Keep the scatter implicit as `XWXᵀ/m`; nothing `n × n` is formed.
    Tall,
    /// `Tall` when `n > 4m`, `Dense` otherwise.
    Auto,
}

impl Mode {
    pub fn resolve(self, n: usize, m: usize) -> Mode {
        match self {
            Mode::Auto if n > 4 * m => Mode::Tall,
            Mode::Auto => Mode::Dense,
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub rank: usize,
    pub max_outer_iters: usize,
    /// Cap on Rubin & Thayer iterations inside one M-step.
    pub max_inner_iters: usize,
    /// Relative objective change that ends the outer loop.
    pub tol: f64,
    /// Relative surrogate change that ends an M-step.
    pub inner_tol: f64,
    pub mode: Mode,
    pub seed: u64,
    /// When false the outer loop always runs `max_outer_iters` iterations.
    pub check_convergence: bool,
}

impl EstimatorConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            max_outer_iters: 100,
            max_inner_iters: 50,
            tol: 1e-6,
            inner_tol: 1e-8,
            mode: Mode::Auto,
            seed: 0,
            check_convergence: true,
        }
    }

    /// Runs exactly `iters` outer iterations regardless of the tolerance.
    pub fn fixed_iterations(mut self, iters: usize) -> Self {
        self.max_outer_iters = iters;
        self.check_convergence = false;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.rank == 0 || self.rank > n {
            return Err(Error::InvalidInput(format!(
                "rank must satisfy 1 <= r <= n = {n}, got {}",
                self.rank
            )));
        }
        if !(self.tol > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.max_inner_iters == 0 {
            return Err(Error::InvalidInput(
                "iteration caps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ToleranceMet,
    MaxIters,
    /// The objective stopped decreasing before the tolerance was met.
    Stalled,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::ToleranceMet => "tolerance-met",
            Termination::MaxIters => "max-iters",
            Termination::Stalled => "stalled",
        }
    }
}

impl std::str::FromStr for Termination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tolerance-met" => Ok(Termination::ToleranceMet),
            "max-iters" => Ok(Termination::MaxIters),
            "stalled" => Ok(Termination::Stalled),
            other => Err(Error::InvalidInput(format!(
                "unknown termination '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Objective at the initial point followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
    pub outer_iters: usize,
    pub termination: Termination,
    pub elapsed: f64,
    pub e_step_seconds: f64,
    pub m_step_seconds: f64,
    /// Euclidean norms of the raw samples, for estimators that normalize.
    pub sample_norms: Vec<f64>,
    pub warnings: Vec<String>,
}

impl FitReport {
    fn new() -> Self {
        Self {
            objective_trace: Vec::new(),
            outer_iters: 0,
            termination: Termination::MaxIters,
            elapsed: 0.0,
            e_step_seconds: 0.0,
            m_step_seconds: 0.0,
            sample_norms: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

impl Default for FitReport {
    fn default() -> Self {
        Self::new()
    }
}

/// The E-step output `Ŝ = (1/m) Σᵢ wᵢxᵢxᵢᵀ`, either materialized or implicit.
#[derive(Debug, Clone)]
pub enum WeightedScatter<'a> {
    Dense {
        matrix: DMatrix<f64>,
        weights: Option<DVector<f64>>,
    },
    Implicit {
        samples: Cow<'a, DMatrix<f64>>,
        weights: DVector<f64>,
    },
}

impl WeightedScatter<'_> {
    /// A materialized scatter without sample weights.
    pub fn dense(matrix: DMatrix<f64>) -> Self {
        WeightedScatter::Dense {
            matrix,
            weights: None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WeightedScatter::Dense { matrix, .. } => matrix.nrows(),
            WeightedScatter::Implicit { samples, .. } => samples.nrows(),
        }
    }

    /// `Ŝ · rhs`. `O(nmk)` in implicit form.
    pub fn apply(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            WeightedScatter::Dense { matrix, .. } => matrix * rhs,
            WeightedScatter::Implicit { samples, weights } => {
                let m = samples.ncols() as f64;
                let mut proj = samples.transpose() * rhs;
                for (mut row, &w) in proj.row_iter_mut().zip(weights.iter()) {
                    row *= w / m;
                }
                samples.as_ref() * proj
            }
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            WeightedScatter::Dense { matrix, .. } => matrix.diagonal(),
            WeightedScatter::Implicit { samples, weights } => {
                let m = samples.ncols() as f64;
                DVector::from_iterator(
                    samples.nrows(),
                    samples.row_iter().map(|row| {
                        row.iter()
                            .zip(weights.iter())
                            .map(|(x, w)| w * x * x)
                            .sum::<f64>()
                            / m
                    }),
                )
            }
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            WeightedScatter::Dense { matrix, .. } => matrix.clone(),
            WeightedScatter::Implicit { samples, weights } => weighted_outer(samples, weights),
        }
    }

    pub fn weights(&self) -> Option<&DVector<f64>> {
        match self {
            WeightedScatter::Dense { weights, .. } => weights.as_ref(),
            WeightedScatter::Implicit { weights, .. } => Some(weights),
        }
    }
}

fn weighted_outer(samples: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let m = samples.ncols() as f64;
    let mut scaled = samples.clone();
    for (mut col, &w) in scaled.column_iter_mut().zip(weights.iter()) {
        col *= w / m;
    }
    let mut s = scaled * samples.transpose();
    symmetrize(&mut s);
    s
}

fn symmetrize(s: &mut DMatrix<f64>) {
    let n = s.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
}

fn scatter_from_distances<'a>(
    data: &'a DataMatrix,
    dists: &DVector<f64>,
    mode: Mode,
) -> WeightedScatter<'a> {
    let n = data.dim() as f64;
    let weights = dists.map(|q| n / q);
    match mode.resolve(data.dim(), data.len()) {
        Mode::Tall => WeightedScatter::Implicit {
            samples: Cow::Borrowed(data.samples()),
            weights,
        },
        _ => WeightedScatter::Dense {
            matrix: weighted_outer(data.samples(), &weights),
            weights: Some(weights),
        },
    }
}

/// Conditional expectation of the latent scatter given the current model.
pub fn e_step<'a>(
    model: &FactorModel,
    data: &'a DataMatrix,
    mode: Mode,
) -> Result<WeightedScatter<'a>> {
    if !data.is_normalized() {
        return Err(Error::InvalidInput(
            "e_step expects samples normalized to the unit sphere".into(),
        ));
    }
    check_dims(model, data)?;
    let dists = model.mahalanobis(data)?;
    Ok(scatter_from_distances(data, &dists, mode))
}

/// Result of one M-step with its surrogate trace.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub model: FactorModel,
    /// `log det Σ + Tr(Σ⁻¹Ŝ)` at the warm start and after every update.
    pub surrogate_trace: Vec<f64>,
    pub iterations: usize,
}

/// Minimizes `log det(FFᵀ + D) + Tr((FFᵀ + D)⁻¹Ŝ)` starting from `init`.
pub fn m_step(
    scatter: &WeightedScatter<'_>,
    init: &FactorModel,
    cfg: &EstimatorConfig,
) -> Result<FactorModel> {
    Ok(m_step_traced(scatter, init, cfg)?.model)
}

pub fn m_step_traced(
    scatter: &WeightedScatter<'_>,
    init: &FactorModel,
    cfg: &EstimatorConfig,
) -> Result<MStepOutcome> {
    rubin_thayer(scatter, init, cfg.max_inner_iters, cfg.inner_tol, true)
}

fn relative_change(prev: f64, next: f64) -> f64 {
    (next - prev).abs() / prev.abs().max(ABS_GUARD)
}

/// Rubin & Thayer EM for Gaussian factor analysis on a fixed scatter.
///
/// One scatter product `Ŝ·D⁻¹F` per iteration evaluates both the surrogate
/// at the current iterate and the next update, since `ŜA = (ŜD⁻¹F)H`.
fn rubin_thayer(
    scatter: &WeightedScatter<'_>,
    init: &FactorModel,
    max_iters: usize,
    tol: f64,
    stop_on_tol: bool,
) -> Result<MStepOutcome> {
    let n = scatter.dim();
    if init.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("model of dimension {n}"),
            found: format!("dimension {}", init.dim()),
        });
    }
    let s_diag = scatter.diagonal();
    let fallback = s_diag.mean().max(f64::MIN_POSITIVE);
    let r = init.rank();

    let mut model = init.clone();
    let mut trace = Vec::with_capacity(max_iters + 1);
    let mut iterations = 0;
    loop {
        let cap = model.capacitance()?;
        let g = &cap.scaled_loadings;
        let sg = scatter.apply(g);
        let gsg = g.transpose() * &sg;
        let h = cap.chol.inverse();

        let trace_term: f64 = s_diag
            .iter()
            .zip(model.diag().iter())
            .map(|(s, d)| s / d)
            .sum::<f64>()
            - (&h * &gsg).trace();
        let objective = model.logdet_with(&cap) + trace_term;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite surrogate objective at inner iteration {iterations}"
            )));
        }
        trace.push(objective);
        let converged =
            trace.len() >= 2 && relative_change(trace[trace.len() - 2], objective) <= tol;
        if (stop_on_tol && converged) || iterations == max_iters {
            break;
        }

        let sa = &sg * &h;
        let mut b = &h + h.transpose() * &gsg * &h;
        symmetrize(&mut b);
        let b_chol = Cholesky::new(b.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite(format!(
                "Rubin-Thayer matrix B (r={r}) at inner iteration {iterations}"
            ))
        })?;
        let loadings = b_chol.solve(&sa.transpose()).transpose();
        let fb = &loadings * &b;
        let mut diag = DVector::from_iterator(
            n,
            (0..n).map(|j| {
                let cross = sa.row(j).dot(&loadings.row(j));
                let quad = fb.row(j).dot(&loadings.row(j));
                s_diag[j] - 2.0 * cross + quad
            }),
        );
        floor_diagonal(&mut diag, fallback);
        model = FactorModel::new(loadings, diag)?;
        iterations += 1;
    }
    Ok(MStepOutcome {
        model,
        surrogate_trace: trace,
        iterations,
    })
}

/// Relative change criterion `|f_{k+1} − f_k| / |f_k| ≤ ε` on the last two
/// entries. For `|f_k| < 1e-12` the denominator is held at `1e-12`.
pub fn terminate(trace: &[f64], eps: f64) -> bool {
    match trace {
        [.., prev, next] => relative_change(*prev, *next) <= eps,
        _ => false,
    }
}

fn validate_fit_input(
    data: &DataMatrix,
    cfg: &EstimatorConfig,
    report: &mut FitReport,
) -> Result<()> {
    cfg.validate(data.dim())?;
    if data.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "at least 2 samples are required, got {}",
            data.len()
        )));
    }
    if cfg.rank > data.len().min(data.dim()) {
        report.warnings.push(format!(
            "rank {} exceeds min(n, m) = {}",
            cfg.rank,
            data.len().min(data.dim())
        ));
    }
    Ok(())
}

/// EM for Tyler's likelihood under the factor model constraint.
///
/// Samples are projected to the unit sphere before anything else, so the
/// result depends only on sample directions. The initial point is the PCA
/// factor model of the normalized samples.
pub fn trex_fit(data: &DataMatrix, cfg: &EstimatorConfig) -> Result<(FactorModel, FitReport)> {
    let start = Instant::now();
    let mut report = FitReport::new();
    validate_fit_input(data, cfg, &mut report)?;
    let (x, norms) = data.normalize();
    report.sample_norms = norms;
    let mode = cfg.mode.resolve(x.dim(), x.len());
    let n = x.dim() as f64;
    let m = x.len() as f64;

    let objective_from = |model: &FactorModel, dists: &DVector<f64>| -> Result<f64> {
        let f = model.logdet()? + n / m * dists.iter().map(|q| q.ln()).sum::<f64>();
        Ok(f)
    };

    let mut model = pca_init_with_mode(&x, cfg.rank, mode)?;
    let mut dists = model.mahalanobis(&x)?;
    let mut objective = objective_from(&model, &dists)?;
    if !objective.is_finite() {
        return Err(Error::Numerical(
            "non-finite objective at the initial point".into(),
        ));
    }
    report.objective_trace.push(objective);
    report.termination = Termination::MaxIters;

    for iter in 1..=cfg.max_outer_iters {
        let t = Instant::now();
        let scatter = scatter_from_distances(&x, &dists, mode);
        report.e_step_seconds += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let candidate = m_step(&scatter, &model, cfg)?;
        report.m_step_seconds += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let cand_dists = candidate.mahalanobis(&x)?;
        let cand_objective = objective_from(&candidate, &cand_dists)?;
        report.e_step_seconds += t.elapsed().as_secs_f64();
        if !cand_objective.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite objective at outer iteration {iter}"
            )));
        }
        report.outer_iters = iter;

        if cand_objective > objective + MONOTONE_SLACK {
            report.termination =
                if cfg.check_convergence && relative_change(objective, cand_objective) <= cfg.tol {
                    Termination::ToleranceMet
                } else {
                    Termination::Stalled
                };
            break;
        }
        model = candidate;
        dists = cand_dists;
        objective = cand_objective;
        report.objective_trace.push(objective);
        if cfg.check_convergence && terminate(&report.objective_trace, cfg.tol) {
            report.termination = Termination::ToleranceMet;
            break;
        }
    }
    report.elapsed = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Gaussian factor analysis: Rubin & Thayer EM on the sample covariance of
/// the raw data.
pub fn gfa_fit(data: &DataMatrix, cfg: &EstimatorConfig) -> Result<(FactorModel, FitReport)> {
    let mut report = FitReport::new();
    validate_fit_input(data, cfg, &mut report)?;
    let mode = cfg.mode.resolve(data.dim(), data.len());
    let scatter = match mode {
        Mode::Tall => WeightedScatter::Implicit {
            samples: Cow::Owned(data.centered()),
            weights: DVector::from_element(data.len(), 1.0),
        },
        _ => WeightedScatter::Dense {
            matrix: data.sample_covariance(),
            weights: None,
        },
    };
    let init = pca_init_with_mode(data, cfg.rank, mode)?;
    let model = gfa_from_scatter(&scatter, init, cfg, &mut report)?;
    Ok((model, report))
}

/// Gaussian factor analysis on a given symmetric covariance matrix.
pub fn gfa_fit_covariance(
    covariance: &DMatrix<f64>,
    cfg: &EstimatorConfig,
) -> Result<(FactorModel, FitReport)> {
    if !covariance.is_square() {
        return Err(Error::InvalidInput("covariance must be square".into()));
    }
    cfg.validate(covariance.nrows())?;
    let mut report = FitReport::new();
    let init = pca_init_from_covariance(covariance, cfg.rank)?;
    let scatter = WeightedScatter::dense(covariance.clone());
    let model = gfa_from_scatter(&scatter, init, cfg, &mut report)?;
    Ok((model, report))
}

fn gfa_from_scatter(
    scatter: &WeightedScatter<'_>,
    init: FactorModel,
    cfg: &EstimatorConfig,
    report: &mut FitReport,
) -> Result<FactorModel> {
    let start = Instant::now();
    let (max_iters, stop) = if cfg.check_convergence {
        (cfg.max_outer_iters * cfg.max_inner_iters, true)
    } else {
        (cfg.max_outer_iters, false)
    };
    let outcome = rubin_thayer(scatter, &init, max_iters, cfg.inner_tol, stop)?;
    report.outer_iters = outcome.iterations;
    report.termination = if outcome.iterations < max_iters {
        Termination::ToleranceMet
    } else {
        Termination::MaxIters
    };
    report.objective_trace = outcome.surrogate_trace;
    report.m_step_seconds = start.elapsed().as_secs_f64();
    report.elapsed = report.m_step_seconds;
    Ok(outcome.model)
}

/// Unstructured Tyler objective `log det Σ + (n/m) Σᵢ log(xᵢᵀΣ⁻¹xᵢ)`.
pub fn dense_tyler_objective(sigma: &DMatrix<f64>, data: &DataMatrix) -> Result<f64> {
    let chol = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("scatter iterate".into()))?;
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|l| 2.0 * l.ln()).sum();
    let solved = chol.solve(data.samples());
    let n = data.dim() as f64;
    let m = data.len() as f64;
    let sum_log: f64 = data
        .samples()
        .column_iter()
        .zip(solved.column_iter())
        .map(|(x, y)| x.dot(&y).ln())
        .sum();
    Ok(logdet + n / m * sum_log)
}

/// One fixed-point map `Σ ↦ (n/m) Σᵢ xᵢxᵢᵀ / (xᵢᵀΣ⁻¹xᵢ)`, without trace
/// normalization.
pub fn tyler_step(sigma: &DMatrix<f64>, data: &DataMatrix) -> Result<DMatrix<f64>> {
    let n = data.dim();
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} x {n} scatter"),
            found: format!("{} x {}", sigma.nrows(), sigma.ncols()),
        });
    }
    let chol = Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("singular Tyler iterate".into()))?;
    let solved = chol.solve(data.samples());
    let scale = n as f64 / data.len() as f64;
    let mut next = DMatrix::zeros(n, n);
    for (x, y) in data.samples().column_iter().zip(solved.column_iter()) {
        let q = x.dot(&y);
        if !(q > 0.0) {
            return Err(Error::Numerical(format!("non-positive quadratic form {q}")));
        }
        next.ger(scale / q, &x, &x, 1.0);
    }
    Ok(next)
}

/// One EM step for the unstructured problem: the E-step weights from
/// `E[R²|x] = n / (xᵀΣ⁻¹x)` and the closed-form M-step `Σ⁺ = Ŝ`.
pub fn unstructured_em_step(sigma: &DMatrix<f64>, data: &DataMatrix) -> Result<DMatrix<f64>> {
    let n = data.dim();
    let lu = sigma.clone().lu();
    let solved = lu
        .solve(data.samples())
        .ok_or_else(|| Error::NotPositiveDefinite("singular scatter in EM step".into()))?;
    let weights = DVector::from_iterator(
        data.len(),
        data.samples()
            .column_iter()
            .zip(solved.column_iter())
            .map(|(x, y)| n as f64 / x.dot(&y)),
    );
    Ok(weighted_outer(data.samples(), &weights))
}

/// Tyler's fixed-point iteration from `Σ₀ = I` with `trace(Σ) = n` after
/// every step.
pub fn tyler_fixed_point(
    data: &DataMatrix,
    cfg: &EstimatorConfig,
) -> Result<(DMatrix<f64>, FitReport)> {
    let start = Instant::now();
    let mut report = FitReport::new();
    if cfg.max_outer_iters == 0 || !(cfg.tol > 0.0) {
        return Err(Error::InvalidInput(
            "invalid Tyler iteration settings".into(),
        ));
    }
    let n = data.dim();
    if data.len() <= n {
        report.warnings.push(format!(
            "Tyler's estimator may not exist with m = {} <= n = {n}",
            data.len()
        ));
    }
    let (x, norms) = data.normalize();
    report.sample_norms = norms;
    let mut sigma = DMatrix::<f64>::identity(n, n);
    report
        .objective_trace
        .push(dense_tyler_objective(&sigma, &x)?);
    for iter in 1..=cfg.max_outer_iters {
        let mut next = tyler_step(&sigma, &x)?;
        next *= n as f64 / next.trace();
        let change = (&next - &sigma).norm() / sigma.norm();
        sigma = next;
        report.outer_iters = iter;
        report
            .objective_trace
            .push(dense_tyler_objective(&sigma, &x)?);
        if cfg.check_convergence && change <= cfg.tol {
            report.termination = Termination::ToleranceMet;
            break;
        }
    }
    report.e_step_seconds = start.elapsed().as_secs_f64();
    report.elapsed = report.e_step_seconds;
    Ok((sigma, report))
}

/// PCA factor model of the correlation matrix of `data` (dense route).
pub fn pca_init(data: &DataMatrix, rank: usize) -> Result<FactorModel> {
    pca_init_from_covariance(&data.sample_covariance(), rank)
}

pub fn pca_init_with_mode(data: &DataMatrix, rank: usize, mode: Mode) -> Result<FactorModel> {
    match mode.resolve(data.dim(), data.len()) {
        Mode::Tall => pca_init_tall(data, rank),
        _ => pca_init(data, rank),
    }
}

/// PCA factor model from a covariance matrix `S`.
///
/// `R = diag(s)⁻¹ S diag(s)⁻¹`, `F̂ = Q_r Λ_r^{1/2}`,
/// `D̂ = diag(R − F̂F̂ᵀ)`, then `F₀ = diag(s)F̂`, `D₀ = diag(s)² D̂`.
pub fn pca_init_from_covariance(covariance: &DMatrix<f64>, rank: usize) -> Result<FactorModel> {
    let n = covariance.nrows();
    if !covariance.is_square() {
        return Err(Error::InvalidInput("covariance must be square".into()));
    }
    if rank == 0 || rank > n {
        return Err(Error::InvalidInput(format!(
            "rank must satisfy 1 <= r <= n = {n}, got {rank}"
        )));
    }
    let scales = std_devs(covariance.diagonal().iter().copied())?;
    let mut corr = covariance.clone();
    for i in 0..n {
        for j in 0..n {
            corr[(i, j)] /= scales[i] * scales[j];
        }
    }
    symmetrize(&mut corr);
    let corr_diag = corr.diagonal();
    let eig = SymmetricEigen::new(corr);
    let (values, vectors) = order_eigenpairs(eig.eigenvalues.as_slice(), &eig.eigenvectors);
    assemble_pca(&values, &vectors, &corr_diag, &scales, rank)
}

/// Same result as [`pca_init`] from a reduced SVD of the centered,
/// variable-scaled data at `O(nm²)`, never forming an `n × n` matrix.
pub fn pca_init_tall(data: &DataMatrix, rank: usize) -> Result<FactorModel> {
    let n = data.dim();
    let m = data.len() as f64;
    if rank == 0 || rank > n {
        return Err(Error::InvalidInput(format!(
            "rank must satisfy 1 <= r <= n = {n}, got {rank}"
        )));
    }
    let mut z = data.centered();
    let scales = std_devs(z.row_iter().map(|row| row.norm_squared() / m))?;
    for (mut row, &s) in z.row_iter_mut().zip(scales.iter()) {
        row /= s * m.sqrt();
    }
    let corr_diag = DVector::from_iterator(n, z.row_iter().map(|row| row.norm_squared()));
    let svd = z.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return left singular vectors".into()))?;
    let values: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let (values, vectors) = order_eigenpairs(&values, &u);
    if values.len() < rank {
        // Fewer singular vectors than requested: pad with zero-variance directions.
        let mut padded = DMatrix::zeros(n, rank);
        padded.columns_mut(0, vectors.ncols()).copy_from(&vectors);
        let mut vals = values.clone();
        vals.resize(rank, 0.0);
        return assemble_pca(&vals, &padded, &corr_diag, &scales, rank);
    }
    assemble_pca(&values, &vectors, &corr_diag, &scales, rank)
}

fn std_devs(variances: impl Iterator<Item = f64>) -> Result<DVector<f64>> {
    let vars: Vec<f64> = variances.collect();
    if let Some(coordinate) = vars.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroVariance { coordinate });
    }
    Ok(DVector::from_iterator(
        vars.len(),
        vars.into_iter().map(f64::sqrt),
    ))
}

fn assemble_pca(
    values: &[f64],
    vectors: &DMatrix<f64>,
    corr_diag: &DVector<f64>,
    scales: &DVector<f64>,
    rank: usize,
) -> Result<FactorModel> {
    let n = vectors.nrows();
    let mut loadings = DMatrix::zeros(n, rank);
    for k in 0..rank {
        let root = values[k].max(0.0).sqrt();
        loadings.set_column(k, &(vectors.column(k) * root));
    }
    let mut diag = DVector::from_iterator(
        n,
        (0..n).map(|j| corr_diag[j] - loadings.row(j).norm_squared()),
    );
    floor_diagonal(&mut diag, 1.0);
    for (mut row, &s) in loadings.row_iter_mut().zip(scales.iter()) {
        row *= s;
    }
    for (d, &s) in diag.iter_mut().zip(scales.iter()) {
        *d *= s * s;
    }
    FactorModel::new(loadings, diag)
}

/// Sorts eigenpairs by descending eigenvalue. Ties go to the vector whose
/// first nonzero entry has the smaller index; each vector is signed so its
/// largest-magnitude entry is positive.
pub fn order_eigenpairs(values: &[f64], vectors: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    const ZERO: f64 = 1e-12;
    let count = values.len().min(vectors.ncols());
    let first_nonzero = |k: usize| {
        vectors
            .column(k)
            .iter()
            .position(|v| v.abs() > ZERO)
            .unwrap_or(usize::MAX)
    };
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    // Regroup runs of numerically equal eigenvalues by the index rule.
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && (values[order[start]] - values[order[end]]).abs() <= ZERO * scale
        {
            end += 1;
        }
        order[start..end].sort_by_key(|&k| (first_nonzero(k), k));
        start = end;
    }
    let mut sorted = DMatrix::zeros(vectors.nrows(), count);
    let mut sorted_values = Vec::with_capacity(count);
    for (dst, &k) in order.iter().enumerate() {
        let col = vectors.column(k);
        let mut best = 0;
        for i in 0..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        let sign = if col[best] < 0.0 { -1.0 } else { 1.0 };
        sorted.set_column(dst, &(col * sign));
        sorted_values.push(values[k]);
    }
    (sorted_values, sorted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn unit_columns(m: DMatrix<f64>) -> DataMatrix {
        DataMatrix::from_columns(m).unwrap().normalize().0
    }

    #[test]
    fn terminate_examples() {
        assert!(terminate(&[10.0, 10.0], 1e-6));
        assert!(!terminate(&[10.0, 9.0], 1e-6));
        assert!(!terminate(&[1e-13, 5e-14], 1e-6));
        assert!(!terminate(&[1.0], 1e-6));
    }

    #[test]
    fn e_step_identity_weights() {
        let x = unit_columns(dmatrix![1.0, 0.3, -2.0; 0.0, 1.0, 1.0; 2.0, 0.5, 0.1]);
        let model = FactorModel::identity(3, 1).unwrap();
        let scatter = e_step(&model, &x, Mode::Dense).unwrap();
        for &w in scatter.weights().unwrap().iter() {
            assert_relative_eq!(w, 3.0, epsilon = 1e-14);
        }
        let expected = x.samples() * x.samples().transpose() * (3.0 / 3.0);
        assert_relative_eq!(scatter.to_dense(), expected, epsilon = 1e-14);
        assert_relative_eq!(scatter.trace(), 3.0, epsilon = 1e-13);
    }

    #[test]
    fn e_step_single_sample() {
        let x = unit_columns(dmatrix![0.6; 0.0; 0.8]);
        let model = FactorModel::identity(3, 2).unwrap();
        let scatter = e_step(&model, &x, Mode::Tall).unwrap();
        let col = x.samples().column(0);
        assert_relative_eq!(
            scatter.to_dense(),
            col * col.transpose() * 3.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(scatter.trace(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn e_step_rejects_raw_data() {
        let x = DataMatrix::from_columns(dmatrix![2.0; 0.0]).unwrap();
        let model = FactorModel::identity(2, 1).unwrap();
        assert!(e_step(&model, &x, Mode::Dense).is_err());
    }

    #[test]
    fn m_step_diagonal_fixed_point() {
        let s = DMatrix::from_diagonal(&dvector![2.0, 0.5, 3.0]);
        let init = FactorModel::identity(3, 1).unwrap();
        let out = m_step(&WeightedScatter::dense(s), &init, &EstimatorConfig::new(1)).unwrap();
        assert_eq!(out.loadings(), &DMatrix::zeros(3, 1));
        assert_relative_eq!(out.diag(), &dvector![2.0, 0.5, 3.0], epsilon = 1e-15);
    }

    #[test]
    fn m_step_stationary_at_truth() {
        let truth = FactorModel::new(
            dmatrix![1.0, 0.2; -0.5, 0.8; 0.3, -0.4; 1.2, 0.1; 0.0, 0.6],
            dvector![0.4, 0.9, 1.3, 0.2, 0.7],
        )
        .unwrap();
        let scatter = WeightedScatter::dense(truth.covariance());
        let out = m_step(&scatter, &truth, &EstimatorConfig::new(2)).unwrap();
        assert_relative_eq!(out.covariance(), truth.covariance(), epsilon = 1e-10);
        assert_relative_eq!(out.diag(), truth.diag(), epsilon = 1e-10);
    }

    #[test]
    fn pca_init_two_by_two() {
        let s = dmatrix![2.0, 1.0; 1.0, 2.0];
        let model = pca_init_from_covariance(&s, 1).unwrap();
        let f_hat = (1.5f64).sqrt() / 2f64.sqrt();
        let s_dev = 2f64.sqrt();
        assert_relative_eq!(model.loadings()[(0, 0)], s_dev * f_hat, epsilon = 1e-14);
        assert_relative_eq!(model.loadings()[(1, 0)], s_dev * f_hat, epsilon = 1e-14);
        assert_relative_eq!(model.diag()[0], 2.0 * 0.25, epsilon = 1e-14);
        assert_relative_eq!(model.diag()[1], 2.0 * 0.25, epsilon = 1e-14);
    }

    #[test]
    fn pca_init_diagonal_uses_canonical_basis() {
        let s = DMatrix::from_diagonal(&dvector![4.0, 9.0, 1.0]);
        let model = pca_init_from_covariance(&s, 2).unwrap();
        assert_eq!(model.loadings(), &dmatrix![2.0, 0.0; 0.0, 3.0; 0.0, 0.0]);
        let floor = DIAG_FLOOR_TEST / 3.0;
        assert_relative_eq!(model.diag()[0], 4.0 * floor, epsilon = 1e-22);
        assert_relative_eq!(model.diag()[1], 9.0 * floor, epsilon = 1e-22);
        assert_eq!(model.diag()[2], 1.0);

        let s2 = DMatrix::from_diagonal(&dvector![4.0, 1.0]);
        let m2 = pca_init_from_covariance(&s2, 1).unwrap();
        assert_eq!(m2.loadings(), &dmatrix![2.0; 0.0]);
    }

    const DIAG_FLOOR_TEST: f64 = crate::factor_model::DIAG_FLOOR;

    #[test]
    fn pca_init_scale_equivariance() {
        let s = dmatrix![2.0, 0.3, 0.1; 0.3, 1.0, -0.2; 0.1, -0.2, 0.5];
        let a = pca_init_from_covariance(&s, 1).unwrap();
        let c = 3.0;
        let b = pca_init_from_covariance(&(&s * (c * c)), 1).unwrap();
        assert_relative_eq!(b.loadings(), &(a.loadings() * c), epsilon = 1e-10);
        assert_relative_eq!(b.diag(), &(a.diag() * (c * c)), epsilon = 1e-10);
    }

    #[test]
    fn pca_init_zero_variance_names_coordinate() {
        let s = DMatrix::from_diagonal(&dvector![1.0, 0.0, 2.0]);
        let err = pca_init_from_covariance(&s, 1).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { coordinate: 1 }));
    }

    #[test]
    fn tyler_basis_vectors_fixed_point() {
        let x = DataMatrix::from_columns(DMatrix::identity(2, 2)).unwrap();
        let step = tyler_step(&DMatrix::identity(2, 2), &x).unwrap();
        assert_eq!(step, DMatrix::identity(2, 2));
        let (sigma, report) = tyler_fixed_point(&x, &EstimatorConfig::new(1)).unwrap();
        assert_eq!(sigma, DMatrix::identity(2, 2));
        assert_eq!(report.termination, Termination::ToleranceMet);
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn gfa_identity_fixed_point() {
        let eye = WeightedScatter::dense(DMatrix::identity(4, 4));
        let init = FactorModel::identity(4, 1).unwrap();
        let out = rubin_thayer(&eye, &init, 10, 1e-8, false).unwrap();
        assert_eq!(out.model, init);

        let (model, _) =
            gfa_fit_covariance(&DMatrix::identity(4, 4), &EstimatorConfig::new(1)).unwrap();
        assert_relative_eq!(model.covariance(), DMatrix::identity(4, 4), epsilon = 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::new(0).validate(3).is_err());
        assert!(EstimatorConfig::new(4).validate(3).is_err());
        let mut cfg = EstimatorConfig::new(1);
        cfg.tol = 0.0;
        assert!(cfg.validate(3).is_err());
        let mut cfg = EstimatorConfig::new(1);
        cfg.max_inner_iters = 0;
        assert!(cfg.validate(3).is_err());
    }

    #[test]
    fn auto_mode_threshold() {
        assert_eq!(Mode::Auto.resolve(200, 50), Mode::Dense);
        assert_eq!(Mode::Auto.resolve(201, 50), Mode::Tall);
        assert_eq!(Mode::Dense.resolve(1000, 2), Mode::Dense);
    }

    #[test]
    fn eigenpair_ties_and_signs() {
        let vectors = dmatrix![0.0, -1.0, 0.0; 0.0, 0.0, 1.0; -1.0, 0.0, 0.0];
        let (vals, vecs) = order_eigenpairs(&[1.0, 1.0, 2.0], &vectors);
        assert_eq!(vals, vec![2.0, 1.0, 1.0]);
        assert_eq!(vecs, dmatrix![0.0, 1.0, 0.0; 1.0, 0.0, 0.0; 0.0, 0.0, 1.0]);
    }
}
