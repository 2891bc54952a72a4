//! Seeded synthetic data and the Monte-Carlo benchmark harness.
//!
//! All randomness is derived from a scenario seed. Replicate `i` draws from
//! its own ChaCha stream, so replicates can run in any order or in parallel
//! and still produce identical per-replicate data.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimators::{gfa_fit, pca_init, trex_fit, tyler_fixed_point, EstimatorConfig};
use crate::factor_model::{DataMatrix, FactorModel};

/// Random generator for replicate `index` of a run seeded with `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Random ground truth `FFᵀ + diag(d)` with `Fᵢⱼ ~ N(0, 1/r)` and
/// `dᵢ ~ U[0.5, 1.5]`.
pub fn planted_model(n: usize, r: usize, seed: u64) -> Result<FactorModel> {
    if r > n || n == 0 {
        return Err(Error::InvalidInput(format!(
            "planted model needs r <= n and n >= 1, got n={n}, r={r}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (r.max(1) as f64).sqrt();
    let loadings = DMatrix::from_fn(n, r, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * scale
    });
    let uniform = Uniform::new_inclusive(0.5, 1.5).expect("valid range");
    let diag = DVector::from_fn(n, |_, _| uniform.sample(&mut rng));
    FactorModel::new(loadings, diag)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScenarioKind {
    Gaussian,
    /// Multivariate t with `nu` degrees of freedom and covariance `Σ_true`.
    StudentT {
        nu: f64,
    },
    /// Gaussian data where a fraction of samples is drawn from `N(μ, Σ_true)`.
    Contaminated {
        outlier_fraction: f64,
    },
}

impl ScenarioKind {
    pub fn student_t() -> Self {
        ScenarioKind::StudentT { nu: 3.0 }
    }

    pub fn contaminated() -> Self {
        ScenarioKind::Contaminated {
            outlier_fraction: 0.02,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Gaussian => "gaussian",
            ScenarioKind::StudentT { .. } => "student-t",
            ScenarioKind::Contaminated { .. } => "contaminated",
        }
    }
}

/// Ground-truth covariance of a scenario.
#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Factor(FactorModel),
    Dense(DMatrix<f64>),
}

impl Truth {
    pub fn dim(&self) -> usize {
        match self {
            Truth::Factor(f) => f.dim(),
            Truth::Dense(s) => s.nrows(),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            Truth::Factor(f) => f.covariance(),
            Truth::Dense(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub truth: Truth,
    pub samples: usize,
    /// Rank handed to the factor-model estimators.
    pub rank: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn new(
        kind: ScenarioKind,
        truth: Truth,
        samples: usize,
        rank: usize,
        replicates: usize,
        seed: u64,
    ) -> Result<Self> {
        let scn = Self {
            kind,
            truth,
            samples,
            rank,
            replicates,
            seed,
        };
        scn.validate()?;
        Ok(scn)
    }

    pub fn dim(&self) -> usize {
        self.truth.dim()
    }

    pub fn label(&self) -> String {
        format!(
            "{}_n{}_m{}_r{}",
            self.kind.name(),
            self.dim(),
            self.samples,
            self.rank
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidInput("scenario needs m >= 1".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidInput(
                "replicate count must be at least 1".into(),
            ));
        }
        if self.rank == 0 || self.rank > self.dim() {
            return Err(Error::InvalidInput(format!(
                "rank must satisfy 1 <= r <= n = {}, got {}",
                self.dim(),
                self.rank
            )));
        }
        if let Truth::Dense(s) = &self.truth {
            if !s.is_square() || nalgebra::Cholesky::new(s.clone()).is_none() {
                return Err(Error::InvalidInput(
                    "dense ground truth must be symmetric positive definite".into(),
                ));
            }
        }
        match self.kind {
            ScenarioKind::Gaussian => {}
            ScenarioKind::StudentT { nu } => {
                if !(nu > 2.0) {
                    return Err(Error::InvalidInput(format!(
                        "degrees of freedom must exceed 2 for a finite covariance, got {nu}"
                    )));
                }
            }
            ScenarioKind::Contaminated { outlier_fraction } => {
                if !(0.0..1.0).contains(&outlier_fraction) {
                    return Err(Error::InvalidInput(format!(
                        "outlier fraction must lie in [0, 1), got {outlier_fraction}"
                    )));
                }
                if outlier_count(outlier_fraction, self.samples) == 0 {
                    return Err(Error::InvalidInput(
                        "contaminated scenario must contain at least one outlier".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn outlier_count(fraction: f64, m: usize) -> usize {
    ((fraction * m as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Symmetric square root `VΛ^{1/2}Vᵀ` of an SPD matrix.
pub fn symmetric_sqrt(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(sigma.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// One data set from a scenario, with the outlier indicator per sample.
#[derive(Debug, Clone)]
pub struct Draw {
    pub data: DataMatrix,
    pub outliers: Vec<bool>,
}

fn gaussian_columns<R: Rng>(sqrt: &DMatrix<f64>, m: usize, rng: &mut R) -> DMatrix<f64> {
    let n = sqrt.nrows();
    let raw = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    sqrt * raw
}

/// Draws `scn.samples` observations using `rng`.
pub fn sample_with<R: Rng>(scn: &Scenario, rng: &mut R) -> Result<Draw> {
    scn.validate()?;
    let sigma = scn.truth.covariance();
    let sqrt = symmetric_sqrt(&sigma);
    let n = scn.dim();
    let m = scn.samples;
    let mut outliers = vec![false; m];
    let samples = match scn.kind {
        ScenarioKind::Gaussian => gaussian_columns(&sqrt, m, rng),
        ScenarioKind::StudentT { nu } => {
            let mut g = gaussian_columns(&sqrt, m, rng);
            g *= ((nu - 2.0) / nu).sqrt();
            let chi = ChiSquared::new(nu).map_err(|e| Error::InvalidInput(e.to_string()))?;
            for mut col in g.column_iter_mut() {
                let w: f64 = chi.sample(rng);
                col /= (w / nu).sqrt();
            }
            g
        }
        ScenarioKind::Contaminated { outlier_fraction } => {
            let k = outlier_count(outlier_fraction, m);
            let magnitude = 3.0 / (n as f64).sqrt() * sigma.trace().sqrt();
            let mean = DVector::from_fn(n, |_, _| {
                if rng.random::<bool>() {
                    magnitude
                } else {
                    -magnitude
                }
            });
            let mut g = gaussian_columns(&sqrt, m, rng);
            for (i, mut col) in g.column_iter_mut().enumerate().skip(m - k) {
                col += &mean;
                outliers[i] = true;
            }
            g
        }
    };
    Ok(Draw {
        data: DataMatrix::from_columns(samples)?,
        outliers,
    })
}

/// Data for replicate `index` of the scenario.
pub fn sample_replicate(scn: &Scenario, index: usize) -> Result<Draw> {
    sample_with(scn, &mut replicate_rng(scn.seed, index as u64))
}

/// Replicate 0 of the scenario.
pub fn sample(scn: &Scenario) -> Result<DataMatrix> {
    Ok(sample_replicate(scn, 0)?.data)
}

/// `diag(s)⁻¹ Σ diag(s)⁻¹` with `s = diag(Σ)^{1/2}`.
pub fn correlation(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !sigma.is_square() {
        return Err(Error::InvalidInput(
            "correlation needs a square matrix".into(),
        ));
    }
    let diag = sigma.diagonal();
    if let Some(i) = diag.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "diagonal entry {i} is not positive ({})",
            diag[i]
        )));
    }
    let s = diag.map(f64::sqrt);
    Ok(DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |i, j| {
        sigma[(i, j)] / (s[i] * s[j])
    }))
}

/// `‖corr(Σ̂) − corr(Σ)‖_F / ‖corr(Σ)‖_F`.
pub fn correlation_mse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", truth.shape()),
            found: format!("{:?}", estimate.shape()),
        });
    }
    let est = correlation(estimate)?;
    let tru = correlation(truth)?;
    Ok((&est - &tru).norm() / tru.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Trex,
    Gfa,
    Tyler,
    /// The PCA initializer on raw data, without iterations.
    PcaInit,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Trex => "trex",
            EstimatorKind::Gfa => "gfa",
            EstimatorKind::Tyler => "tyler",
            EstimatorKind::PcaInit => "pca",
        }
    }

    /// Fits the estimator and returns the dense covariance or scatter estimate.
    pub fn fit_dense(&self, data: &DataMatrix, cfg: &EstimatorConfig) -> Result<DMatrix<f64>> {
        Ok(match self {
            EstimatorKind::Trex => trex_fit(data, cfg)?.0.covariance(),
            EstimatorKind::Gfa => gfa_fit(data, cfg)?.0.covariance(),
            EstimatorKind::Tyler => tyler_fixed_point(data, cfg)?.0,
            EstimatorKind::PcaInit => pca_init(data, cfg.rank)?.covariance(),
        })
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "trex" => Ok(EstimatorKind::Trex),
            "gfa" => Ok(EstimatorKind::Gfa),
            "tyler" => Ok(EstimatorKind::Tyler),
            "pca" | "pca-init" | "pca_init" => Ok(EstimatorKind::PcaInit),
            other => Err(Error::InvalidInput(format!("unknown estimator '{other}'"))),
        }
    }
}

/// Aggregated Monte-Carlo statistics for one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub replicates: usize,
    pub mean_seconds: f64,
    pub failures: usize,
    /// Per-replicate error, `None` where the fit failed.
    pub per_replicate: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub scenario: String,
    pub rows: Vec<EstimatorSummary>,
}

impl BenchResult {
    pub fn get(&self, estimator: EstimatorKind) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }
}

pub const BENCH_CSV_HEADER: &str = "scenario,estimator,mean_mse,std_mse,mean_seconds,failures";

/// Writes result rows as CSV. Without timings the seconds column is zero,
/// which keeps the output reproducible byte for byte.
pub fn write_bench_csv<W: Write>(
    out: &mut W,
    results: &[BenchResult],
    timings: bool,
) -> std::io::Result<()> {
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for result in results {
        for row in &result.rows {
            let seconds = if timings { row.mean_seconds } else { 0.0 };
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},{:.16e},{}",
                result.scenario,
                row.estimator.name(),
                row.mean_mse,
                row.std_mse,
                seconds,
                row.failures
            )?;
        }
    }
    Ok(())
}

/// Fits every estimator on every replicate of the scenario.
///
/// `cfg` supplies iteration settings; its rank is replaced by the scenario
/// rank. Fit failures are counted per estimator and do not abort the run.
pub fn run_benchmark(
    scn: &Scenario,
    estimators: &[EstimatorKind],
    cfg: &EstimatorConfig,
) -> Result<BenchResult> {
    scn.validate()?;
    if estimators.is_empty() {
        return Err(Error::InvalidInput("no estimators requested".into()));
    }
    let mut cfg = cfg.clone();
    cfg.rank = scn.rank;
    let truth = scn.truth.covariance();

    let per_replicate: Vec<Vec<(Option<f64>, f64)>> = (0..scn.replicates)
        .into_par_iter()
        .map(|index| {
            let draw = sample_replicate(scn, index);
            estimators
                .iter()
                .map(|est| {
                    let data = match &draw {
                        Ok(d) => &d.data,
                        Err(_) => return (None, 0.0),
                    };
                    let start = Instant::now();
                    let fit = est.fit_dense(data, &cfg);
                    let seconds = start.elapsed().as_secs_f64();
                    let mse = fit.and_then(|s| correlation_mse(&s, &truth)).ok();
                    (mse.filter(|v| v.is_finite()), seconds)
                })
                .collect()
        })
        .collect();

    let rows = estimators
        .iter()
        .enumerate()
        .map(|(k, &estimator)| {
            let column: Vec<Option<f64>> = per_replicate.iter().map(|rep| rep[k].0).collect();
            let ok: Vec<f64> = column.iter().flatten().copied().collect();
            let mean = if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().sum::<f64>() / ok.len() as f64
            };
            let std = if ok.len() < 2 {
                0.0
            } else {
                (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
            };
            let mean_seconds =
                per_replicate.iter().map(|rep| rep[k].1).sum::<f64>() / scn.replicates as f64;
            EstimatorSummary {
                estimator,
                mean_mse: mean,
                std_mse: std,
                replicates: scn.replicates,
                mean_seconds,
                failures: column.len() - ok.len(),
                per_replicate: column,
            }
        })
        .collect();

    Ok(BenchResult {
        scenario: scn.label(),
        rows,
    })
}

/// Planted linear subspace with isotropic outliers.
#[derive(Debug, Clone)]
pub struct PlantedSubspace {
    /// Orthonormal `n × r` basis of the true subspace.
    pub basis: DMatrix<f64>,
    pub train: DataMatrix,
    pub outliers: Vec<bool>,
    /// Inlier-only samples, not used for fitting.
    pub test: DataMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceScenario {
    pub dim: usize,
    pub rank: usize,
    pub train: usize,
    pub test: usize,
    pub outlier_fraction: f64,
    /// Standard deviation of the isotropic noise added to inliers.
    pub noise: f64,
    /// Standard deviation of each outlier coordinate.
    pub outlier_scale: f64,
    pub seed: u64,
}

impl SubspaceScenario {
    /// `n = 100`, `r = 9`, 500 training samples with 30% outliers.
    pub fn standard(seed: u64) -> Self {
        Self {
            dim: 100,
            rank: 9,
            train: 500,
            test: 32,
            outlier_fraction: 0.3,
            noise: 0.05,
            outlier_scale: 1.0,
            seed,
        }
    }
}

/// Inliers `Uz + ε` with `z ~ N(0, I_r)`, `ε ~ N(0, noise² I)`; outliers
/// `N(0, outlier_scale² I_n)`. Outliers occupy the last training columns.
pub fn planted_subspace(scn: &SubspaceScenario) -> Result<PlantedSubspace> {
    let (n, r) = (scn.dim, scn.rank);
    if r == 0 || r > n || scn.train == 0 || scn.test == 0 {
        return Err(Error::InvalidInput(format!(
            "invalid planted subspace n={n}, r={r}, train={}, test={}",
            scn.train, scn.test
        )));
    }
    if !(0.0..1.0).contains(&scn.outlier_fraction) {
        return Err(Error::InvalidInput(
            "outlier fraction must lie in [0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
    let raw = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let basis = raw.qr().q();

    let inliers = |count: usize, rng: &mut ChaCha8Rng| {
        let z = DMatrix::from_fn(r, count, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DMatrix::from_fn(n, count, |_, _| rng.sample::<f64, _>(StandardNormal));
        &basis * z + noise * scn.noise
    };
    let k = outlier_count(scn.outlier_fraction, scn.train);
    let mut train = inliers(scn.train, &mut rng);
    let mut outliers = vec![false; scn.train];
    for (i, mut col) in train.column_iter_mut().enumerate().skip(scn.train - k) {
        for v in col.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * scn.outlier_scale;
        }
        outliers[i] = true;
    }
    let test = inliers(scn.test, &mut rng);
    Ok(PlantedSubspace {
        basis,
        train: DataMatrix::from_columns(train)?,
        outliers,
        test: DataMatrix::from_columns(test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn planted_model_is_deterministic() {
        let a = planted_model(20, 3, 7).unwrap();
        let b = planted_model(20, 3, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, planted_model(20, 3, 8).unwrap());
    }

    #[test]
    fn planted_model_structure() {
        let model = planted_model(50, 5, 1).unwrap();
        let dmin = model.diag().min();
        assert!(dmin >= 0.5 && model.diag().max() <= 1.5);
        let eig = SymmetricEigen::new(model.covariance());
        assert!(eig.eigenvalues.min() >= dmin - 1e-10);

        let ff = model.loadings() * model.loadings().transpose();
        let mut vals: Vec<f64> = SymmetricEigen::new(ff)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        assert!(vals[4] > 1.0);
        assert!(vals[5].abs() < 1e-10);
    }

    #[test]
    fn correlation_mse_examples() {
        let truth = dmatrix![2.0, 0.4; 0.4, 1.0];
        assert_eq!(correlation_mse(&truth, &truth).unwrap(), 0.0);
        assert_relative_eq!(
            correlation_mse(&(&truth * 5.5), &truth).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        let rho = 0.3;
        let est = dmatrix![1.0, rho; rho, 1.0];
        let v = correlation_mse(&est, &DMatrix::identity(2, 2)).unwrap();
        assert_relative_eq!(v, rho, epsilon = 1e-15);
        assert!(correlation_mse(&dmatrix![0.0, 0.0; 0.0, 1.0], &truth).is_err());
    }

    #[test]
    fn contaminated_outlier_count_and_mean() {
        let truth = planted_model(10, 2, 3).unwrap();
        let tr = truth.covariance().trace();
        let scn = Scenario::new(
            ScenarioKind::contaminated(),
            Truth::Factor(truth),
            100,
            2,
            1,
            11,
        )
        .unwrap();
        let draw = sample_replicate(&scn, 0).unwrap();
        assert_eq!(draw.outliers.iter().filter(|&&o| o).count(), 2);
        let magnitude = 3.0 / 10f64.sqrt() * tr.sqrt();
        let mu_norm = (magnitude * magnitude * 10.0).sqrt();
        assert_relative_eq!(mu_norm, 3.0 * tr.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn scenario_validation() {
        let truth = Truth::Factor(planted_model(5, 1, 0).unwrap());
        let t = |kind, m, reps| Scenario::new(kind, truth.clone(), m, 1, reps, 0);
        assert!(t(ScenarioKind::StudentT { nu: 2.0 }, 10, 1).is_err());
        assert!(t(
            ScenarioKind::Contaminated {
                outlier_fraction: 0.0
            },
            10,
            1
        )
        .is_err());
        assert!(t(
            ScenarioKind::Contaminated {
                outlier_fraction: 1.0
            },
            10,
            1
        )
        .is_err());
        assert!(t(ScenarioKind::Gaussian, 10, 0).is_err());
        assert!(t(ScenarioKind::Gaussian, 10, 1).is_ok());
    }

    #[test]
    fn replicate_streams_differ() {
        let truth = Truth::Factor(planted_model(5, 1, 0).unwrap());
        let scn = Scenario::new(ScenarioKind::Gaussian, truth, 20, 1, 2, 9).unwrap();
        let a = sample_replicate(&scn, 0).unwrap().data;
        let b = sample_replicate(&scn, 1).unwrap().data;
        assert_ne!(a, b);
        assert_eq!(a, sample_replicate(&scn, 0).unwrap().data);
    }

    #[test]
    fn planted_subspace_shapes() {
        let p = planted_subspace(&SubspaceScenario::standard(1)).unwrap();
        assert_eq!(p.train.len(), 500);
        assert_eq!(p.outliers.iter().filter(|&&o| o).count(), 150);
        let gram = p.basis.transpose() * &p.basis;
        assert_relative_eq!(gram, DMatrix::identity(9, 9), epsilon = 1e-12);
    }
}
