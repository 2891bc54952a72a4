//! Low-rank plus diagonal scatter matrices `Σ = FFᵀ + diag(d)`.
//!
//! Every inverse application goes through the rank-`r` inversion identity
//!
//! ```text
//! Σ⁻¹ = D⁻¹ − D⁻¹F (I + FᵀD⁻¹F)⁻¹ FᵀD⁻¹
//! ```
//!
//! so applying `Σ⁻¹` to `m` vectors costs `O(nmr + r³)` and no `n × n`
//! matrix is ever formed. The log-determinant uses the matching identity
//! `log det Σ = log det D + log det(I + FᵀD⁻¹F)`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Relative positivity floor for the idiosyncratic variances.
pub const DIAG_FLOOR: f64 = 1e-8;

/// Tolerance on `‖x‖₂ = 1` for density evaluations.
const UNIT_NORM_TOL: f64 = 1e-9;

/// Storage orientation of a raw matrix handed to [`DataMatrix::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Each column is one sample (`n × m`).
    SamplesAsColumns,
    /// Each row is one sample (`m × n`), as read from CSV.
    SamplesAsRows,
}

/// `m` samples of dimension `n`, stored as the columns of an `n × m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    samples: DMatrix<f64>,
    normalized: bool,
}

impl DataMatrix {
    pub fn new(matrix: DMatrix<f64>, layout: Layout) -> Result<Self> {
        let samples = match layout {
            Layout::SamplesAsColumns => matrix,
            Layout::SamplesAsRows => matrix.transpose(),
        };
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "data matrix must have at least one sample and one coordinate, got {} x {}",
                samples.nrows(),
                samples.ncols()
            )));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry in sample {} coordinate {}",
                pos / samples.nrows(),
                pos % samples.nrows()
            )));
        }
        for (index, col) in samples.column_iter().enumerate() {
            if col.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroSample { index });
            }
        }
        let normalized = samples
            .column_iter()
            .all(|c| (c.norm() - 1.0).abs() <= 1e-12);
        Ok(Self {
            samples,
            normalized,
        })
    }

    pub fn from_columns(matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(matrix, Layout::SamplesAsColumns)
    }

    pub fn from_rows(matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(matrix, Layout::SamplesAsRows)
    }

    /// Ambient dimension `n`.
    pub fn dim(&self) -> usize {
        self.samples.nrows()
    }

    /// Number of samples `m`.
    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// The `n × m` sample matrix.
    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> DMatrix<f64> {
        self.samples
    }

    /// Euclidean norm of every sample.
    pub fn norms(&self) -> Vec<f64> {
        self.samples.column_iter().map(|c| c.norm()).collect()
    }

    /// Projects every sample onto the unit sphere, returning the original norms.
    pub fn normalize(&self) -> (DataMatrix, Vec<f64>) {
        let norms = self.norms();
        let mut samples = self.samples.clone();
        for (mut col, &norm) in samples.column_iter_mut().zip(&norms) {
            col /= norm;
        }
        (
            DataMatrix {
                samples,
                normalized: true,
            },
            norms,
        )
    }

    /// Returns `self` if already on the sphere, otherwise a normalized copy.
    pub fn to_normalized(&self) -> DataMatrix {
        if self.normalized {
            self.clone()
        } else {
            self.normalize().0
        }
    }

    /// Multiplies sample `i` by `scales[i]`.
    pub fn rescaled(&self, scales: &[f64]) -> Result<DataMatrix> {
        if scales.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} scale factors", self.len()),
                found: format!("{}", scales.len()),
            });
        }
        let mut samples = self.samples.clone();
        for (mut col, &c) in samples.column_iter_mut().zip(scales) {
            col *= c;
        }
        DataMatrix::from_columns(samples)
    }

    /// Uncentered second moment `XXᵀ / m`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let m = self.len() as f64;
        let mut s = &self.samples * self.samples.transpose();
        s /= m;
        s
    }

    /// Mean-centered sample covariance with `1/m` normalization.
    pub fn sample_covariance(&self) -> DMatrix<f64> {
        let centered = self.centered();
        let mut s = &centered * centered.transpose();
        s /= self.len() as f64;
        s
    }

    /// Coordinate-wise mean of the samples.
    pub fn mean(&self) -> DVector<f64> {
        self.samples.column_mean()
    }

    /// Samples with the coordinate-wise mean subtracted.
    pub fn centered(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut centered = self.samples.clone();
        for mut col in centered.column_iter_mut() {
            col -= &mean;
        }
        centered
    }
}

/// Statistical factor model `Σ = FFᵀ + diag(d)` with `F ∈ ℝⁿˣʳ`, `d > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    loadings: DMatrix<f64>,
    diag: DVector<f64>,
}

/// Cached pieces of the inversion identity: `G = D⁻¹F` and the Cholesky
/// factor of the capacitance matrix `I + FᵀD⁻¹F`.
pub(crate) struct Capacitance {
    pub scaled_loadings: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
}

impl FactorModel {
    pub fn new(loadings: DMatrix<f64>, diag: DVector<f64>) -> Result<Self> {
        let n = loadings.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("factor model needs n >= 1".into()));
        }
        if diag.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("diagonal of length {n}"),
                found: format!("length {}", diag.len()),
            });
        }
        if loadings.ncols() > n {
            return Err(Error::InvalidInput(format!(
                "rank {} exceeds dimension {n}",
                loadings.ncols()
            )));
        }
        if let Some(i) = diag.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "diagonal entry {i} must be positive and finite, got {}",
                diag[i]
            )));
        }
        if loadings.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "loadings contain non-finite entries".into(),
            ));
        }
        Ok(Self { loadings, diag })
    }

    /// Identity scatter with `r` zero loading columns.
    pub fn identity(n: usize, r: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(n, r), DVector::from_element(n, 1.0))
    }

    pub fn dim(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn rank(&self) -> usize {
        self.loadings.ncols()
    }

    /// Factor loadings `F` (`n × r`).
    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    /// Idiosyncratic variances `d`.
    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    /// Dense `FFᵀ + diag(d)`. Only for reporting and small problems.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut sigma = &self.loadings * self.loadings.transpose();
        for (i, &d) in self.diag.iter().enumerate() {
            sigma[(i, i)] += d;
        }
        sigma
    }

    /// The model for `c·Σ`.
    pub fn scaled(&self, c: f64) -> Result<FactorModel> {
        FactorModel::new(&self.loadings * c.sqrt(), &self.diag * c)
    }

    fn describe(&self) -> String {
        let dmin = self.diag.min();
        let dmax = self.diag.max();
        format!(
            "factor model n={}, r={}, min d={dmin:e}, max d={dmax:e}, ‖F‖_F={:e}",
            self.dim(),
            self.rank(),
            self.loadings.norm()
        )
    }

    pub(crate) fn capacitance(&self) -> Result<Capacitance> {
        let r = self.rank();
        let mut scaled_loadings = self.loadings.clone();
        for (mut row, &d) in scaled_loadings.row_iter_mut().zip(self.diag.iter()) {
            row /= d;
        }
        let mut cap = self.loadings.transpose() * &scaled_loadings;
        for k in 0..r {
            cap[(k, k)] += 1.0;
        }
        let chol = Cholesky::new(cap).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("capacitance matrix of {}", self.describe()))
        })?;
        Ok(Capacitance {
            scaled_loadings,
            chol,
        })
    }

    /// `Σ⁻¹ · rhs` for an `n × k` right-hand side.
    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} rows", self.dim()),
                found: format!("{} rows", rhs.nrows()),
            });
        }
        let cap = self.capacitance()?;
        Ok(self.solve_with(&cap, rhs))
    }

    pub(crate) fn solve_with(&self, cap: &Capacitance, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = rhs.clone();
        for (mut row, &d) in y.row_iter_mut().zip(self.diag.iter()) {
            row /= d;
        }
        if self.rank() == 0 {
            return y;
        }
        let t = self.loadings.transpose() * &y;
        let z = cap.chol.solve(&t);
        y -= &cap.scaled_loadings * z;
        y
    }

    /// Column `i` of the result is `Σ⁻¹xᵢ`.
    pub fn sigma_solve(&self, data: &DataMatrix) -> Result<DMatrix<f64>> {
        self.solve_matrix(data.samples())
    }

    pub fn logdet(&self) -> Result<f64> {
        let cap = self.capacitance()?;
        Ok(self.logdet_with(&cap))
    }

    pub(crate) fn logdet_with(&self, cap: &Capacitance) -> f64 {
        let diag_part: f64 = self.diag.iter().map(|d| d.ln()).sum();
        let inner: f64 = cap
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|l| 2.0 * l.ln())
            .sum();
        diag_part + inner
    }

    /// `xᵢᵀΣ⁻¹xᵢ` for every sample.
    pub fn mahalanobis(&self, data: &DataMatrix) -> Result<DVector<f64>> {
        let solved = self.sigma_solve(data)?;
        let dists = DVector::from_iterator(
            data.len(),
            data.samples()
                .column_iter()
                .zip(solved.column_iter())
                .map(|(x, y)| x.dot(&y)),
        );
        if let Some(i) = dists.iter().position(|&q| !(q > 0.0)) {
            return Err(Error::Numerical(format!(
                "non-positive Mahalanobis distance {} for sample {i} under {}",
                dists[i],
                self.describe()
            )));
        }
        Ok(dists)
    }

    /// `log det Σ + (n/m) Σᵢ log(xᵢᵀΣ⁻¹xᵢ)`.
    pub fn tyler_objective(&self, data: &DataMatrix) -> Result<f64> {
        check_dims(self, data)?;
        let logdet = self.logdet()?;
        let dists = self.mahalanobis(data)?;
        let n = self.dim() as f64;
        let m = data.len() as f64;
        let sum_log: f64 = dists.iter().map(|q| q.ln()).sum();
        Ok(logdet + n / m * sum_log)
    }

    /// Log-density of the angular central Gaussian distribution at a unit vector.
    pub fn acg_log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let q = self.unit_quadratic_form(x)?;
        let n = self.dim() as f64;
        let logdet = self.logdet()?;
        Ok(ln_gamma(n / 2.0) - 2f64.ln() - n / 2.0 * PI.ln() - 0.5 * logdet - n / 2.0 * q.ln())
    }

    /// Log of the joint density of direction `x` and radius `r` under the
    /// latent model `Z = R·X`, `Z ~ N(0, Σ)`.
    pub fn joint_log_density(&self, x: &DVector<f64>, radius: f64) -> Result<f64> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidInput(format!(
                "radius must be positive and finite, got {radius}"
            )));
        }
        let q = self.unit_quadratic_form(x)?;
        let n = self.dim() as f64;
        let logdet = self.logdet()?;
        Ok((n - 1.0) * radius.ln()
            - n / 2.0 * (2.0 * PI).ln()
            - 0.5 * logdet
            - 0.5 * radius * radius * q)
    }

    fn unit_quadratic_form(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("vector of length {}", self.dim()),
                found: format!("length {}", x.len()),
            });
        }
        let norm = x.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidInput(format!(
                "density is defined on the unit sphere, got ‖x‖ = {norm}"
            )));
        }
        let col = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let y = self.solve_matrix(&col)?;
        Ok(x.dot(&y.column(0)))
    }
}

pub(crate) fn check_dims(model: &FactorModel, data: &DataMatrix) -> Result<()> {
    if model.dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("samples of dimension {}", model.dim()),
            found: format!("dimension {}", data.dim()),
        });
    }
    Ok(())
}

/// Clamps every entry to at least `DIAG_FLOOR · mean(d)`.
///
/// When the mean is not positive the floor is taken relative to `fallback`.
pub fn floor_diagonal(diag: &mut DVector<f64>, fallback: f64) {
    let mean = diag.mean();
    let reference = if mean > 0.0 && mean.is_finite() {
        mean
    } else {
        fallback
    };
    let floor = DIAG_FLOOR * reference;
    for v in diag.iter_mut() {
        if !(*v >= floor) {
            *v = floor;
        }
    }
}
