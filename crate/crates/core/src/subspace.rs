//! Robust subspace recovery: Euclidean-median centering, subspace fits from
//! trex, PCA and spherical PCA, and distances between subspaces and points.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::estimators::{order_eigenpairs, trex_fit, EstimatorConfig};
use crate::factor_model::DataMatrix;

/// Distance below which a Weiszfeld iterate counts as sitting on a sample.
const ANCHOR_EPS: f64 = 1e-12;

/// A linear subspace given by an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Wraps `basis`, checking `BᵀB = I` to 1e-10.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let r = basis.ncols();
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::<f64>::identity(r, r)).amax();
        if err > 1e-10 {
            return Err(Error::InvalidInput(format!(
                "basis columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Self { basis })
    }

    /// Orthonormal basis of the column span of `spanning` via thin QR.
    pub fn from_span(spanning: &DMatrix<f64>) -> Result<Self> {
        if spanning.ncols() == 0 || spanning.ncols() > spanning.nrows() {
            return Err(Error::InvalidInput(format!(
                "cannot span a subspace from a {} x {} matrix",
                spanning.nrows(),
                spanning.ncols()
            )));
        }
        Self::new(spanning.clone().qr().q())
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// Dense orthogonal projector `BBᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// `(I − BBᵀ)·M` without forming the projector.
    fn residual(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m - &self.basis * (self.basis.transpose() * m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MedianResult {
    pub center: DVector<f64>,
    pub iterations: usize,
    /// True when `max_iters` ran out before the step tolerance was met.
    pub stalled: bool,
    /// `Σᵢ‖xᵢ − c‖` at the starting point and after each accepted step.
    pub objective_trace: Vec<f64>,
}

/// `Σᵢ‖xᵢ − c‖₂`.
pub fn median_objective(data: &DataMatrix, center: &DVector<f64>) -> f64 {
    data.samples()
        .column_iter()
        .map(|x| (x - center).norm())
        .sum()
}

/// Geometric median by Weiszfeld's iteration from the coordinate-wise mean.
///
/// When an iterate coincides with samples the Vardi–Zhang step is taken:
/// the iterate is optimal if the pull of the remaining samples has norm at
/// most the coincident multiplicity, otherwise it moves along that pull.
pub fn euclidean_median(data: &DataMatrix, tol: f64, max_iters: usize) -> Result<MedianResult> {
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::InvalidInput(
            "median tolerance must be positive and max_iters at least 1".into(),
        ));
    }
    let x = data.samples();
    let n = data.dim();
    let mut center = data.mean();
    let mut objective = median_objective(data, &center);
    let mut trace = vec![objective];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        let mut weighted = DVector::zeros(n);
        let mut pull = DVector::zeros(n);
        let mut weight_sum = 0.0;
        let mut coincident = 0usize;
        for col in x.column_iter() {
            let diff = &col - &center;
            let dist = diff.norm();
            if dist < ANCHOR_EPS {
                coincident += 1;
                continue;
            }
            weighted += &col / dist;
            pull += diff / dist;
            weight_sum += 1.0 / dist;
        }
        if weight_sum == 0.0 {
            converged = true;
            break;
        }
        let target = weighted / weight_sum;
        let next = if coincident == 0 {
            target
        } else {
            let strength = pull.norm();
            if strength <= coincident as f64 {
                converged = true;
                break;
            }
            let keep = coincident as f64 / strength;
            target * (1.0 - keep) + &center * keep
        };
        iterations += 1;
        let next_objective = median_objective(data, &next);
        if next_objective > objective {
            // Rounding noise at the optimum.
            converged = true;
            break;
        }
        let step = (&next - &center).norm();
        center = next;
        objective = next_objective;
        trace.push(objective);
        if step <= tol * (1.0 + center.norm()) {
            converged = true;
            break;
        }
    }
    Ok(MedianResult {
        center,
        iterations,
        stalled: !converged,
        objective_trace: trace,
    })
}

/// Subtracts `center` from every sample, dropping samples that become zero.
/// Returns the centered data and the number of dropped samples.
pub fn center_samples(data: &DataMatrix, center: &DVector<f64>) -> Result<(DataMatrix, usize)> {
    if center.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("center of length {}", data.dim()),
            found: format!("length {}", center.len()),
        });
    }
    let kept: Vec<DVector<f64>> = data
        .samples()
        .column_iter()
        .map(|x| x - center)
        .filter(|v| v.iter().any(|&e| e != 0.0))
        .collect();
    let dropped = data.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::InvalidInput(
            "all samples coincide with the center".into(),
        ));
    }
    Ok((
        DataMatrix::from_columns(DMatrix::from_columns(&kept))?,
        dropped,
    ))
}

/// Range of the trex loadings fitted with rank `cfg.rank`.
///
/// With the default `Mode::Auto` the fit runs in tall mode when `n > 4m`.
pub fn trex_subspace(data: &DataMatrix, cfg: &EstimatorConfig) -> Result<Subspace> {
    let (model, _) = trex_fit(data, cfg)?;
    Subspace::from_span(model.loadings())
}

fn top_left_singular(matrix: &DMatrix<f64>, r: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let svd = matrix.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return left singular vectors".into()))?;
    let (values, vectors) = order_eigenpairs(svd.singular_values.as_slice(), &u);
    if values.len() < r {
        return Err(Error::InvalidInput(format!(
            "rank {r} exceeds the {} available directions",
            values.len()
        )));
    }
    Ok((values, vectors.columns(0, r).into_owned()))
}

/// Top-`r` principal directions of the samples projected onto the sphere.
pub fn spherical_pca(data: &DataMatrix, r: usize) -> Result<Subspace> {
    if r == 0 || r > data.dim() {
        return Err(Error::InvalidInput(format!(
            "rank must satisfy 1 <= r <= n = {}, got {r}",
            data.dim()
        )));
    }
    let unit = data.to_normalized();
    let (_, basis) = top_left_singular(unit.samples(), r)?;
    Subspace::new(basis)
}

/// How [`pca_subspace`] computes the leading directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaRoute {
    /// Eigen-decomposition of the `n × n` scatter.
    Dense,
    /// Eigen-decomposition of the `m × m` Gram matrix, `O(nm²)`.
    Gram,
    /// `Gram` when `n > m`.
    Auto,
}

/// Top-`r` left singular subspace of the mean-centered samples.
pub fn pca_subspace(data: &DataMatrix, r: usize, route: PcaRoute) -> Result<Subspace> {
    if r == 0 {
        return Err(Error::InvalidInput(
            "subspace rank must be at least 1".into(),
        ));
    }
    let centered = data.centered();
    let (n, m) = centered.shape();
    let route = match route {
        PcaRoute::Auto if n > m => PcaRoute::Gram,
        PcaRoute::Auto => PcaRoute::Dense,
        other => other,
    };
    let (values, vectors) = match route {
        PcaRoute::Gram => {
            let eig = SymmetricEigen::new(centered.transpose() * &centered);
            order_eigenpairs(eig.eigenvalues.as_slice(), &eig.eigenvectors)
        }
        _ => {
            let eig = SymmetricEigen::new(&centered * centered.transpose());
            order_eigenpairs(eig.eigenvalues.as_slice(), &eig.eigenvectors)
        }
    };
    let top = values.first().copied().unwrap_or(0.0);
    let rank = values
        .iter()
        .filter(|&&v| v > 1e-12 * top && top > 0.0)
        .count();
    if r > rank {
        return Err(Error::InvalidInput(format!(
            "rank {r} exceeds the numerical rank {rank} of the centered data"
        )));
    }
    let basis = match route {
        PcaRoute::Gram => {
            let mut u = DMatrix::zeros(n, r);
            for k in 0..r {
                let col = &centered * vectors.column(k) / values[k].sqrt();
                u.set_column(k, &col);
            }
            // Re-orthonormalize to remove the rounding of the Gram route.
            u.qr().q()
        }
        _ => vectors.columns(0, r).into_owned(),
    };
    Subspace::new(basis)
}

/// Principal angles between subspaces of equal rank, ascending.
///
/// Computed from the singular values of `(I − AAᵀ)B`, which are the sines
/// of the angles, so small angles keep full relative accuracy.
pub fn principal_angles(a: &Subspace, b: &Subspace) -> Result<Vec<f64>> {
    check_ambient(a, b)?;
    if a.rank() != b.rank() {
        return Err(Error::DimensionMismatch {
            expected: format!("rank {}", a.rank()),
            found: format!("rank {}", b.rank()),
        });
    }
    let residual = a.residual(b.basis());
    let mut sines: Vec<f64> = residual
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0).asin())
        .collect();
    sines.sort_by(|x, y| x.total_cmp(y));
    Ok(sines)
}

fn check_ambient(a: &Subspace, b: &Subspace) -> Result<()> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("ambient dimension {}", a.ambient_dim()),
            found: format!("{}", b.ambient_dim()),
        });
    }
    Ok(())
}

/// `‖P_A − P_B‖_F`, evaluated as `(‖(I − P_A)B‖² + ‖(I − P_B)A‖²)^{1/2}`.
pub fn subspace_distance(a: &Subspace, b: &Subspace) -> Result<f64> {
    check_ambient(a, b)?;
    let ab = a.residual(b.basis()).norm_squared();
    let ba = b.residual(a.basis()).norm_squared();
    Ok((ab + ba).sqrt())
}

/// `‖(I − BBᵀ)(xᵢ − center)‖₂` for every sample.
pub fn point_to_subspace_distances(
    data: &DataMatrix,
    subspace: &Subspace,
    center: &DVector<f64>,
) -> Result<Vec<f64>> {
    if data.dim() != subspace.ambient_dim() || center.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("dimension {}", subspace.ambient_dim()),
            found: format!("data {}, center {}", data.dim(), center.len()),
        });
    }
    let basis = subspace.basis();
    Ok(data
        .samples()
        .column_iter()
        .map(|x| {
            let y = x - center;
            let coef = basis.transpose() * &y;
            (y - basis * coef).norm()
        })
        .collect())
}
