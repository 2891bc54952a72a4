#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use trex::{DataMatrix, FactorModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn random_model(rng: &mut ChaCha8Rng, n: usize, r: usize) -> FactorModel {
    let loadings = gaussian_matrix(rng, n, r) / (r.max(1) as f64).sqrt();
    let diag = DVector::from_fn(n, |_, _| rng.random_range(0.2..2.0));
    FactorModel::new(loadings, diag).unwrap()
}

pub fn random_data(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DataMatrix {
    DataMatrix::from_columns(gaussian_matrix(rng, n, m)).unwrap()
}

pub fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = v.norm();
    v / norm
}

/// Dense `Σ⁻¹X` by LU with partial pivoting.
pub fn dense_solve(sigma: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    sigma.clone().lu().solve(rhs).unwrap()
}

/// Dense `log det Σ` from the eigenvalues.
pub fn dense_logdet(sigma: &DMatrix<f64>) -> f64 {
    sigma
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.ln())
        .sum()
}

pub fn dense_quadratic_forms(sigma: &DMatrix<f64>, x: &DMatrix<f64>) -> Vec<f64> {
    let solved = dense_solve(sigma, x);
    x.column_iter()
        .zip(solved.column_iter())
        .map(|(a, b)| a.dot(&b))
        .collect()
}

pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.amax().max(f64::MIN_POSITIVE);
    (a - b).amax() / scale
}

/// Composite Gauss–Legendre quadrature on `[lo, hi]` with `panels` panels.
pub fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    // 10-point Gauss-Legendre nodes and weights on [-1, 1].
    const NODES: [f64; 5] = [
        0.148_874_338_981_631_2,
        0.433_395_394_129_247_2,
        0.679_409_568_299_024_4,
        0.865_063_366_688_984_5,
        0.973_906_528_517_171_7,
    ];
    const WEIGHTS: [f64; 5] = [
        0.295_524_224_714_752_9,
        0.269_266_719_309_996_4,
        0.219_086_362_515_982_0,
        0.149_451_349_150_580_6,
        0.066_671_344_308_688_1,
    ];
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        for (x, w) in NODES.iter().zip(WEIGHTS.iter()) {
            total += w * (f(mid - half * x) + f(mid + half * x));
        }
    }
    total * 0.5 * h
}

/// Sum of principal angles between the spans of orthonormal `a` and `b`,
/// from the sines `σ((I − aaᵀ)b)`.
pub fn angle_sum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let residual = b - a * (a.transpose() * b);
    residual
        .svd(false, false)
        .singular_values
        .iter()
        .map(|s| s.clamp(0.0, 1.0).asin())
        .sum()
}

/// Explicit `‖aaᵀ − bbᵀ‖_F`.
pub fn projector_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a * a.transpose() - b * b.transpose()).norm()
}

/// Minimizes `Σᵢ‖xᵢ − c‖` over a grid, zooming in around the best node.
pub fn grid_median(data: &DataMatrix) -> (DVector<f64>, f64) {
    let x = data.samples();
    let bound = |f: fn(f64, f64) -> f64, init: f64| {
        DVector::from_iterator(2, x.row_iter().map(|row| row.iter().copied().fold(init, f)))
    };
    let (mut lo, mut hi) = (
        bound(f64::min, f64::INFINITY),
        bound(f64::max, f64::NEG_INFINITY),
    );
    let mut best = (DVector::zeros(2), f64::INFINITY);
    for _ in 0..12 {
        let steps = 60;
        for i in 0..=steps {
            for j in 0..=steps {
                let c = DVector::from_vec(vec![
                    lo[0] + (hi[0] - lo[0]) * i as f64 / steps as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / steps as f64,
                ]);
                let f = trex::subspace::median_objective(data, &c);
                if f < best.1 {
                    best = (c, f);
                }
            }
        }
        let span = (&hi - &lo) / 10.0;
        lo = &best.0 - &span;
        hi = &best.0 + &span;
    }
    best
}
