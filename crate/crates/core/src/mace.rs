//! Gaussian moment fitting and the squared Fréchet distance between fits.
//!
//! MACE is reported with the FID convention: the *squared* distance
//! `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::ingest::EmbeddingSet;
use crate::stats::{self, BootstrapConfig, StatsError};

/// Relative ridge added to every fitted covariance.
pub const RIDGE_SCALE: f64 = 1e-6;
/// Eigenvalues below `-NEG_EIG_TOLERANCE * trace / d` are a hard error;
/// anything between that and zero is clamped.
pub const NEG_EIG_TOLERANCE: f64 = 1e-10;
const SYMMETRY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MaceError {
    #[error("need at least 2 samples to fit moments, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite value in embedding input")]
    NonFiniteInput,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),
    #[error("dimension mismatch: {a} vs {b}")]
    DimensionMismatch { a: usize, b: usize },
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianMoments {
    pub fn d(&self) -> usize {
        self.mean.len()
    }

    /// Moments from an explicit mean and covariance, used for closed-form
    /// references. The covariance is taken as-is (no ridge).
    pub fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>, n: usize) -> Self {
        Self { mean, cov, n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaceScore {
    pub value: f64,
    pub d: usize,
    pub n_a: usize,
    pub n_b: usize,
}

fn ridge(cov: &mut DMatrix<f64>) {
    let d = cov.nrows();
    let eps = RIDGE_SCALE * (cov.trace() / d as f64).max(1e-30);
    for i in 0..d {
        cov[(i, i)] += eps;
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Mean and unbiased, symmetrized, ridge-regularized covariance of the rows
/// of `x`.
pub fn fit_matrix(x: &DMatrix<f64>) -> Result<GaussianMoments, MaceError> {
    let n = x.nrows();
    if n < 2 {
        return Err(MaceError::TooFewSamples(n));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MaceError::NonFiniteInput);
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.tr_mul(&centered) / (n - 1) as f64;
    cov = symmetrize(&cov);
    ridge(&mut cov);
    Ok(GaussianMoments { mean, cov, n })
}

pub fn fit_gaussian(set: &EmbeddingSet) -> Result<GaussianMoments, MaceError> {
    fit_matrix(set.matrix())
}

fn eigen(s: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MaceError> {
    let eig = SymmetricEigen::try_new(s.clone(), f64::EPSILON, 0)
        .ok_or_else(|| MaceError::EigenFailure("did not converge".into()))?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(MaceError::EigenFailure("non-finite eigenvalue".into()));
    }
    Ok(eig)
}

fn check_negativity(eigenvalues: &DVector<f64>, trace: f64) -> Result<(), MaceError> {
    let d = eigenvalues.len().max(1) as f64;
    let tol = NEG_EIG_TOLERANCE * trace.abs() / d;
    let min = eigenvalues.min();
    if min < -tol {
        return Err(MaceError::EigenFailure(format!(
            "eigenvalue {min:.3e} below -{tol:.3e}; matrix is not PSD"
        )));
    }
    Ok(())
}

fn check_symmetric(s: &DMatrix<f64>) -> Result<(), MaceError> {
    if !s.is_square() {
        return Err(MaceError::NotSquare {
            rows: s.nrows(),
            cols: s.ncols(),
        });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(MaceError::NonFiniteInput);
    }
    let norm = s.norm();
    let asym = (s - s.transpose()).norm();
    if asym > SYMMETRY_TOLERANCE * norm {
        return Err(MaceError::NotSymmetric(asym / norm));
    }
    Ok(())
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition,
/// clamping round-off negative eigenvalues to zero.
pub fn matrix_sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>, MaceError> {
    check_symmetric(s)?;
    let sym = symmetrize(s);
    let eig = eigen(&sym)?;
    check_negativity(&eig.eigenvalues, sym.trace())?;
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= roots[j];
    }
    Ok(symmetrize(&(scaled * v.transpose())))
}

/// `Tr((S_a^1/2 S_b S_a^1/2)^1/2)` from the eigenvalues of the symmetrized
/// inner product.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, MaceError> {
    let ra = matrix_sqrt_psd(a)?;
    let inner = symmetrize(&(&ra * b * &ra));
    let eig = eigen(&inner)?;
    check_negativity(&eig.eigenvalues, inner.trace())?;
    Ok(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<MaceScore, MaceError> {
    if a.d() != b.d() || a.cov.nrows() != b.cov.nrows() {
        return Err(MaceError::DimensionMismatch { a: a.d(), b: b.d() });
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cov_term = a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(&a.cov, &b.cov)?;
    Ok(MaceScore {
        value: (mean_term + cov_term).max(0.0),
        d: a.d(),
        n_a: a.n,
        n_b: b.n,
    })
}

/// MACE between two embedding collections.
pub fn mace_between(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<MaceScore, MaceError> {
    if a.d() != b.d() {
        return Err(MaceError::DimensionMismatch { a: a.d(), b: b.d() });
    }
    for set in [a, b] {
        if set.n() < set.d() {
            log::warn!(
                "only {} samples for dimension {}; covariance is rank deficient and relies on the ridge",
                set.n(),
                set.d()
            );
        }
    }
    frechet_distance(&fit_gaussian(a)?, &fit_gaussian(b)?)
}

/// Rows of an embedding set partitioned into resampling units.
#[derive(Debug, Clone)]
pub struct GroupedEmbeddings {
    rows: DMatrix<f64>,
    groups: Vec<Vec<usize>>,
    labels: Vec<String>,
}

impl GroupedEmbeddings {
    /// Groups rows by a per-row label; groups are ordered by label.
    pub fn by_label(set: &EmbeddingSet, labels: &[String]) -> Self {
        assert_eq!(labels.len(), set.n(), "one label per row");
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            map.entry(l.as_str()).or_default().push(i);
        }
        Self {
            rows: set.matrix().clone(),
            labels: map.keys().map(|s| s.to_string()).collect(),
            groups: map.into_values().collect(),
        }
    }

    /// One group per video when frame keys are present, else one per row.
    pub fn by_video(set: &EmbeddingSet) -> Self {
        let labels: Vec<String> = if set.has_keys() {
            set.keys().iter().map(|k| k.video_id.clone()).collect()
        } else {
            (0..set.n()).map(|i| format!("{i:09}")).collect()
        };
        Self::by_label(set, &labels)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_labels(&self) -> &[String] {
        &self.labels
    }

    pub fn d(&self) -> usize {
        self.rows.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn moments(&self) -> Result<GaussianMoments, MaceError> {
        fit_matrix(&self.rows)
    }

    /// Moments of the rows belonging to a multiset of groups.
    pub fn moments_for(&self, draw: &[usize]) -> Result<GaussianMoments, MaceError> {
        let idx: Vec<usize> = draw
            .iter()
            .flat_map(|&g| self.groups[g].iter().copied())
            .collect();
        fit_matrix(&self.rows.select_rows(&idx))
    }
}

/// Bootstrap distribution of MACE(reference, other) where both sides are
/// resampled at group level. The reference draws from the base stream and
/// `other` from `cfg.substream(stream)`, so several comparisons sharing a
/// reference see identical reference resamples.
pub fn mace_bootstrap(
    reference: &GroupedEmbeddings,
    other: &GroupedEmbeddings,
    cfg: &BootstrapConfig,
    stream: u64,
) -> Result<stats::BootstrapDistribution, MaceError> {
    if reference.d() != other.d() {
        return Err(MaceError::DimensionMismatch {
            a: reference.d(),
            b: other.d(),
        });
    }
    let other_cfg = cfg.substream(stream);
    let (values, dropped) = stats::bootstrap_map(cfg, |i| {
        let ra = stats::resample_units(reference.n_groups(), cfg, i);
        let rb = stats::resample_units(other.n_groups(), &other_cfg, i);
        let ma = reference.moments_for(&ra).ok()?;
        let mb = other.moments_for(&rb).ok()?;
        frechet_distance(&ma, &mb).ok().map(|s| s.value)
    })?;
    Ok(stats::BootstrapDistribution { values, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn moments(mean: &[f64], diag: &[f64]) -> GaussianMoments {
        GaussianMoments::from_parts(
            DVector::from_column_slice(mean),
            DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            100,
        )
    }

    #[test]
    fn square_corners_covariance() {
        let set = EmbeddingSet::from_rows(&[
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![2.0, 2.0],
        ])
        .unwrap();
        let m = fit_gaussian(&set).unwrap();
        // brute force: sum of outer products of centered rows / (n-1)
        let rows = [[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]];
        let mut c = [[0.0; 2]; 2];
        for r in rows {
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += r[i] * r[j] / 3.0;
                }
            }
        }
        let eps = RIDGE_SCALE * (c[0][0] + c[1][1]) / 2.0;
        assert_abs_diff_eq!(m.mean[0], 1.0);
        assert_abs_diff_eq!(m.mean[1], 1.0);
        assert_abs_diff_eq!(m.cov[(0, 0)], 4.0 / 3.0 + eps, epsilon = 1e-15);
        assert_abs_diff_eq!(m.cov[(1, 1)], c[1][1] + eps, epsilon = 1e-15);
        assert_abs_diff_eq!(m.cov[(0, 1)], c[0][1], epsilon = 1e-15);
    }

    #[test]
    fn identical_rows() {
        let set = EmbeddingSet::from_rows(&vec![vec![3.0, -1.0, 2.0]; 5]).unwrap();
        let m = fit_gaussian(&set).unwrap();
        assert_eq!(m.mean.as_slice(), &[3.0, -1.0, 2.0]);
        let eps = RIDGE_SCALE * 1e-30;
        assert_eq!(m.cov, DMatrix::identity(3, 3) * eps);
    }

    #[test]
    fn one_row_is_too_few() {
        let set = EmbeddingSet::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(fit_gaussian(&set).unwrap_err(), MaceError::TooFewSamples(1));
    }

    #[test]
    fn sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).norm() < 1e-14);
        let r = matrix_sqrt_psd(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        assert!((r - dmatrix![2.0, 0.0; 0.0, 3.0]).norm() < 1e-14);

        // eigenvalues 1 and 3 with eigenvectors (1,-1)/sqrt2 and (1,1)/sqrt2
        let (s1, s3) = (1.0f64, 3.0f64.sqrt());
        let expected = dmatrix![(s1 + s3) / 2.0, (s3 - s1) / 2.0; (s3 - s1) / 2.0, (s1 + s3) / 2.0];
        let r = matrix_sqrt_psd(&dmatrix![2.0, 1.0; 1.0, 2.0]).unwrap();
        assert!((&r - &expected).norm() < 1e-12);
        assert_abs_diff_eq!(r[(0, 0)], 1.3660, epsilon = 1e-4);
        assert_abs_diff_eq!(r[(0, 1)], 0.3660, epsilon = 1e-4);
    }

    #[test]
    fn sqrt_errors() {
        assert!(matches!(
            matrix_sqrt_psd(&dmatrix![1.0, 2.0; 0.0, 1.0]),
            Err(MaceError::NotSymmetric(_))
        ));
        assert!(matches!(
            matrix_sqrt_psd(&dmatrix![1.0, 0.0; 0.0, -1.0]),
            Err(MaceError::EigenFailure(_))
        ));
        assert!(matches!(
            matrix_sqrt_psd(&DMatrix::zeros(2, 3)),
            Err(MaceError::NotSquare { .. })
        ));
    }

    #[test]
    fn frechet_closed_forms() {
        let a = moments(&[0.0], &[1.0]);
        let b = moments(&[3.0], &[4.0]);
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap().value, 10.0, epsilon = 1e-12);

        let a = moments(&[0.0, 0.0], &[1.0, 1.0]);
        let b = moments(&[1.0, 1.0], &[4.0, 9.0]);
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap().value, 7.0, epsilon = 1e-12);

        assert!(frechet_distance(&a, &a).unwrap().value < 1e-8);
        assert!(matches!(
            frechet_distance(&a, &moments(&[0.0], &[1.0])),
            Err(MaceError::DimensionMismatch { a: 2, b: 1 })
        ));
    }

    #[test]
    fn same_rows_give_zero() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), i as f64 / 10.0])
            .collect();
        let set = EmbeddingSet::from_rows(&rows).unwrap();
        assert!(mace_between(&set, &set).unwrap().value < 1e-8);
    }

    #[test]
    fn grouped_moments_match_direct_fit() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * i) as f64 / 7.0]).collect();
        let set = EmbeddingSet::from_rows(&rows).unwrap();
        let labels: Vec<String> = (0..12).map(|i| format!("g{}", i / 3)).collect();
        let g = GroupedEmbeddings::by_label(&set, &labels);
        assert_eq!(g.n_groups(), 4);
        let all = g.moments_for(&[0, 1, 2, 3]).unwrap();
        let direct = fit_gaussian(&set).unwrap();
        assert!((all.cov - direct.cov).norm() < 1e-12);
        // drawing group 1 twice duplicates rows 3..6
        let twice = g.moments_for(&[1, 1]).unwrap();
        assert_eq!(twice.n, 6);
    }
}
