//! Gaussian fits of feature sets and the Fréchet distance between them.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("feature dimension must be at least 1")]
    EmptyFeatures,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    #[error("eigendecomposition did not converge")]
    EigenFailure,
}

const MAX_EIGEN_ITERS: usize = 10_000;

/// Mean, symmetrized covariance and sample count of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats<T: Real> {
    mean: DVector<T>,
    cov: DMatrix<T>,
    n: usize,
}

impl<T: Real> GaussianStats<T> {
    /// Symmetrizes `cov` and rejects matrices with eigenvalues below
    /// `-1e-8 · max(1, λ_max)`.
    pub fn try_new(mean: DVector<T>, cov: DMatrix<T>, n: usize) -> Result<Self, StatsError> {
        if n < 2 {
            return Err(StatsError::TooFewSamples(n));
        }
        let d = mean.len();
        if d == 0 {
            return Err(StatsError::EmptyFeatures);
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(StatsError::DimMismatch { left: d, right: cov.nrows().max(cov.ncols()) });
        }
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite("mean"));
        }
        if cov.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite("covariance"));
        }
        let cov = symmetrize(cov);
        let eig = eigen(cov.clone())?;
        let max = eig.eigenvalues.iter().copied().fold(T::one(), |a, b| if b > a { b } else { a });
        let min = eig.eigenvalues.iter().copied().fold(T::max_value().expect("bounded"), |a, b| if b < a { b } else { a });
        if min < -(T::lit(1e-8) * max) {
            return Err(StatsError::NotPositiveSemidefinite { min_eigenvalue: min.as_f64() });
        }
        Ok(Self { mean, cov, n })
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<T> {
        &self.cov
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetrize<T: Real>(m: DMatrix<T>) -> DMatrix<T> {
    let t = m.transpose();
    (m + t) * T::lit(0.5)
}

fn eigen<T: Real>(m: DMatrix<T>) -> Result<SymmetricEigen<T, nalgebra::Dyn>, StatsError> {
    SymmetricEigen::try_new(m, T::default_epsilon(), MAX_EIGEN_ITERS).ok_or(StatsError::EigenFailure)
}

/// Column mean and unbiased (n−1) covariance of `n` feature rows.
pub fn gaussian_stats<T, V>(features: &[V]) -> Result<GaussianStats<T>, StatsError>
where
    T: Real,
    V: AsRef<[T]>,
{
    let n = features.len();
    if n < 2 {
        return Err(StatsError::TooFewSamples(n));
    }
    let d = features[0].as_ref().len();
    if d == 0 {
        return Err(StatsError::EmptyFeatures);
    }
    let mut x = DMatrix::<T>::zeros(n, d);
    for (i, row) in features.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != d {
            return Err(StatsError::DimMismatch { left: d, right: row.len() });
        }
        for (j, &v) in row.iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    let nt = T::from_usize(n).expect("sample count fits");
    let mean: DVector<T> = x.row_mean().transpose();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (x.transpose() * &x) / (nt - T::one());
    GaussianStats::try_new(mean, cov, n)
}

/// PSD square root by eigendecomposition, negative eigenvalues clamped to 0.
fn sqrtm_psd<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>, StatsError> {
    let eig = eigen(m.clone())?;
    let roots = eig.eigenvalues.map(|l| if l > T::zero() { l.sqrt() } else { T::zero() });
    let v = &eig.eigenvectors;
    Ok(symmetrize(v * DMatrix::from_diagonal(&roots) * v.transpose()))
}

/// `‖μa−μb‖² + Tr(Σa) + Tr(Σb) − 2·Σ√λi`, λi the eigenvalues of
/// `Σa^½ Σb Σa^½`, clamped at 0.
pub fn fid<T: Real>(a: &GaussianStats<T>, b: &GaussianStats<T>) -> Result<T, StatsError> {
    if a.dim() != b.dim() {
        return Err(StatsError::DimMismatch { left: a.dim(), right: b.dim() });
    }
    let diff = &a.mean - &b.mean;
    let mean_term = diff.dot(&diff);
    let root_a = sqrtm_psd(&a.cov)?;
    let s = symmetrize(&root_a * &b.cov * &root_a);
    let eig = eigen(s)?;
    let trace_sqrt = eig
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, &l| if l > T::zero() { acc + l.sqrt() } else { acc });
    let value = mean_term + a.cov.trace() + b.cov.trace() - T::lit(2.0) * trace_sqrt;
    Ok(if value > T::zero() { value } else { T::zero() })
}

/// FID straight from two feature sets.
pub fn fid_from_features<T, V>(a: &[V], b: &[V]) -> Result<T, StatsError>
where
    T: Real,
    V: AsRef<[T]>,
{
    fid(&gaussian_stats(a)?, &gaussian_stats(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats1(mu: f64, var: f64) -> GaussianStats<f64> {
        GaussianStats::try_new(DVector::from_vec(vec![mu]), DMatrix::from_vec(1, 1, vec![var]), 10).unwrap()
    }

    #[test]
    fn one_dim_sample() {
        let s = gaussian_stats(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(s.mean()[0], 1.0);
        assert_eq!(s.covariance()[(0, 0)], 2.0);
    }

    #[test]
    fn constant_samples() {
        let s = gaussian_stats(&[vec![3.0, 1.0], vec![3.0, 1.0], vec![3.0, 1.0]]).unwrap();
        assert!(s.covariance().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn one_dim_analytic() {
        assert!((fid(&stats1(0.0, 1.0), &stats1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((fid(&stats1(0.0, 1.0), &stats1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert_eq!(gaussian_stats(&[vec![1.0]]).unwrap_err(), StatsError::TooFewSamples(1));
        assert!(matches!(gaussian_stats(&[vec![1.0], vec![1.0, 2.0]]), Err(StatsError::DimMismatch { .. })));
        let neg = GaussianStats::try_new(DVector::from_vec(vec![0.0]), DMatrix::from_vec(1, 1, vec![-1.0]), 3);
        assert!(matches!(neg, Err(StatsError::NotPositiveSemidefinite { .. })));
        assert!(matches!(fid(&stats1(0.0, 1.0), &gaussian_stats(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()), Err(StatsError::DimMismatch { .. })));
    }

    #[test]
    fn rank_deficient_is_fine() {
        // n < d: singular covariance
        let a = gaussian_stats::<f64, _>(&[vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 0.0]]).unwrap();
        assert!(fid(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn f32_path() {
        let a = gaussian_stats(&[vec![0.0f32, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]).unwrap();
        assert!(fid(&a, &a).unwrap() < 1e-4);
    }
}
