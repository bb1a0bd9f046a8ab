//! Small dense helpers on `&[f64]` plus the clamped symmetric square root.

use nalgebra::{DMatrix, SymmetricEigen};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Incremental mean accumulator. Feeding identical vectors yields that
/// vector bit-for-bit, which the collapse identities rely on.
#[derive(Debug, Clone)]
pub struct RunningMean {
    mean: Vec<f64>,
    count: usize,
}

impl RunningMean {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.mean.iter_mut().for_each(|m| *m = 0.0);
        self.count = 0;
    }

    pub fn push(&mut self, v: &[f64]) {
        self.count += 1;
        if self.count == 1 {
            self.mean.copy_from_slice(v);
            return;
        }
        let inv = 1.0 / self.count as f64;
        for (m, x) in self.mean.iter_mut().zip(v) {
            *m += (x - *m) * inv;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn into_mean(self) -> Vec<f64> {
        self.mean
    }
}

/// Scalar counterpart of [`RunningMean`].
pub fn running_mean_scalar(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (j, v) in values.into_iter().enumerate() {
        if j == 0 {
            mean = v;
        } else {
            mean += (v - mean) / (j + 1) as f64;
        }
    }
    mean
}

/// Pairwise (cascade) summation; order is fixed by the slice layout.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if values.len() <= BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Result of the clamped symmetric square root.
#[derive(Debug, Clone)]
pub struct PsdSqrt {
    /// `S = U sqrt(max(L, 0)) U^T`, symmetric.
    pub factor: DMatrix<f64>,
    /// The clamped matrix `U max(L, 0) U^T` that `S S^T` reconstructs.
    pub clamped: DMatrix<f64>,
    /// Frobenius norm of the removed negative part.
    pub clamp_magnitude: f64,
}

/// Symmetric square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> PsdSqrt {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "psd_sqrt needs a square matrix");
    if d == 1 {
        let v = m[(0, 0)];
        let kept = v.max(0.0);
        return PsdSqrt {
            factor: DMatrix::from_element(1, 1, kept.sqrt()),
            clamped: DMatrix::from_element(1, 1, kept),
            clamp_magnitude: (kept - v).abs(),
        };
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let u = &eig.eigenvectors;
    let mut neg = 0.0;
    let mut kept = eig.eigenvalues.clone();
    let mut roots = eig.eigenvalues.clone();
    for j in 0..d {
        let l = eig.eigenvalues[j];
        if l < 0.0 {
            neg += l * l;
            kept[j] = 0.0;
        }
        roots[j] = kept[j].sqrt();
    }
    let factor = u * DMatrix::from_diagonal(&roots) * u.transpose();
    let clamped = u * DMatrix::from_diagonal(&kept) * u.transpose();
    PsdSqrt {
        factor: symmetrize(&factor),
        clamped: symmetrize(&clamped),
        clamp_magnitude: neg.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_mean_of_identical_vectors_is_exact() {
        let v = [0.1, 1.0 / 3.0, -7.25e-3];
        let mut acc = RunningMean::new(3);
        for _ in 0..17 {
            acc.push(&v);
        }
        assert_eq!(acc.mean(), &v);
    }

    #[test]
    fn psd_sqrt_reconstructs_and_clamps() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = psd_sqrt(&m);
        let rec = &r.factor * r.factor.transpose();
        assert!(frobenius(&(rec - &m)) < 1e-12);
        assert_eq!(r.clamp_magnitude, 0.0);

        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]); // eigenvalues 3, -1
        let r = psd_sqrt(&m);
        assert!((r.clamp_magnitude - 1.0).abs() < 1e-12);
        let rec = &r.factor * r.factor.transpose();
        assert!(frobenius(&(rec - &r.clamped)) < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_ints() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }
}
