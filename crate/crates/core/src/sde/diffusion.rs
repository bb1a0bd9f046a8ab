use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SdeVariant;
use crate::error::{Error, Result};
use crate::linalg::{frobenius, norm, psd_sqrt, symmetrize};
use crate::objectives::{check_point, Objective};
use crate::optimizers::DEFAULT_GRAD_NORM_FLOOR;
use crate::stochastic::{ExpectationMode, SubsetPlan};

/// Largest clamped eigenvalue mass tolerated, relative to `‖scale·Σ‖_F`.
pub const CLAMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionOrder {
    #[default]
    Sigma00Only,
    WithSigma01,
}

/// Finite-population factor turning `V` into the covariance of a size-`k`
/// mean drawn without replacement: `(n − k) / (k (n − 1))`.
pub fn batch_mean_variance_factor(n: usize, k: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    (n - k) as f64 / (k as f64 * (n - 1) as f64)
}

/// `Σ₀₀ = E[(∇f_S − ∇f)(∇f_S − ∇f)ᵀ]` for `|S| = k`, exact over all `n`.
pub fn sigma00<O: Objective + ?Sized>(ens: &O, x: &[f64], k: usize) -> DMatrix<f64> {
    ens.noise_covariance(x) * batch_mean_variance_factor(ens.num_samples(), k)
}

/// A cross-covariance with the information on how it was computed.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariance {
    pub matrix: DMatrix<f64>,
    pub exact: bool,
    pub samples: usize,
}

/// `Σ₀₁ = Cov(∇f_S, h₁(S))` with the variant's first-order correction `h₁`:
///
/// * mini-batch / m-USAM: `∇²f_S ∇f_S`
/// * n-USAM: `(∇²f_S − ∇²f) ∇f`
/// * mini-batch / m-SAM: `∇²f_S ∇f_S / ‖∇f_S‖`
/// * n-SAM: `(∇²f_S − ∇²f) ∇f / ‖∇f‖`
pub fn sigma01<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    variant: SdeVariant,
    k: usize,
    mode: ExpectationMode,
) -> Result<CrossCovariance> {
    check_point(ens, x)?;
    let d = ens.dim();
    let n = ens.num_samples();
    let mut grads = vec![0.0; n * d];
    for i in 0..n {
        ens.sample_grad_into(i, x, &mut grads[i * d..(i + 1) * d]);
    }
    let mut gbar = vec![0.0; d];
    ens.mean_grad_into(x, &mut gbar);

    if matches!(variant, SdeVariant::NUsam | SdeVariant::NSam) {
        // h₁ is linear in the batch, so the cross-covariance of batch means is
        // the per-sample cross-covariance times the finite-population factor.
        let mut u = gbar.clone();
        if variant == SdeVariant::NSam {
            let gn = norm(&gbar);
            if gn < DEFAULT_GRAD_NORM_FLOOR {
                return Err(Error::NonDifferentiable("n-SAM Σ₀₁ undefined at ∇f = 0".into()));
            }
            u.iter_mut().for_each(|v| *v /= gn);
        }
        let mut hu = vec![0.0; n * d];
        let mut hbar = vec![0.0; d];
        for i in 0..n {
            ens.sample_hvp_into(i, x, &u, &mut hu[i * d..(i + 1) * d]);
        }
        for i in 0..n {
            for c in 0..d {
                hbar[c] += hu[i * d + c] / n as f64;
            }
        }
        let mut m = DMatrix::<f64>::zeros(d, d);
        for i in 0..n {
            for r in 0..d {
                let a = grads[i * d + r] - gbar[r];
                for c in 0..d {
                    m[(r, c)] += a * (hu[i * d + c] - hbar[c]);
                }
            }
        }
        m *= batch_mean_variance_factor(n, k) / n as f64;
        return Ok(CrossCovariance {
            matrix: m,
            exact: true,
            samples: n,
        });
    }

    let normalized = variant.is_sam();
    let plan = SubsetPlan::resolve(n, k, mode)?;
    let mut sum_ab = DMatrix::<f64>::zeros(d, d);
    let mut sum_a = vec![0.0; d];
    let mut sum_b = vec![0.0; d];
    let mut gs = vec![0.0; d];
    let mut hs = vec![0.0; d];
    let mut hv = vec![0.0; d];
    let mut count = 0usize;
    plan.for_each(n, k, |s| {
        gs.iter_mut().for_each(|v| *v = 0.0);
        for &i in s {
            for c in 0..d {
                gs[c] += grads[i * d + c];
            }
        }
        gs.iter_mut().for_each(|v| *v /= k as f64);
        hs.iter_mut().for_each(|v| *v = 0.0);
        let gn = norm(&gs);
        if !(normalized && gn == 0.0) {
            for &i in s {
                ens.sample_hvp_into(i, x, &gs, &mut hv);
                for c in 0..d {
                    hs[c] += hv[c];
                }
            }
            let div = if normalized { k as f64 * gn } else { k as f64 };
            hs.iter_mut().for_each(|v| *v /= div);
        }
        for r in 0..d {
            let a = gs[r] - gbar[r];
            sum_a[r] += a;
            sum_b[r] += hs[r];
            for c in 0..d {
                sum_ab[(r, c)] += a * hs[c];
            }
        }
        count += 1;
    });
    let cnt = count as f64;
    let mut m = sum_ab / cnt;
    for r in 0..d {
        for c in 0..d {
            m[(r, c)] -= sum_a[r] / cnt * sum_b[c] / cnt;
        }
    }
    Ok(CrossCovariance {
        matrix: m,
        exact: plan.is_exact(),
        samples: count,
    })
}

/// `S` with `S Sᵀ = scale · Σ` after clamping negative eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionFactor {
    pub factor: DMatrix<f64>,
    /// The unscaled `Σ^{variant}`.
    pub sigma: DMatrix<f64>,
    pub scale: f64,
    /// `scale·Σ` with negative eigenvalues set to zero.
    pub clamped: DMatrix<f64>,
    /// Frobenius norm of the removed negative part of `scale·Σ`.
    pub clamp_magnitude: f64,
}

impl DiffusionFactor {
    /// Errors when the clamp exceeds `1e-6 · ‖scale·Σ‖_F`.
    pub fn check_clamp(&self) -> Result<()> {
        let bound = CLAMP_TOLERANCE * self.scale * frobenius(&self.sigma);
        if self.clamp_magnitude > bound {
            return Err(Error::ClampExceeded {
                clamped: self.clamp_magnitude,
                bound,
            });
        }
        Ok(())
    }

    /// `‖S Sᵀ − clamped(scale·Σ)‖_F / ‖clamped(scale·Σ)‖_F`, zero for `Σ = 0`.
    pub fn reconstruction_error(&self) -> f64 {
        let rebuilt = &self.factor * self.factor.transpose();
        let denom = frobenius(&self.clamped);
        if denom == 0.0 {
            return frobenius(&rebuilt);
        }
        frobenius(&(rebuilt - &self.clamped)) / denom
    }
}

/// `Σ^{variant} = Σ₀₀ + ρ (Σ₀₁ + Σ₀₁ᵀ)` (or `Σ₀₀` alone) with `|S| = k`.
pub fn variant_covariance<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    rho: f64,
    variant: SdeVariant,
    k: usize,
    order: DiffusionOrder,
    mode: ExpectationMode,
) -> Result<DMatrix<f64>> {
    check_point(ens, x)?;
    let mut sigma = sigma00(ens, x, k);
    if order == DiffusionOrder::WithSigma01 && rho != 0.0 {
        let s01 = sigma01(ens, x, variant, k, mode)?.matrix;
        sigma += (&s01 + s01.transpose()) * rho;
    }
    Ok(symmetrize(&sigma))
}

/// Symmetric square root of `scale · Σ^{variant}(x)`; clamping is logged.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_factor<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    rho: f64,
    variant: SdeVariant,
    k: usize,
    scale: f64,
    order: DiffusionOrder,
    mode: ExpectationMode,
) -> Result<DiffusionFactor> {
    let sigma = variant_covariance(ens, x, rho, variant, k, order, mode)?;
    let root = psd_sqrt(&(&sigma * scale));
    if root.clamp_magnitude > 0.0 {
        log::debug!("diffusion clamp magnitude {:e}", root.clamp_magnitude);
    }
    Ok(DiffusionFactor {
        factor: root.factor,
        sigma,
        scale,
        clamped: root.clamped,
        clamp_magnitude: root.clamp_magnitude,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{HeteroscedasticQuadratic, HeteroscedasticSpec, ShiftedQuadratic, ShiftedQuadraticSpec};

    #[test]
    fn shifted_identity_sigma00_is_scaled_center_covariance() {
        let centers = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![1.0, 3.0], vec![-1.0, 0.0]];
        let q = ShiftedQuadratic::new(ShiftedQuadraticSpec::with_centers(centers.clone(), vec![1.0, 1.0])).unwrap();
        let n = centers.len() as f64;
        let mean: Vec<f64> = (0..2).map(|c| centers.iter().map(|b| b[c]).sum::<f64>() / n).collect();
        let mut cov = DMatrix::<f64>::zeros(2, 2);
        for b in &centers {
            for r in 0..2 {
                for c in 0..2 {
                    cov[(r, c)] += (b[r] - mean[r]) * (b[c] - mean[c]) / n;
                }
            }
        }
        // k = 1 draws a single sample, so Σ₀₀ is the population covariance
        let s = sigma00(&q, &[0.3, 0.4], 1);
        assert!(frobenius(&(s - &cov)) < 1e-12);
        let f = diffusion_factor(
            &q,
            &[0.3, 0.4],
            0.1,
            SdeVariant::MiniBatchUsam,
            1,
            0.01,
            DiffusionOrder::Sigma00Only,
            ExpectationMode::Exact,
        )
        .unwrap();
        assert!(frobenius(&(&f.factor * f.factor.transpose() - cov * 0.01)) < 1e-12);
    }

    #[test]
    fn n_variant_sigma01_matches_enumeration() {
        let h = HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![1.0, 2.0, 4.0, 7.0, 3.0], 1)).unwrap();
        let x = [0.8];
        let fast = sigma01(&h, &x, SdeVariant::NUsam, 2, ExpectationMode::Exact)
            .unwrap()
            .matrix[(0, 0)];
        // enumerate pairs: (ā_S − ā) x · (ā_S − ā) ā x
        let a = [1.0, 2.0, 4.0, 7.0, 3.0];
        let abar = a.iter().sum::<f64>() / 5.0;
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for i in 0..5 {
            for j in i + 1..5 {
                let s = 0.5 * (a[i] + a[j]) - abar;
                acc += s * x[0] * s * abar * x[0];
                cnt += 1.0;
            }
        }
        assert!((fast - acc / cnt).abs() < 1e-12, "{fast} vs {}", acc / cnt);
    }

    #[test]
    fn zero_noise_gives_zero_factor() {
        let h = HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![2.0], 4)).unwrap();
        let f = diffusion_factor(
            &h,
            &[1.0],
            0.1,
            SdeVariant::MiniBatchSam,
            2,
            0.1,
            DiffusionOrder::WithSigma01,
            ExpectationMode::Exact,
        )
        .unwrap();
        assert_eq!(frobenius(&f.factor), 0.0);
    }
}
