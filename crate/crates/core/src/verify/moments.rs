use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{check_point, Objective};
use crate::optimizers::{step, OptimizerConfig, Variant};
use crate::rng::{tag, SeedStream};
use crate::sde::{sam_drift, DiffusionOrder, SamKind, SdeModel, SdeVariant};
use crate::stochastic::ExpectationMode;

/// Allowance coefficient `c` in the `c·ρ²` slack of the first-moment check.
pub const RHO_SQUARED_ALLOWANCE: f64 = 1.0;

/// Drift `b(x)` predicted for the one-step mean `E[Δ]/η`, with standard
/// errors when the expectation inside it was sampled.
pub fn predicted_drift<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    cfg: &OptimizerConfig,
    mode: ExpectationMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_point(ens, x)?;
    let d = ens.dim();
    if cfg.variant == Variant::Sgd || cfg.rho == 0.0 {
        let mut g = vec![0.0; d];
        ens.mean_grad_into(x, &mut g);
        return Ok((g.iter().map(|v| -v).collect(), vec![0.0; d]));
    }
    let sv = SdeVariant::from_optimizer(cfg.variant)
        .ok_or_else(|| Error::Capability(format!("no SDE drift for {}", cfg.variant)))?;
    let model = SdeModel::new(ens, sv, cfg.eta, cfg.rho, cfg.batch_size)
        .with_micro_size(cfg.effective_micro_size())
        .with_expectation(mode);
    if sv.is_sam() {
        let kind = match sv {
            SdeVariant::NSam => SamKind::Full,
            SdeVariant::MSam => SamKind::Micro,
            _ => SamKind::MiniBatch,
        };
        let sd = sam_drift(ens, x, cfg.rho, kind, model.k(), mode)?;
        return Ok((sd.drift, sd.std_error));
    }
    Ok((model.drift(x)?, vec![0.0; d]))
}

/// Empirical versus predicted one-step moments at a fixed point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub x: Vec<f64>,
    pub variant: Variant,
    pub eta: f64,
    pub rho: f64,
    pub batch_size: usize,
    pub micro_size: usize,
    pub replicates: usize,
    /// `mean Δ / η`
    pub empirical_first_moment: Vec<f64>,
    pub empirical_first_se: Vec<f64>,
    /// `b(x)`, i.e. `−∇f^{variant}(x)`
    pub predicted_first_moment: Vec<f64>,
    pub predicted_first_se: Vec<f64>,
    /// `mean ΔΔᵀ / η²`, row-major
    pub empirical_second_moment: Vec<f64>,
    pub empirical_second_se: Vec<f64>,
    /// `b bᵀ + (scale/η) Σ^{variant}`, row-major
    pub predicted_second_moment: Vec<f64>,
    pub residual_first: f64,
    pub residual_first_se: f64,
    pub residual_second: f64,
    pub residual_second_se: f64,
}

impl MomentReport {
    /// Residual within 3 SE plus `c ρ²`.
    pub fn first_moment_consistent(&self) -> bool {
        self.residual_first <= 3.0 * self.residual_first_se + RHO_SQUARED_ALLOWANCE * self.rho * self.rho
    }

    pub fn second_moment_consistent(&self) -> bool {
        self.residual_second <= 3.0 * self.residual_second_se + RHO_SQUARED_ALLOWANCE * self.rho * self.rho
    }

    /// Residual within 3 SE of zero, with no allowance.
    pub fn first_moment_at_noise_floor(&self) -> bool {
        self.residual_first <= 3.0 * self.residual_first_se
    }
}

fn norm_and_se(res: &[f64], se: &[f64]) -> (f64, f64) {
    let r = res.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = se.iter().map(|v| v * v).sum::<f64>().sqrt();
    (r, s)
}

/// `R` independent one-step increments from `x`; replicate `r` draws its
/// batch from `SeedStream::new(seed).fork(REPLICATE).fork(r)`.
pub fn one_step_moments<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    cfg: &OptimizerConfig,
    replicates: usize,
    seed: u64,
    mode: ExpectationMode,
    order: DiffusionOrder,
) -> Result<MomentReport> {
    cfg.validate()?;
    check_point(ens, x)?;
    if replicates < 2 {
        return Err(Error::Config("need at least 2 replicates".into()));
    }
    if cfg.eta.is_nan() || cfg.eta <= 0.0 {
        return Err(Error::Config("moment matching needs eta > 0".into()));
    }
    let d = ens.dim();
    let root = SeedStream::new(seed).fork(tag::REPLICATE);
    // Welford accumulators for Δ/η and ΔΔᵀ/η².
    let mut m1 = vec![0.0; d];
    let mut s1 = vec![0.0; d];
    let mut m2 = vec![0.0; d * d];
    let mut s2 = vec![0.0; d * d];
    let mut inc = vec![0.0; d];
    for r in 0..replicates {
        let out = step(ens, x, cfg, &root.fork(r as u64))?;
        for j in 0..d {
            inc[j] = (out.x_next[j] - x[j]) / cfg.eta;
        }
        let cnt = (r + 1) as f64;
        for j in 0..d {
            let dv = inc[j] - m1[j];
            m1[j] += dv / cnt;
            s1[j] += dv * (inc[j] - m1[j]);
        }
        for a in 0..d {
            for b in 0..d {
                let v = inc[a] * inc[b];
                let idx = a * d + b;
                let dv = v - m2[idx];
                m2[idx] += dv / cnt;
                s2[idx] += dv * (v - m2[idx]);
            }
        }
    }
    let rr = replicates as f64;
    let se = |s: f64| (s / (rr - 1.0) / rr).sqrt();
    let se1: Vec<f64> = s1.iter().map(|v| se(*v)).collect();
    let se2: Vec<f64> = s2.iter().map(|v| se(*v)).collect();

    let (b, b_se) = predicted_drift(ens, x, cfg, mode)?;
    let (sigma, scale) = match SdeVariant::from_optimizer(cfg.variant) {
        Some(sv) if cfg.rho > 0.0 => {
            let model = SdeModel::new(ens, sv, cfg.eta, cfg.rho, cfg.batch_size)
                .with_micro_size(cfg.effective_micro_size())
                .with_order(order)
                .with_expectation(mode);
            (crate::sde::covariance_of(&model, x)?, model.scale())
        }
        _ => {
            let k = cfg.effective_micro_size();
            let scale = cfg.eta * k as f64 / cfg.batch_size as f64;
            (crate::sde::sigma00(ens, x, k), scale)
        }
    };
    let mut pred2 = vec![0.0; d * d];
    for a in 0..d {
        for c in 0..d {
            pred2[a * d + c] = b[a] * b[c] + scale / cfg.eta * sigma[(a, c)];
        }
    }
    let res1: Vec<f64> = m1.iter().zip(&b).map(|(e, p)| e - p).collect();
    let comb1: Vec<f64> = se1.iter().zip(&b_se).map(|(a, c)| (a * a + c * c).sqrt()).collect();
    let (residual_first, residual_first_se) = norm_and_se(&res1, &comb1);
    let res2: Vec<f64> = m2.iter().zip(&pred2).map(|(e, p)| e - p).collect();
    let (residual_second, residual_second_se) = norm_and_se(&res2, &se2);
    Ok(MomentReport {
        x: x.to_vec(),
        variant: cfg.variant,
        eta: cfg.eta,
        rho: cfg.rho,
        batch_size: cfg.batch_size,
        micro_size: cfg.effective_micro_size(),
        replicates,
        empirical_first_moment: m1,
        empirical_first_se: se1,
        predicted_first_moment: b,
        predicted_first_se: b_se,
        empirical_second_moment: m2,
        empirical_second_se: se2,
        predicted_second_moment: pred2,
        residual_first,
        residual_first_se,
        residual_second,
        residual_second_se,
    })
}

/// First-moment residuals at `(η, ρ)` and `(η/2, ρ/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentScaling {
    pub coarse: MomentReport,
    pub fine: MomentReport,
    /// `coarse.residual / fine.residual`
    pub shrink_factor: f64,
    /// Both residuals lie within 3 SE of zero, so no shrink is resolvable.
    pub at_noise_floor: bool,
    pub passed: bool,
}

/// Passes when the residual shrinks by at least `1.5×`, or when both
/// residuals are already statistically indistinguishable from zero.
pub fn moment_scaling<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    cfg: &OptimizerConfig,
    replicates: usize,
    seed: u64,
    mode: ExpectationMode,
) -> Result<MomentScaling> {
    let coarse = one_step_moments(ens, x, cfg, replicates, seed, mode, DiffusionOrder::Sigma00Only)?;
    let mut half = cfg.clone();
    half.eta *= 0.5;
    half.rho *= 0.5;
    let fine = one_step_moments(
        ens,
        x,
        &half,
        replicates,
        seed ^ 0x5eed,
        mode,
        DiffusionOrder::Sigma00Only,
    )?;
    let shrink_factor = coarse.residual_first / fine.residual_first;
    let at_noise_floor = coarse.first_moment_at_noise_floor() && fine.first_moment_at_noise_floor();
    let passed = shrink_factor >= 1.5 || at_noise_floor;
    Ok(MomentScaling {
        coarse,
        fine,
        shrink_factor,
        at_noise_floor,
        passed,
    })
}
