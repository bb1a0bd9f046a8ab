//! Zeroth-order per-sample gradient-norm estimation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{check_index, check_point, Objective};
use crate::rng::{tag, SeedStream};

/// Largest dimension for which all `2^d` Rademacher vectors are enumerated.
pub const EXHAUSTIVE_PROBE_MAX_DIM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDistribution {
    #[default]
    Rademacher,
    Gaussian,
}

/// Which probe directions the estimator averages over.
#[derive(Debug, Clone, Copy)]
pub enum Probes {
    /// `count` i.i.d. probes; probe `q` is drawn from `stream.fork(q)`.
    Random {
        count: usize,
        distribution: ProbeDistribution,
        stream: SeedStream,
    },
    /// Every vector in `{±1}^d`, giving the exact Rademacher expectation.
    ExhaustiveRademacher,
}

pub fn draw_probe(d: usize, distribution: ProbeDistribution, stream: &SeedStream) -> Vec<f64> {
    let mut rng = stream.rng();
    match distribution {
        ProbeDistribution::Rademacher => (0..d).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
        ProbeDistribution::Gaussian => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

/// `z` for bit pattern `bits`: bit `j` set means `z_j = −1`.
pub fn rademacher_from_bits(d: usize, bits: u64) -> Vec<f64> {
    (0..d).map(|j| if bits >> j & 1 == 1 { -1.0 } else { 1.0 }).collect()
}

/// Mean of the squared forward-difference quotient
/// `((f(x + δz) − f(x))/δ)²` over the probes.
pub fn fd_squared_estimate(loss: impl Fn(&[f64]) -> f64, x: &[f64], delta: f64, probes: Probes) -> Result<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {delta}"
        )));
    }
    let d = x.len();
    let f0 = loss(x);
    let mut shifted = x.to_vec();
    let mut quotient_sq = |z: &[f64]| {
        for j in 0..d {
            shifted[j] = x[j] + delta * z[j];
        }
        let q = (loss(&shifted) - f0) / delta;
        q * q
    };
    match probes {
        Probes::Random {
            count,
            distribution,
            stream,
        } => {
            if count == 0 {
                return Err(Error::Config("need at least one probe".into()));
            }
            let total: f64 = (0..count)
                .map(|q| quotient_sq(&draw_probe(d, distribution, &stream.fork(q as u64))))
                .sum();
            Ok(total / count as f64)
        }
        Probes::ExhaustiveRademacher => {
            if d > EXHAUSTIVE_PROBE_MAX_DIM {
                return Err(Error::Capability(format!(
                    "exhaustive Rademacher enumeration limited to d ≤ {EXHAUSTIVE_PROBE_MAX_DIM}"
                )));
            }
            let count = 1u64 << d;
            let total: f64 = (0..count).map(|b| quotient_sq(&rademacher_from_bits(d, b))).sum();
            Ok(total / count as f64)
        }
    }
}

/// `√((1/Q) Σ_q ((f(x + δz_q) − f(x))/δ)²)` for an arbitrary loss.
pub fn fd_norm_estimate_fn(loss: impl Fn(&[f64]) -> f64, x: &[f64], delta: f64, probes: Probes) -> Result<f64> {
    fd_squared_estimate(loss, x, delta, probes).map(f64::sqrt)
}

/// Estimate of `‖∇f_i(x)‖` from `q_probes` Rademacher forward differences.
/// Probe `q` of sample `i` is drawn from `stream.fork2(i, q)`.
pub fn fd_norm_estimate<O: Objective + ?Sized>(
    ens: &O,
    i: usize,
    x: &[f64],
    delta: f64,
    q_probes: usize,
    stream: &SeedStream,
) -> Result<f64> {
    check_index(ens, i)?;
    check_point(ens, x)?;
    fd_norm_estimate_fn(
        |p| ens.sample_loss(i, p),
        x,
        delta,
        Probes::Random {
            count: q_probes,
            distribution: ProbeDistribution::Rademacher,
            stream: stream.fork2(tag::PROBE, i as u64),
        },
    )
}

/// `E[(zᵀv)⁴]` over all `2^d` Rademacher vectors.
pub fn rademacher_fourth_moment_exhaustive(v: &[f64]) -> Result<f64> {
    let d = v.len();
    if d > EXHAUSTIVE_PROBE_MAX_DIM {
        return Err(Error::Capability("dimension too large for enumeration".into()));
    }
    let count = 1u64 << d;
    let total: f64 = (0..count)
        .map(|b| {
            let p: f64 = rademacher_from_bits(d, b).iter().zip(v).map(|(z, vi)| z * vi).sum();
            p.powi(4)
        })
        .sum();
    Ok(total / count as f64)
}

/// Monte Carlo `E[(zᵀv)⁴]` for `z ~ N(0, I)`, with its standard error.
pub fn gaussian_fourth_moment_mc(v: &[f64], draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = SeedStream::new(seed).fork(tag::PROBE).rng();
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for j in 0..draws {
        let p: f64 = v.iter().map(|vi| vi * rng.sample::<f64, _>(StandardNormal)).sum();
        let val = p.powi(4);
        let delta = val - mean;
        mean += delta / (j + 1) as f64;
        m2 += delta * (val - mean);
    }
    let se = (m2 / (draws - 1) as f64 / draws as f64).sqrt();
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_estimate_is_exact_for_linear_losses() {
        let v = [0.7, -1.3, 2.2];
        let loss = |x: &[f64]| v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let est = fd_norm_estimate_fn(loss, &[0.1, 0.2, -0.4], 1e-3, Probes::ExhaustiveRademacher).unwrap();
        let exact = (0.49f64 + 1.69 + 4.84).sqrt();
        assert!((est - exact).abs() < 1e-12, "{est} vs {exact}");
    }

    #[test]
    fn constant_loss_gives_zero() {
        let probes = Probes::Random {
            count: 3,
            distribution: ProbeDistribution::Rademacher,
            stream: SeedStream::new(1),
        };
        assert_eq!(fd_norm_estimate_fn(|_| 4.2, &[1.0, 2.0], 1e-2, probes).unwrap(), 0.0);
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let r = fd_norm_estimate_fn(|_| 0.0, &[1.0], 0.0, Probes::ExhaustiveRademacher);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn fourth_moments_for_unit_pair() {
        assert_eq!(rademacher_fourth_moment_exhaustive(&[1.0, 1.0]).unwrap(), 8.0);
        let v = [0.5, -1.0, 2.0];
        let expected: f64 =
            v.iter().map(|a: &f64| a.powi(4)).sum::<f64>() + 6.0 * (0.25 * 1.0 + 0.25 * 4.0 + 1.0 * 4.0);
        assert!((rademacher_fourth_moment_exhaustive(&v).unwrap() - expected).abs() < 1e-12);
    }
}
