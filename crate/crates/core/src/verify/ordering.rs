use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::stochastic::{expected_batch_grad_norm, grad_stats, Estimate, ExpectationMode};

/// Relative noise trace below which an ensemble counts as noiseless.
const DEGENERATE_TRACE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingRow {
    pub k: usize,
    /// `ρ / 2k`, the USAM weight on `tr V`.
    pub usam_coefficient: f64,
    /// `E‖∇f_I(x)‖` with `|I| = k`.
    pub sam_expected_norm: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub rho: f64,
    pub x: Vec<f64>,
    /// Rows sorted by decreasing `k`.
    pub rows: Vec<OrderingRow>,
    pub usam_strictly_increasing: bool,
    /// `None` when the ensemble is noiseless and the check is skipped.
    pub sam_strictly_increasing: Option<bool>,
    /// Non-decreasing as `k` decreases, allowing three standard errors.
    pub sam_monotone_within_se: Option<bool>,
}

/// Regularization strength per micro-batch size, for both families.
/// A step counts as strictly increasing when the gain exceeds three
/// combined standard errors (zero for exact values).
pub fn regularization_ordering<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    rho: f64,
    k_list: &[usize],
    mode: ExpectationMode,
) -> Result<OrderingReport> {
    if k_list.is_empty() {
        return Err(Error::Config("k_list must not be empty".into()));
    }
    let mut ks = k_list.to_vec();
    ks.sort_unstable_by(|a, b| b.cmp(a));
    ks.dedup();
    let rows = ks
        .iter()
        .map(|&k| {
            Ok(OrderingRow {
                k,
                usam_coefficient: rho / (2.0 * k as f64),
                sam_expected_norm: expected_batch_grad_norm(ens, x, k, mode)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = grad_stats(ens, x)?;
    let g2: f64 = stats.mean_grad.iter().map(|v| v * v).sum();
    let degenerate = stats.trace <= DEGENERATE_TRACE * (1.0 + g2);
    let usam_strictly_increasing = rows.windows(2).all(|w| w[1].usam_coefficient > w[0].usam_coefficient);
    let (strict, weak) = if degenerate {
        (None, None)
    } else {
        let gaps = rows.windows(2).map(|w| {
            let (a, b) = (&w[0].sam_expected_norm, &w[1].sam_expected_norm);
            let tol = 3.0 * (a.std_error * a.std_error + b.std_error * b.std_error).sqrt();
            (b.mean - a.mean, tol)
        });
        let gaps: Vec<(f64, f64)> = gaps.collect();
        (
            Some(gaps.iter().all(|(d, tol)| *d > *tol)),
            Some(gaps.iter().all(|(d, tol)| *d >= -*tol)),
        )
    };
    Ok(OrderingReport {
        rho,
        x: x.to_vec(),
        rows,
        usam_strictly_increasing,
        sam_strictly_increasing: strict,
        sam_monotone_within_se: weak,
    })
}
