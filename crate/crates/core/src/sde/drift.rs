use crate::error::{Error, Result};
use crate::linalg::{norm, RunningMean};
use crate::objectives::{check_point, Objective};
use crate::stochastic::{expected_batch_grad_norm, subset_mean, ExpectationMode};

/// Relative central-difference step for gradients of expected norms.
pub const FD_STEP_SCALE: f64 = 1e-5;

/// `−∇f − ρ ∇²f ∇f − (ρ/2k) ∇tr V`.
pub fn usam_drift<O: Objective + ?Sized>(ens: &O, x: &[f64], rho: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("usam_drift needs k ≥ 1".into()));
    }
    let mut out = n_usam_drift(ens, x, rho)?;
    if rho != 0.0 {
        let mut tg = vec![0.0; ens.dim()];
        ens.noise_trace_grad_into(x, &mut tg);
        let c = rho / (2.0 * k as f64);
        for (o, t) in out.iter_mut().zip(&tg) {
            *o -= c * t;
        }
    }
    Ok(out)
}

/// `−∇f − ρ ∇²f ∇f`.
pub fn n_usam_drift<O: Objective + ?Sized>(ens: &O, x: &[f64], rho: f64) -> Result<Vec<f64>> {
    check_point(ens, x)?;
    let d = ens.dim();
    let mut g = vec![0.0; d];
    ens.mean_grad_into(x, &mut g);
    if rho == 0.0 {
        return Ok(g.iter().map(|v| -v).collect());
    }
    let mut hg = vec![0.0; d];
    ens.mean_hvp_into(x, &g, &mut hg);
    Ok(g.iter().zip(&hg).map(|(a, b)| -a - rho * b).collect())
}

/// Which expected-norm regularizer the SAM drift differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamKind {
    /// `ρ E‖∇f_γ‖` with `|γ| = k`.
    MiniBatch,
    /// `ρ ‖∇f‖`.
    Full,
    /// `ρ E‖∇f_I‖` with `|I| = m = k`.
    Micro,
}

/// A SAM drift with per-coordinate standard errors from the expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct SamDrift {
    pub drift: Vec<f64>,
    pub std_error: Vec<f64>,
    pub exact: bool,
}

/// `−∇(f + ρ R(x))`, where `R` is the variant's norm regularizer.
///
/// For the full-batch form `∇‖∇f‖ = ∇²f ∇f / ‖∇f‖` is evaluated directly
/// and fails at `∇f = 0`. For the mini-batch and micro-batch forms the
/// gradient of `E‖∇f_S‖` is a central difference with step
/// `1e-5 (1 + ‖x‖)`, reusing the same subsets at `x ± h e_j`.
pub fn sam_drift<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    rho: f64,
    kind: SamKind,
    k: usize,
    mode: ExpectationMode,
) -> Result<SamDrift> {
    check_point(ens, x)?;
    let d = ens.dim();
    let mut g = vec![0.0; d];
    ens.mean_grad_into(x, &mut g);
    let mut drift: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut std_error = vec![0.0; d];
    if rho == 0.0 {
        return Ok(SamDrift {
            drift,
            std_error,
            exact: true,
        });
    }
    let exact = match kind {
        SamKind::Full => {
            let gn = norm(&g);
            if gn < crate::optimizers::DEFAULT_GRAD_NORM_FLOOR {
                return Err(Error::NonDifferentiable(format!(
                    "‖∇f‖ = {gn:e} at x; the n-SAM regularizer has no gradient here"
                )));
            }
            let mut hg = vec![0.0; d];
            ens.mean_hvp_into(x, &g, &mut hg);
            for (o, v) in drift.iter_mut().zip(&hg) {
                *o -= rho * v / gn;
            }
            true
        }
        SamKind::MiniBatch | SamKind::Micro => {
            let grad = expected_norm_gradient(ens, x, k, mode)?;
            for j in 0..d {
                drift[j] -= rho * grad.mean[j];
                std_error[j] = rho * grad.std_error[j];
            }
            grad.exact
        }
    };
    Ok(SamDrift {
        drift,
        std_error,
        exact,
    })
}

/// A vector expectation with per-coordinate standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub exact: bool,
}

/// Central-difference gradient of `x ↦ E‖∇f_S(x)‖`, `|S| = k`, with common
/// subsets at both evaluation points.
pub fn expected_norm_gradient<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    k: usize,
    mode: ExpectationMode,
) -> Result<VectorEstimate> {
    check_point(ens, x)?;
    let d = ens.dim();
    let n = ens.num_samples();
    let h = FD_STEP_SCALE * (1.0 + norm(x));
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    let mut mean = vec![0.0; d];
    let mut std_error = vec![0.0; d];
    let mut exact = true;
    if ens.expected_batch_norm_closed_form(x, k).is_some() {
        for j in 0..d {
            plus[j] = x[j] + h;
            minus[j] = x[j] - h;
            let fp = ens.expected_batch_norm_closed_form(&plus, k).expect("closed form");
            let fm = ens.expected_batch_norm_closed_form(&minus, k).expect("closed form");
            mean[j] = (fp - fm) / (2.0 * h);
            plus[j] = x[j];
            minus[j] = x[j];
        }
        return Ok(VectorEstimate { mean, std_error, exact });
    }
    let mut gp = vec![0.0; n * d];
    let mut gm = vec![0.0; n * d];
    let mut acc_p = RunningMean::new(d);
    let mut acc_m = RunningMean::new(d);
    for j in 0..d {
        plus[j] = x[j] + h;
        minus[j] = x[j] - h;
        for i in 0..n {
            ens.sample_grad_into(i, &plus, &mut gp[i * d..(i + 1) * d]);
            ens.sample_grad_into(i, &minus, &mut gm[i * d..(i + 1) * d]);
        }
        let est = subset_mean(ens, k, mode, |s| {
            acc_p.reset();
            acc_m.reset();
            for &i in s {
                acc_p.push(&gp[i * d..(i + 1) * d]);
                acc_m.push(&gm[i * d..(i + 1) * d]);
            }
            (norm(acc_p.mean()) - norm(acc_m.mean())) / (2.0 * h)
        })?;
        mean[j] = est.mean;
        std_error[j] = est.std_error;
        exact &= est.exact;
        plus[j] = x[j];
        minus[j] = x[j];
    }
    Ok(VectorEstimate { mean, std_error, exact })
}

/// `E[∇²f_S ∇f_S / ‖∇f_S‖]` over `|S| = k`; subsets with a zero gradient
/// contribute zero. Equals `∇E‖∇f_S‖` wherever no batch gradient vanishes.
pub fn expected_normalized_hvp<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    k: usize,
    mode: ExpectationMode,
) -> Result<VectorEstimate> {
    check_point(ens, x)?;
    let d = ens.dim();
    let n = ens.num_samples();
    let mut grads = vec![0.0; n * d];
    for i in 0..n {
        ens.sample_grad_into(i, x, &mut grads[i * d..(i + 1) * d]);
    }
    let mut acc = RunningMean::new(d);
    let mut hacc = RunningMean::new(d);
    let mut hv = vec![0.0; d];
    let mut mean = vec![0.0; d];
    let mut std_error = vec![0.0; d];
    let mut exact = true;
    // One pass per coordinate keeps the scalar subset_mean contract.
    for j in 0..d {
        let est = subset_mean(ens, k, mode, |s| {
            acc.reset();
            for &i in s {
                acc.push(&grads[i * d..(i + 1) * d]);
            }
            let gn = norm(acc.mean());
            if gn == 0.0 {
                return 0.0;
            }
            hacc.reset();
            for &i in s {
                ens.sample_hvp_into(i, x, acc.mean(), &mut hv);
                hacc.push(&hv);
            }
            hacc.mean()[j] / gn
        })?;
        mean[j] = est.mean;
        std_error[j] = est.std_error;
        exact &= est.exact;
    }
    Ok(VectorEstimate { mean, std_error, exact })
}

/// `E‖∇f_S(x)‖` for the drift's regularizer, mean-gradient form.
pub fn sam_regularizer<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    kind: SamKind,
    k: usize,
    mode: ExpectationMode,
) -> Result<f64> {
    match kind {
        SamKind::Full => {
            let mut g = vec![0.0; ens.dim()];
            ens.mean_grad_into(x, &mut g);
            Ok(norm(&g))
        }
        SamKind::MiniBatch | SamKind::Micro => match ens.expected_batch_norm_closed_form(x, k) {
            Some(v) => Ok(v),
            None => expected_batch_grad_norm(ens, x, k, mode).map(|e| e.mean),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{HeteroscedasticQuadratic, HeteroscedasticSpec};

    fn pair() -> HeteroscedasticQuadratic {
        HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 5000)).unwrap()
    }

    #[test]
    fn usam_drift_hand_value() {
        let h = pair();
        let d = usam_drift(&h, &[1.0], 0.1, 2).unwrap();
        // ā = 2, Var(a) = 1: −(2 + 0.1·4 + 0.1/2·2)
        assert!((d[0] + 2.45).abs() < 1e-12, "{}", d[0]);
        let n = n_usam_drift(&h, &[1.0], 0.1).unwrap();
        assert!((n[0] + 2.4).abs() < 1e-12);
        assert_eq!(usam_drift(&h, &[1.0], 0.0, 2).unwrap(), vec![-2.0]);
    }

    #[test]
    fn n_sam_drift_for_single_quadratic() {
        let q = HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![1.0], 1)).unwrap();
        for x in [-1.5, 0.7, 2.0] {
            let d = sam_drift(&q, &[x], 0.1, SamKind::Full, 1, ExpectationMode::Exact).unwrap();
            assert!((d.drift[0] + x + 0.1 * f64::signum(x)).abs() < 1e-14);
        }
        let err = sam_drift(&q, &[0.0], 0.1, SamKind::Full, 1, ExpectationMode::Exact);
        assert!(matches!(err, Err(Error::NonDifferentiable(_))));
    }
}
