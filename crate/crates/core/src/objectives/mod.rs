//! Synthetic per-sample objective ensembles with exact loss, gradient and
//! Hessian-vector-product oracles.
//!
//! Every family implements [`Objective`]. Population-level quantities
//! (mean loss, mean gradient, noise covariance, its trace and the trace's
//! gradient) have summation defaults that families override with closed
//! forms where one exists.

mod mlp;
mod quadratic;
mod two_basin;

pub use mlp::{TinyMlp, TinyMlpSpec, MLP_DIM, MLP_HIDDEN, MLP_INPUT};
pub use quadratic::{HeteroscedasticQuadratic, HeteroscedasticSpec, ShiftedQuadratic, ShiftedQuadraticSpec};
pub use two_basin::{TwoBasin, TwoBasinSpec};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, RunningMean};

/// A finite point in parameter space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ParameterVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(p: ParameterVector) -> Self {
        p.0
    }
}

/// Per-sample differentiable losses `f_i`, `i in 0..n`, on `R^d`.
///
/// The `*_into` methods are unchecked hot paths: callers guarantee that
/// slice lengths match [`Objective::dim`] and `i < n`. Use the free
/// functions in this module for validated access.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn num_samples(&self) -> usize;

    fn sample_loss(&self, i: usize, x: &[f64]) -> f64;
    fn sample_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]);
    fn sample_hvp_into(&self, i: usize, x: &[f64], v: &[f64], out: &mut [f64]);

    fn mean_loss(&self, x: &[f64]) -> f64 {
        crate::linalg::running_mean_scalar((0..self.num_samples()).map(|i| self.sample_loss(i, x)))
    }

    fn mean_grad_into(&self, x: &[f64], out: &mut [f64]) {
        let mut acc = RunningMean::new(self.dim());
        let mut g = vec![0.0; self.dim()];
        for i in 0..self.num_samples() {
            self.sample_grad_into(i, x, &mut g);
            acc.push(&g);
        }
        out.copy_from_slice(acc.mean());
    }

    /// `∇²f(x) v` for the population loss.
    fn mean_hvp_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let mut acc = RunningMean::new(self.dim());
        let mut h = vec![0.0; self.dim()];
        for i in 0..self.num_samples() {
            self.sample_hvp_into(i, x, v, &mut h);
            acc.push(&h);
        }
        out.copy_from_slice(acc.mean());
    }

    /// `V(x) = (1/n) Σ g_i g_iᵀ − ḡ ḡᵀ`.
    fn noise_covariance(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let n = self.num_samples();
        let mut fisher = DMatrix::<f64>::zeros(d, d);
        let mut g = vec![0.0; d];
        for i in 0..n {
            self.sample_grad_into(i, x, &mut g);
            for r in 0..d {
                for c in 0..d {
                    fisher[(r, c)] += g[r] * g[c];
                }
            }
        }
        fisher /= n as f64;
        let mut mean = vec![0.0; d];
        self.mean_grad_into(x, &mut mean);
        for r in 0..d {
            for c in 0..d {
                fisher[(r, c)] -= mean[r] * mean[c];
            }
        }
        fisher
    }

    /// `tr V(x)`, unclamped.
    fn noise_trace(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut g = vec![0.0; d];
        let sq = crate::linalg::running_mean_scalar((0..self.num_samples()).map(|i| {
            self.sample_grad_into(i, x, &mut g);
            dot(&g, &g)
        }));
        let mut mean = vec![0.0; d];
        self.mean_grad_into(x, &mut mean);
        sq - dot(&mean, &mean)
    }

    /// `∇ tr V(x) = (2/n) Σ ∇²f_i ∇f_i − 2 ∇²f ∇f`, exact from HVPs.
    fn noise_trace_grad_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut g = vec![0.0; d];
        let mut hg = vec![0.0; d];
        let mut acc = RunningMean::new(d);
        for i in 0..self.num_samples() {
            self.sample_grad_into(i, x, &mut g);
            self.sample_hvp_into(i, x, &g, &mut hg);
            acc.push(&hg);
        }
        let mut mean = vec![0.0; d];
        self.mean_grad_into(x, &mut mean);
        self.mean_hvp_into(x, &mean, &mut hg);
        for j in 0..d {
            out[j] = 2.0 * (acc.mean()[j] - hg[j]);
        }
    }

    /// Closed form of `E‖∇f_γ(x)‖` over uniform size-`k` subsets, when the
    /// family has one.
    fn expected_batch_norm_closed_form(&self, _x: &[f64], _k: usize) -> Option<f64> {
        None
    }
}

/// Serializable recipe for an ensemble. Round-trips byte-identically
/// through JSON and fully determines the constructed ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EnsembleSpec {
    ShiftedQuadratic(ShiftedQuadraticSpec),
    HeteroscedasticQuadratic(HeteroscedasticSpec),
    TwoBasin(TwoBasinSpec),
    TinyMlp(TinyMlpSpec),
}

impl EnsembleSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("descriptor serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Descriptor(e.to_string()))
    }

    pub fn build(&self) -> Result<Ensemble> {
        Ensemble::from_spec(self)
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            EnsembleSpec::ShiftedQuadratic(_) => "shifted_quadratic",
            EnsembleSpec::HeteroscedasticQuadratic(_) => "heteroscedastic_quadratic",
            EnsembleSpec::TwoBasin(_) => "two_basin",
            EnsembleSpec::TinyMlp(_) => "tiny_mlp",
        }
    }
}

/// One of the four synthetic families, immutable after construction.
#[derive(Debug, Clone)]
pub enum Ensemble {
    ShiftedQuadratic(ShiftedQuadratic),
    HeteroscedasticQuadratic(HeteroscedasticQuadratic),
    TwoBasin(TwoBasin),
    TinyMlp(TinyMlp),
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            Ensemble::ShiftedQuadratic($e) => $body,
            Ensemble::HeteroscedasticQuadratic($e) => $body,
            Ensemble::TwoBasin($e) => $body,
            Ensemble::TinyMlp($e) => $body,
        }
    };
}

impl Ensemble {
    pub fn from_spec(spec: &EnsembleSpec) -> Result<Self> {
        Ok(match spec {
            EnsembleSpec::ShiftedQuadratic(s) => Ensemble::ShiftedQuadratic(ShiftedQuadratic::new(s.clone())?),
            EnsembleSpec::HeteroscedasticQuadratic(s) => {
                Ensemble::HeteroscedasticQuadratic(HeteroscedasticQuadratic::new(s.clone())?)
            }
            EnsembleSpec::TwoBasin(s) => Ensemble::TwoBasin(TwoBasin::new(s.clone())?),
            EnsembleSpec::TinyMlp(s) => Ensemble::TinyMlp(TinyMlp::new(s.clone())?),
        })
    }

    pub fn spec(&self) -> EnsembleSpec {
        match self {
            Ensemble::ShiftedQuadratic(e) => EnsembleSpec::ShiftedQuadratic(e.spec().clone()),
            Ensemble::HeteroscedasticQuadratic(e) => EnsembleSpec::HeteroscedasticQuadratic(e.spec().clone()),
            Ensemble::TwoBasin(e) => EnsembleSpec::TwoBasin(e.spec().clone()),
            Ensemble::TinyMlp(e) => EnsembleSpec::TinyMlp(e.spec().clone()),
        }
    }

    /// JSON descriptor `{family, seed, params...}`.
    pub fn descriptor(&self) -> String {
        self.spec().to_json()
    }

    /// A natural starting point for the family (MLP construction point,
    /// TwoBasin sharp minimum, otherwise a unit vector).
    pub fn default_start(&self) -> Vec<f64> {
        match self {
            Ensemble::TinyMlp(e) => e.initial_point(),
            Ensemble::TwoBasin(e) => e.sharp_minimum().to_vec(),
            other => {
                let mut x = vec![0.0; other.dim()];
                x[0] = 1.0;
                x
            }
        }
    }
}

impl Objective for Ensemble {
    fn dim(&self) -> usize {
        dispatch!(self, e => e.dim())
    }
    fn num_samples(&self) -> usize {
        dispatch!(self, e => e.num_samples())
    }
    fn sample_loss(&self, i: usize, x: &[f64]) -> f64 {
        dispatch!(self, e => e.sample_loss(i, x))
    }
    fn sample_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        dispatch!(self, e => e.sample_grad_into(i, x, out))
    }
    fn sample_hvp_into(&self, i: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        dispatch!(self, e => e.sample_hvp_into(i, x, v, out))
    }
    fn mean_loss(&self, x: &[f64]) -> f64 {
        dispatch!(self, e => e.mean_loss(x))
    }
    fn mean_grad_into(&self, x: &[f64], out: &mut [f64]) {
        dispatch!(self, e => e.mean_grad_into(x, out))
    }
    fn mean_hvp_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        dispatch!(self, e => e.mean_hvp_into(x, v, out))
    }
    fn noise_covariance(&self, x: &[f64]) -> DMatrix<f64> {
        dispatch!(self, e => e.noise_covariance(x))
    }
    fn noise_trace(&self, x: &[f64]) -> f64 {
        dispatch!(self, e => e.noise_trace(x))
    }
    fn noise_trace_grad_into(&self, x: &[f64], out: &mut [f64]) {
        dispatch!(self, e => e.noise_trace_grad_into(x, out))
    }
    fn expected_batch_norm_closed_form(&self, x: &[f64], k: usize) -> Option<f64> {
        dispatch!(self, e => e.expected_batch_norm_closed_form(x, k))
    }
}

pub(crate) fn check_point<O: Objective + ?Sized>(ens: &O, x: &[f64]) -> Result<()> {
    if x.len() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("evaluation point"));
    }
    Ok(())
}

pub(crate) fn check_index<O: Objective + ?Sized>(ens: &O, i: usize) -> Result<()> {
    if i >= ens.num_samples() {
        return Err(Error::IndexOutOfRange {
            index: i,
            n: ens.num_samples(),
        });
    }
    Ok(())
}

/// `f(x) = (1/n) Σ f_i(x)`.
pub fn full_loss<O: Objective + ?Sized>(ens: &O, x: &[f64]) -> Result<f64> {
    check_point(ens, x)?;
    Ok(ens.mean_loss(x))
}

/// `∇f(x)`, the exact mean of the per-sample gradients.
pub fn full_grad<O: Objective + ?Sized>(ens: &O, x: &[f64]) -> Result<Vec<f64>> {
    check_point(ens, x)?;
    let mut out = vec![0.0; ens.dim()];
    ens.mean_grad_into(x, &mut out);
    Ok(out)
}

pub fn sample_loss<O: Objective + ?Sized>(ens: &O, i: usize, x: &[f64]) -> Result<f64> {
    check_index(ens, i)?;
    check_point(ens, x)?;
    Ok(ens.sample_loss(i, x))
}

pub fn sample_grad<O: Objective + ?Sized>(ens: &O, i: usize, x: &[f64]) -> Result<Vec<f64>> {
    check_index(ens, i)?;
    check_point(ens, x)?;
    let mut out = vec![0.0; ens.dim()];
    ens.sample_grad_into(i, x, &mut out);
    Ok(out)
}

/// `∇²f_i(x) v`.
pub fn sample_hvp<O: Objective + ?Sized>(ens: &O, i: usize, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_index(ens, i)?;
    check_point(ens, x)?;
    if v.len() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            got: v.len(),
        });
    }
    let mut out = vec![0.0; ens.dim()];
    ens.sample_hvp_into(i, x, v, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_vector_rejects_non_finite_and_empty() {
        assert!(ParameterVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParameterVector::new(vec![f64::INFINITY]).is_err());
        assert!(ParameterVector::new(vec![]).is_err());
        assert_eq!(ParameterVector::new(vec![1.0, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn unknown_descriptor_fields_are_rejected() {
        let bad = r#"{"family":"heteroscedastic_quadratic","seed":0,"curvatures":[1.0],"copies":1,"bogus":3}"#;
        assert!(EnsembleSpec::from_json(bad).is_err());
        let bad = r#"{"family":"nope","seed":0}"#;
        assert!(EnsembleSpec::from_json(bad).is_err());
    }

    #[test]
    fn checked_accessors_report_contract_violations() {
        let ens = EnsembleSpec::HeteroscedasticQuadratic(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 1))
            .build()
            .unwrap();
        assert_eq!(
            full_loss(&ens, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        );
        assert_eq!(
            sample_grad(&ens, 2, &[1.0]),
            Err(Error::IndexOutOfRange { index: 2, n: 2 })
        );
        assert!(sample_hvp(&ens, 0, &[1.0], &[1.0, 1.0]).is_err());
        assert!(full_grad(&ens, &[f64::NAN]).is_err());
    }
}
