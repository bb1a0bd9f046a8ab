//! Discrete update rules: SGD, the SAM and USAM families, and Reweighted-SAM.
//!
//! Every step function maps `(x_k, γ_k)` to `x_{k+1}`. Batch means are
//! accumulated as running means in index order, so identical inputs give
//! identical bits regardless of how they were grouped.

pub mod fd;
pub mod gibbs;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, RunningMean};
use crate::objectives::{check_point, Objective};
use crate::rng::SeedStream;
use crate::stochastic::{batch_grad_into, sample_batch, BatchPlan};

pub use gibbs::{gibbs_weights, GibbsWeights, ScoreNormalization};

pub const DEFAULT_GRAD_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sgd,
    #[serde(rename = "minibatch_sam")]
    MiniBatchSam,
    NSam,
    MSam,
    #[serde(rename = "minibatch_usam")]
    MiniBatchUsam,
    NUsam,
    MUsam,
    ReweightedSam,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Sgd,
        Variant::MiniBatchSam,
        Variant::NSam,
        Variant::MSam,
        Variant::MiniBatchUsam,
        Variant::NUsam,
        Variant::MUsam,
        Variant::ReweightedSam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::MiniBatchSam => "minibatch_sam",
            Variant::NSam => "n_sam",
            Variant::MSam => "m_sam",
            Variant::MiniBatchUsam => "minibatch_usam",
            Variant::NUsam => "n_usam",
            Variant::MUsam => "m_usam",
            Variant::ReweightedSam => "reweighted_sam",
        }
    }

    pub fn uses_micro_batches(self) -> bool {
        matches!(self, Variant::MSam | Variant::MUsam)
    }

    pub fn is_unnormalized(self) -> bool {
        matches!(self, Variant::MiniBatchUsam | Variant::NUsam | Variant::MUsam)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown optimizer variant `{s}`")))
    }
}

fn default_floor() -> f64 {
    DEFAULT_GRAD_NORM_FLOOR
}

fn default_probes() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub variant: Variant,
    pub eta: f64,
    #[serde(default)]
    pub rho: f64,
    pub batch_size: usize,
    /// Micro-batch size `m`; only read by the m-variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_size: Option<usize>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default = "default_probes")]
    pub q_probes: usize,
    #[serde(default = "default_floor")]
    pub grad_norm_floor: f64,
    #[serde(default)]
    pub normalization: ScoreNormalization,
}

impl OptimizerConfig {
    pub fn new(variant: Variant, eta: f64, rho: f64, batch_size: usize) -> Self {
        Self {
            variant,
            eta,
            rho,
            batch_size,
            micro_size: None,
            lambda: 0.0,
            delta: None,
            q_probes: 1,
            grad_norm_floor: DEFAULT_GRAD_NORM_FLOOR,
            normalization: ScoreNormalization::Standardize,
        }
    }

    pub fn with_micro_size(mut self, m: usize) -> Self {
        self.micro_size = Some(m);
        self
    }

    pub fn with_reweighting(mut self, lambda: f64, delta: f64, q_probes: usize) -> Self {
        self.lambda = lambda;
        self.delta = Some(delta);
        self.q_probes = q_probes;
        self
    }

    /// Effective micro-batch size: `m` for the m-variants, `|γ|` otherwise.
    pub fn effective_micro_size(&self) -> usize {
        if self.variant.uses_micro_batches() {
            self.micro_size.unwrap_or(self.batch_size)
        } else {
            self.batch_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad(format!("eta must be finite and ≥ 0, got {}", self.eta));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return bad(format!("rho must be finite and ≥ 0, got {}", self.rho));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(self.grad_norm_floor.is_finite() && self.grad_norm_floor >= 0.0) {
            return bad("grad_norm_floor must be ≥ 0".into());
        }
        if self.variant.uses_micro_batches() {
            match self.micro_size {
                None => return bad(format!("{} requires micro_size", self.variant)),
                Some(m) if m == 0 || !self.batch_size.is_multiple_of(m) => {
                    return bad(format!("micro_size {m} must divide batch_size {}", self.batch_size))
                }
                _ => {}
            }
        }
        if self.variant == Variant::ReweightedSam {
            if !(self.lambda.is_finite() && self.lambda >= 0.0) {
                return bad("lambda must be finite and ≥ 0".into());
            }
            match self.delta {
                Some(d) if d.is_finite() && d > 0.0 => {}
                _ => return bad("reweighted_sam requires delta > 0".into()),
            }
            if self.q_probes == 0 {
                return bad("q_probes must be ≥ 1".into());
            }
        }
        Ok(())
    }
}

/// Ascent direction handed to the perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult {
    pub epsilon: Vec<f64>,
    pub raw_norm: f64,
    pub guarded: bool,
}

/// `g/‖g‖`, or zero with `guarded` set when `‖g‖ < τ`.
pub fn normalized_direction(g: &[f64], tau: f64) -> PerturbationResult {
    let raw_norm = norm(g);
    if raw_norm < tau || raw_norm == 0.0 {
        return PerturbationResult {
            epsilon: vec![0.0; g.len()],
            raw_norm,
            guarded: true,
        };
    }
    PerturbationResult {
        epsilon: g.iter().map(|v| v / raw_norm).collect(),
        raw_norm,
        guarded: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub x_next: Vec<f64>,
    /// Number of perturbations that fell back to zero through the norm guard.
    pub guarded: usize,
}

/// `x + ρ·ε` written into `out`; with `ρ = 0` the point is copied unchanged.
fn perturb_into(x: &[f64], rho: f64, eps: &[f64], out: &mut [f64]) {
    if rho == 0.0 {
        out.copy_from_slice(x);
    } else {
        for ((o, xi), e) in out.iter_mut().zip(x).zip(eps) {
            *o = xi + rho * e;
        }
    }
}

fn descend(x: &[f64], eta: f64, g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(xi, gi)| xi - eta * gi).collect()
}

fn check_plan<O: Objective + ?Sized>(ens: &O, x: &[f64], plan: &BatchPlan) -> Result<()> {
    check_point(ens, x)?;
    let n = ens.num_samples();
    match plan.gamma().iter().find(|&&i| i >= n) {
        Some(&index) => Err(Error::IndexOutOfRange { index, n }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Normalized,
    Raw,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Source {
    Batch,
    Full,
}

/// Shared body of mini-batch and n- variants: one perturbation, outer
/// gradient on `γ`.
fn single_perturbation_step<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
    direction: Direction,
    source: Source,
) -> Result<StepOutcome> {
    check_plan(ens, x, plan)?;
    let d = ens.dim();
    let mut scratch = vec![0.0; d];
    let mut acc = RunningMean::new(d);
    let mut guarded = 0;
    let mut point = vec![0.0; d];
    if cfg.rho == 0.0 {
        point.copy_from_slice(x);
    } else {
        let g = match source {
            Source::Batch => {
                batch_grad_into(ens, x, plan.gamma(), &mut scratch, &mut acc);
                acc.mean().to_vec()
            }
            Source::Full => {
                let mut g = vec![0.0; d];
                ens.mean_grad_into(x, &mut g);
                g
            }
        };
        match direction {
            Direction::Normalized => {
                let p = normalized_direction(&g, cfg.grad_norm_floor);
                guarded += p.guarded as usize;
                perturb_into(x, cfg.rho, &p.epsilon, &mut point);
            }
            Direction::Raw => perturb_into(x, cfg.rho, &g, &mut point),
        }
    }
    batch_grad_into(ens, &point, plan.gamma(), &mut scratch, &mut acc);
    Ok(StepOutcome {
        x_next: descend(x, cfg.eta, acc.mean()),
        guarded,
    })
}

/// Shared body of m-SAM and m-USAM. Each sample's gradient is taken at its
/// own block's perturbed point; the outer mean runs over `γ` in order,
/// which equals `(m/|γ|) Σ_j ∇f_{I_j}(x + ρε_j)`.
fn micro_batch_step<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
    direction: Direction,
) -> Result<StepOutcome> {
    check_plan(ens, x, plan)?;
    if cfg.micro_size.is_some_and(|m| m != plan.micro_size()) {
        return Err(Error::Config(format!(
            "plan micro-batch size {} differs from configured {}",
            plan.micro_size(),
            cfg.micro_size.unwrap_or_default()
        )));
    }
    let d = ens.dim();
    let mut scratch = vec![0.0; d];
    let mut block = RunningMean::new(d);
    let mut outer = RunningMean::new(d);
    let mut point = vec![0.0; d];
    let mut guarded = 0;
    for indices in plan.partition() {
        if cfg.rho == 0.0 {
            point.copy_from_slice(x);
        } else {
            batch_grad_into(ens, x, indices, &mut scratch, &mut block);
            match direction {
                Direction::Normalized => {
                    let p = normalized_direction(block.mean(), cfg.grad_norm_floor);
                    guarded += p.guarded as usize;
                    perturb_into(x, cfg.rho, &p.epsilon, &mut point);
                }
                Direction::Raw => perturb_into(x, cfg.rho, block.mean(), &mut point),
            }
        }
        for &i in indices {
            ens.sample_grad_into(i, &point, &mut scratch);
            outer.push(&scratch);
        }
    }
    Ok(StepOutcome {
        x_next: descend(x, cfg.eta, outer.mean()),
        guarded,
    })
}

/// `x − η ∇f_γ(x)`.
pub fn step_sgd<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    check_plan(ens, x, plan)?;
    let d = ens.dim();
    let mut scratch = vec![0.0; d];
    let mut acc = RunningMean::new(d);
    batch_grad_into(ens, x, plan.gamma(), &mut scratch, &mut acc);
    Ok(StepOutcome {
        x_next: descend(x, cfg.eta, acc.mean()),
        guarded: 0,
    })
}

/// `x − η ∇f_γ(x + ρ ∇f_γ/‖∇f_γ‖)`.
pub fn step_minibatch_sam<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    single_perturbation_step(ens, x, plan, cfg, Direction::Normalized, Source::Batch)
}

/// `x − η ∇f_γ(x + ρ ∇f/‖∇f‖)` with the full-batch direction.
pub fn step_n_sam<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    single_perturbation_step(ens, x, plan, cfg, Direction::Normalized, Source::Full)
}

pub fn step_m_sam<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    micro_batch_step(ens, x, plan, cfg, Direction::Normalized)
}

/// `x − η ∇f_γ(x + ρ ∇f_γ)`.
pub fn step_minibatch_usam<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    single_perturbation_step(ens, x, plan, cfg, Direction::Raw, Source::Batch)
}

pub fn step_n_usam<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    single_perturbation_step(ens, x, plan, cfg, Direction::Raw, Source::Full)
}

pub fn step_m_usam<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
) -> Result<StepOutcome> {
    micro_batch_step(ens, x, plan, cfg, Direction::Raw)
}

/// Diagnostics of one Reweighted-SAM perturbation.
#[derive(Debug, Clone)]
pub struct ReweightedPerturbation {
    pub scores: Vec<f64>,
    pub weights: GibbsWeights,
    pub perturbation: PerturbationResult,
}

/// Steps 1–4 of Reweighted-SAM: FD norm scores, Gibbs weights and the
/// normalized weighted direction `Σ p_i ∇f_i / ‖Σ p_i ∇f_i‖`.
pub fn reweighted_perturbation<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
    stream: &SeedStream,
) -> Result<ReweightedPerturbation> {
    check_plan(ens, x, plan)?;
    let delta = cfg
        .delta
        .ok_or_else(|| Error::Config("reweighted_sam requires delta".into()))?;
    let scores = plan
        .gamma()
        .iter()
        .map(|&i| fd::fd_norm_estimate(ens, i, x, delta, cfg.q_probes, stream))
        .collect::<Result<Vec<f64>>>()?;
    let weights = gibbs_weights(&scores, cfg.lambda, cfg.normalization);
    let d = ens.dim();
    let mut scratch = vec![0.0; d];
    let direction = if weights.is_uniform() {
        let mut acc = RunningMean::new(d);
        batch_grad_into(ens, x, plan.gamma(), &mut scratch, &mut acc);
        acc.into_mean()
    } else {
        let mut sum = vec![0.0; d];
        for (&i, &p) in plan.gamma().iter().zip(&weights.weights) {
            ens.sample_grad_into(i, x, &mut scratch);
            for (s, g) in sum.iter_mut().zip(&scratch) {
                *s += p * g;
            }
        }
        sum
    };
    Ok(ReweightedPerturbation {
        scores,
        perturbation: normalized_direction(&direction, cfg.grad_norm_floor),
        weights,
    })
}

/// Reweighted-SAM: perturb along the Gibbs-weighted direction, then take the
/// plain mini-batch gradient there. Probes are keyed by `stream`, `i` and `q`.
pub fn step_reweighted_sam<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
    stream: &SeedStream,
) -> Result<StepOutcome> {
    check_plan(ens, x, plan)?;
    let d = ens.dim();
    let mut point = vec![0.0; d];
    let mut guarded = 0;
    if cfg.rho == 0.0 {
        point.copy_from_slice(x);
    } else {
        let rw = reweighted_perturbation(ens, x, plan, cfg, stream)?;
        guarded += rw.perturbation.guarded as usize;
        perturb_into(x, cfg.rho, &rw.perturbation.epsilon, &mut point);
    }
    let mut scratch = vec![0.0; d];
    let mut acc = RunningMean::new(d);
    batch_grad_into(ens, &point, plan.gamma(), &mut scratch, &mut acc);
    Ok(StepOutcome {
        x_next: descend(x, cfg.eta, acc.mean()),
        guarded,
    })
}

/// Applies `cfg.variant` to an explicit plan.
pub fn step_with_plan<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    plan: &BatchPlan,
    cfg: &OptimizerConfig,
    stream: &SeedStream,
) -> Result<StepOutcome> {
    match cfg.variant {
        Variant::Sgd => step_sgd(ens, x, plan, cfg),
        Variant::MiniBatchSam => step_minibatch_sam(ens, x, plan, cfg),
        Variant::NSam => step_n_sam(ens, x, plan, cfg),
        Variant::MSam => step_m_sam(ens, x, plan, cfg),
        Variant::MiniBatchUsam => step_minibatch_usam(ens, x, plan, cfg),
        Variant::NUsam => step_n_usam(ens, x, plan, cfg),
        Variant::MUsam => step_m_usam(ens, x, plan, cfg),
        Variant::ReweightedSam => step_reweighted_sam(ens, x, plan, cfg, stream),
    }
}

/// Draws `γ` from `stream` and applies one step of `cfg.variant`.
/// The batch depends only on `stream`, so every variant sees the same
/// batch for the same stream.
pub fn step<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    cfg: &OptimizerConfig,
    stream: &SeedStream,
) -> Result<StepOutcome> {
    let plan = sample_batch(ens.num_samples(), cfg.batch_size, cfg.effective_micro_size(), stream)?;
    step_with_plan(ens, x, &plan, cfg, stream)
}

/// Runs `steps` iterations from `x0`; step `k` uses `stream.fork(k)`.
pub fn trajectory<O: Objective + ?Sized>(
    ens: &O,
    x0: &[f64],
    cfg: &OptimizerConfig,
    steps: usize,
    stream: &SeedStream,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut path = Vec::with_capacity(steps + 1);
    path.push(x0.to_vec());
    for k in 0..steps {
        let next = step(ens, &path[k], cfg, &stream.fork(k as u64))?.x_next;
        path.push(next);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{HeteroscedasticQuadratic, HeteroscedasticSpec};

    fn unit_quadratic() -> HeteroscedasticQuadratic {
        HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![1.0], 1)).unwrap()
    }

    #[test]
    fn hand_evaluated_sam_and_usam_steps() {
        let q = unit_quadratic();
        let plan = BatchPlan::new(vec![0], 1, 1).unwrap();
        for v in [
            Variant::MiniBatchSam,
            Variant::NSam,
            Variant::MiniBatchUsam,
            Variant::NUsam,
        ] {
            let cfg = OptimizerConfig::new(v, 0.1, 0.05, 1);
            let out = step_with_plan(&q, &[1.0], &plan, &cfg, &SeedStream::new(0)).unwrap();
            assert!((out.x_next[0] - 0.895).abs() < 1e-15, "{v}: {}", out.x_next[0]);
        }
    }

    #[test]
    fn guard_falls_back_to_sgd() {
        let q = unit_quadratic();
        let plan = BatchPlan::new(vec![0], 1, 1).unwrap();
        let cfg = OptimizerConfig::new(Variant::MiniBatchSam, 0.1, 0.05, 1);
        let out = step_minibatch_sam(&q, &[0.0], &plan, &cfg).unwrap();
        assert_eq!(out.guarded, 1);
        assert_eq!(out.x_next, vec![0.0]);
    }

    #[test]
    fn m_sam_matches_two_block_hand_average() {
        let h = HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![1.0, 2.0, 3.0, 4.0], 1)).unwrap();
        let plan = BatchPlan::new(vec![0, 1, 2, 3], 2, 4).unwrap();
        let (eta, rho, x) = (0.1, 0.2, 1.5);
        let cfg = OptimizerConfig::new(Variant::MSam, eta, rho, 4).with_micro_size(2);
        // blocks {1,2} and {3,4}: each block gradient is positive at x > 0,
        // so each perturbed point is x + ρ and the block mean curvature applies
        let g1 = 1.5 * (x + rho);
        let g2 = 3.5 * (x + rho);
        let expected = x - eta * 2.0 / 4.0 * (g1 + g2);
        let out = step_m_sam(&h, &[x], &plan, &cfg).unwrap();
        assert!((out.x_next[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn config_validation() {
        let cfg = OptimizerConfig::new(Variant::MSam, 0.1, 0.1, 4);
        assert!(cfg.validate().is_err());
        assert!(cfg.clone().with_micro_size(3).validate().is_err());
        assert!(cfg.with_micro_size(2).validate().is_ok());
        let rw = OptimizerConfig::new(Variant::ReweightedSam, 0.1, 0.1, 4);
        assert!(rw.validate().is_err());
        assert!(rw.with_reweighting(1.0, 1e-3, 1).validate().is_ok());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let json = r#"{"variant":"sgd","eta":0.1,"batch_size":2,"momentum":0.9}"#;
        assert!(serde_json::from_str::<OptimizerConfig>(json).is_err());
        let ok = r#"{"variant":"minibatch_sam","eta":0.1,"rho":0.05,"batch_size":2}"#;
        let cfg: OptimizerConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.grad_norm_floor, DEFAULT_GRAD_NORM_FLOOR);
    }
}
