//! Continuous-time models of the SAM and USAM families and an
//! Euler–Maruyama integrator.

pub mod diffusion;
pub mod drift;

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::objectives::{check_point, Objective};
use crate::optimizers::Variant;
use crate::rng::{tag, SeedStream};
use crate::stochastic::ExpectationMode;

pub use diffusion::{
    batch_mean_variance_factor, diffusion_factor, sigma00, sigma01, variant_covariance, CrossCovariance,
    DiffusionFactor, DiffusionOrder, CLAMP_TOLERANCE,
};
pub use drift::{
    expected_norm_gradient, expected_normalized_hvp, n_usam_drift, sam_drift, usam_drift, SamDrift, SamKind,
    VectorEstimate,
};

/// Paths whose norm exceeds this are flagged as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

pub const DEFAULT_SUBSTEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeVariant {
    #[serde(rename = "minibatch_usam")]
    MiniBatchUsam,
    NUsam,
    MUsam,
    #[serde(rename = "minibatch_sam")]
    MiniBatchSam,
    NSam,
    MSam,
}

impl SdeVariant {
    pub const ALL: [SdeVariant; 6] = [
        SdeVariant::MiniBatchUsam,
        SdeVariant::NUsam,
        SdeVariant::MUsam,
        SdeVariant::MiniBatchSam,
        SdeVariant::NSam,
        SdeVariant::MSam,
    ];

    pub fn from_optimizer(v: Variant) -> Option<Self> {
        match v {
            Variant::MiniBatchUsam => Some(SdeVariant::MiniBatchUsam),
            Variant::NUsam => Some(SdeVariant::NUsam),
            Variant::MUsam => Some(SdeVariant::MUsam),
            Variant::MiniBatchSam => Some(SdeVariant::MiniBatchSam),
            Variant::NSam => Some(SdeVariant::NSam),
            Variant::MSam => Some(SdeVariant::MSam),
            Variant::Sgd | Variant::ReweightedSam => None,
        }
    }

    pub fn optimizer(self) -> Variant {
        match self {
            SdeVariant::MiniBatchUsam => Variant::MiniBatchUsam,
            SdeVariant::NUsam => Variant::NUsam,
            SdeVariant::MUsam => Variant::MUsam,
            SdeVariant::MiniBatchSam => Variant::MiniBatchSam,
            SdeVariant::NSam => Variant::NSam,
            SdeVariant::MSam => Variant::MSam,
        }
    }

    pub fn is_sam(self) -> bool {
        matches!(self, SdeVariant::MiniBatchSam | SdeVariant::NSam | SdeVariant::MSam)
    }

    pub fn is_micro(self) -> bool {
        matches!(self, SdeVariant::MUsam | SdeVariant::MSam)
    }
}

/// Drift and diffusion of one variant's SDE at fixed `(η, ρ, |γ|, m)`.
#[derive(Debug, Clone)]
pub struct SdeModel<'a, O: ?Sized> {
    ens: &'a O,
    pub variant: SdeVariant,
    pub eta: f64,
    pub rho: f64,
    pub batch_size: usize,
    pub micro_size: usize,
    pub order: DiffusionOrder,
    pub expectation: ExpectationMode,
    /// Fail instead of clamping when the clamp exceeds the tolerance.
    pub strict_clamp: bool,
}

impl<'a, O: Objective + ?Sized> SdeModel<'a, O> {
    pub fn new(ens: &'a O, variant: SdeVariant, eta: f64, rho: f64, batch_size: usize) -> Self {
        Self {
            ens,
            variant,
            eta,
            rho,
            batch_size,
            micro_size: batch_size,
            order: DiffusionOrder::Sigma00Only,
            expectation: ExpectationMode::Auto { samples: 4096, seed: 0 },
            strict_clamp: false,
        }
    }

    pub fn with_micro_size(mut self, m: usize) -> Self {
        self.micro_size = m;
        self
    }

    pub fn with_order(mut self, order: DiffusionOrder) -> Self {
        self.order = order;
        self
    }

    pub fn with_expectation(mut self, mode: ExpectationMode) -> Self {
        self.expectation = mode;
        self
    }

    pub fn with_strict_clamp(mut self, strict: bool) -> Self {
        self.strict_clamp = strict;
        self
    }

    pub fn objective(&self) -> &'a O {
        self.ens
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::Config(format!("rho must be ≥ 0, got {}", self.rho)));
        }
        let n = self.ens.num_samples();
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::Config(format!("batch size must lie in 1..={n}")));
        }
        if self.variant.is_micro() && (self.micro_size == 0 || !self.batch_size.is_multiple_of(self.micro_size)) {
            return Err(Error::Config(format!(
                "micro_size {} must divide batch_size {}",
                self.micro_size, self.batch_size
            )));
        }
        Ok(())
    }

    /// Subset size entering the drift and `Σ`: `m` or `|γ|`.
    pub fn k(&self) -> usize {
        if self.variant.is_micro() {
            self.micro_size
        } else {
            self.batch_size
        }
    }

    /// `η`, or `m η / |γ|` for the m-variants.
    pub fn scale(&self) -> f64 {
        if self.variant.is_micro() {
            self.eta * self.micro_size as f64 / self.batch_size as f64
        } else {
            self.eta
        }
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (ens, rho, k) = (self.ens, self.rho, self.k());
        match self.variant {
            SdeVariant::MiniBatchUsam | SdeVariant::MUsam => usam_drift(ens, x, rho, k),
            SdeVariant::NUsam => n_usam_drift(ens, x, rho),
            SdeVariant::MiniBatchSam => {
                sam_drift(ens, x, rho, SamKind::MiniBatch, k, self.expectation).map(|d| d.drift)
            }
            SdeVariant::NSam => sam_drift(ens, x, rho, SamKind::Full, k, self.expectation).map(|d| d.drift),
            SdeVariant::MSam => sam_drift(ens, x, rho, SamKind::Micro, k, self.expectation).map(|d| d.drift),
        }
    }

    pub fn diffusion(&self, x: &[f64]) -> Result<DiffusionFactor> {
        let f = diffusion_factor(
            self.ens,
            x,
            self.rho,
            self.variant,
            self.k(),
            self.scale(),
            self.order,
            self.expectation,
        )?;
        if self.strict_clamp {
            f.check_clamp()?;
        }
        Ok(f)
    }

    /// Writes `S(x)` row-major into `out` (`d·d` entries). One-dimensional
    /// `Σ₀₀`-only models skip the matrix machinery.
    pub fn diffusion_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.ens.dim();
        if d == 1 && (self.order == DiffusionOrder::Sigma00Only || self.rho == 0.0) {
            let v =
                self.ens.noise_trace(x) * batch_mean_variance_factor(self.ens.num_samples(), self.k()) * self.scale();
            out[0] = v.max(0.0).sqrt();
            return Ok(());
        }
        let f = self.diffusion(x)?;
        for r in 0..d {
            for c in 0..d {
                out[r * d + c] = f.factor[(r, c)];
            }
        }
        Ok(())
    }
}

/// A simulated path on the uniform grid `t_j = j·dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdePath {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
    pub diverged: bool,
}

impl SdePath {
    /// Writes `t, x_0..x_{d−1}, flag` rows (flag 1 marks the divergence row),
    /// optionally prefixed by a seed column.
    pub fn write_csv<W: Write>(&self, w: W, seed_column: bool, header: bool) -> Result<()> {
        write_paths_csv(std::slice::from_ref(self), w, seed_column, header)
    }
}

pub fn write_paths_csv<W: Write>(paths: &[SdePath], w: W, seed_column: bool, header: bool) -> Result<()> {
    let io = |e: csv::Error| Error::Config(format!("csv write failed: {e}"));
    let mut wr = csv::Writer::from_writer(w);
    let d = paths.first().and_then(|p| p.states.first()).map_or(0, |s| s.len());
    if header {
        let mut h: Vec<String> = Vec::with_capacity(d + 3);
        if seed_column {
            h.push("seed".into());
        }
        h.push("t".into());
        h.extend((0..d).map(|j| format!("x_{j}")));
        h.push("flag".into());
        wr.write_record(&h).map_err(io)?;
    }
    for p in paths {
        let last = p.states.len().saturating_sub(1);
        for (j, (t, x)) in p.times.iter().zip(&p.states).enumerate() {
            let mut row: Vec<String> = Vec::with_capacity(d + 3);
            if seed_column {
                row.push(p.seed.to_string());
            }
            row.push(t.to_string());
            row.extend(x.iter().map(|v| v.to_string()));
            row.push(if p.diverged && j == last { "1" } else { "0" }.to_string());
            wr.write_record(&row).map_err(io)?;
        }
    }
    wr.flush()
        .map_err(|e| Error::Config(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Reusable Euler–Maruyama stepper with preallocated buffers.
pub struct EulerMaruyama<'m, 'a, O: ?Sized> {
    model: &'m SdeModel<'a, O>,
    dt: f64,
    sqrt_dt: f64,
    drift: Vec<f64>,
    factor: Vec<f64>,
    noise: Vec<f64>,
}

impl<'m, 'a, O: Objective + ?Sized> EulerMaruyama<'m, 'a, O> {
    /// `κ` substeps per learning-rate interval, `dt = η/κ`.
    pub fn new(model: &'m SdeModel<'a, O>, kappa: usize) -> Result<Self> {
        if kappa == 0 {
            return Err(Error::Config("substeps per eta must be ≥ 1".into()));
        }
        model.validate()?;
        let d = model.objective().dim();
        let dt = model.eta / kappa as f64;
        Ok(Self {
            model,
            dt,
            sqrt_dt: dt.sqrt(),
            drift: vec![0.0; d],
            factor: vec![0.0; d * d],
            noise: vec![0.0; d],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `x` by one substep; returns `false` once the path diverges.
    pub fn step<R: Rng + ?Sized>(&mut self, x: &mut [f64], rng: &mut R) -> Result<bool> {
        let d = x.len();
        let b = self.model.drift(x)?;
        self.drift.copy_from_slice(&b);
        self.model.diffusion_into(x, &mut self.factor)?;
        for z in self.noise.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        for ((xr, row), b) in x.iter_mut().zip(self.factor.chunks_exact(d)).zip(&self.drift) {
            let s: f64 = row.iter().zip(&self.noise).map(|(f, z)| f * z).sum();
            *xr += b * self.dt + s * self.sqrt_dt;
        }
        Ok(x.iter().all(|v| v.is_finite()) && norm(x) <= DIVERGENCE_THRESHOLD)
    }
}

/// Integrates from `x0` to `T` with `dt = η/κ`; the noise stream is
/// `SeedStream::new(seed).fork(NOISE)`. Integration stops at divergence.
pub fn integrate<O: Objective + ?Sized>(
    model: &SdeModel<'_, O>,
    x0: &[f64],
    t_end: f64,
    kappa: usize,
    seed: u64,
) -> Result<SdePath> {
    check_point(model.objective(), x0)?;
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(Error::Config("horizon T must be ≥ 0".into()));
    }
    let mut em = EulerMaruyama::new(model, kappa)?;
    let steps = (t_end / em.dt()).round() as usize;
    let mut rng = SeedStream::new(seed).fork(tag::NOISE).rng();
    let mut x = x0.to_vec();
    let mut times = vec![0.0];
    let mut states = vec![x.clone()];
    let mut diverged = false;
    for j in 1..=steps {
        let ok = em.step(&mut x, &mut rng)?;
        times.push(j as f64 * em.dt());
        states.push(x.clone());
        if !ok {
            diverged = true;
            break;
        }
    }
    Ok(SdePath {
        times,
        states,
        seed,
        diverged,
    })
}

/// `Σ^{variant}` as a dense matrix, unscaled; convenience for reports.
pub fn covariance_of<O: Objective + ?Sized>(model: &SdeModel<'_, O>, x: &[f64]) -> Result<DMatrix<f64>> {
    variant_covariance(
        model.objective(),
        x,
        model.rho,
        model.variant,
        model.k(),
        model.order,
        model.expectation,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{HeteroscedasticQuadratic, HeteroscedasticSpec};

    #[test]
    fn replay_is_bit_identical() {
        let h = HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 50)).unwrap();
        let m = SdeModel::new(&h, SdeVariant::MiniBatchUsam, 0.05, 0.1, 2);
        let a = integrate(&m, &[1.0], 1.0, 10, 7).unwrap();
        let b = integrate(&m, &[1.0], 1.0, 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.times.len(), 201);
        let c = integrate(&m, &[1.0], 1.0, 10, 8).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn csv_has_documented_header() {
        let h = HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 2)).unwrap();
        let m = SdeModel::new(&h, SdeVariant::NUsam, 0.1, 0.0, 1);
        let p = integrate(&m, &[1.0], 0.1, 2, 1).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf, true, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("seed,t,x_0,flag\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn m_variant_scale() {
        let h = HeteroscedasticQuadratic::new(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 8)).unwrap();
        let m = SdeModel::new(&h, SdeVariant::MSam, 0.1, 0.1, 4).with_micro_size(2);
        assert!((m.scale() - 0.05).abs() < 1e-15);
        assert_eq!(m.k(), 2);
    }
}
