use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::objectives::{Ensemble, EnsembleSpec, HeteroscedasticSpec, ShiftedQuadraticSpec, TinyMlpSpec, TwoBasinSpec};
use crate::optimizers::{trajectory, OptimizerConfig, Variant};
use crate::rng::SeedStream;

/// One identity checked on one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseCheck {
    pub identity: String,
    pub family: String,
    pub reference: Variant,
    pub other: Variant,
    pub seeds: usize,
    pub steps: usize,
    pub identical: bool,
}

/// Noisy members of every family.
pub fn noisy_families() -> Vec<EnsembleSpec> {
    vec![
        EnsembleSpec::ShiftedQuadratic(ShiftedQuadraticSpec::isotropic(3, 16, 1.0, 1)),
        EnsembleSpec::HeteroscedasticQuadratic(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 8)),
        EnsembleSpec::TwoBasin(TwoBasinSpec::noisy(1)),
        EnsembleSpec::TinyMlp(TinyMlpSpec::standard(1)),
    ]
}

/// Members of every family whose samples are all identical, so `V ≡ 0`.
pub fn zero_noise_families() -> Vec<EnsembleSpec> {
    let mut mlp = TinyMlpSpec::standard(1);
    mlp.identical_data = true;
    vec![
        EnsembleSpec::ShiftedQuadratic(ShiftedQuadraticSpec::isotropic(3, 16, 0.0, 1)),
        EnsembleSpec::HeteroscedasticQuadratic(HeteroscedasticSpec::pattern(vec![2.0], 16)),
        EnsembleSpec::TwoBasin(TwoBasinSpec::noiseless(1)),
        EnsembleSpec::TinyMlp(mlp),
    ]
}

fn bits(path: &[Vec<f64>]) -> Vec<u64> {
    path.iter().flatten().map(|v| v.to_bits()).collect()
}

fn start(ens: &Ensemble) -> Vec<f64> {
    ens.default_start().iter().map(|v| v + 0.1).collect()
}

fn compare(
    ens: &Ensemble,
    identity: &str,
    reference: &OptimizerConfig,
    other: &OptimizerConfig,
    seeds: usize,
    steps: usize,
) -> Result<CollapseCheck> {
    let x0 = start(ens);
    let mut identical = true;
    for s in 0..seeds as u64 {
        let stream = SeedStream::new(s);
        let a = trajectory(ens, &x0, reference, steps, &stream)?;
        let b = trajectory(ens, &x0, other, steps, &stream)?;
        identical &= bits(&a) == bits(&b);
    }
    Ok(CollapseCheck {
        identity: identity.into(),
        family: ens.spec().family_name().into(),
        reference: reference.variant,
        other: other.variant,
        seeds,
        steps,
        identical,
    })
}

fn config(variant: Variant, rho: f64, batch: usize, m: usize) -> OptimizerConfig {
    let cfg = OptimizerConfig::new(variant, 0.05, rho, batch).with_micro_size(m);
    if variant == Variant::ReweightedSam {
        cfg.with_reweighting(1.0, 1e-3, 2)
    } else {
        cfg
    }
}

/// The three trajectory identities, bit for bit:
///
/// * `ρ = 0`: every variant equals SGD on noisy families;
/// * `V ≡ 0`: mini-batch, n- and m-SAM coincide (likewise USAM);
/// * `m = |γ|`: m-SAM equals mini-batch SAM (likewise USAM).
pub fn collapse_checks(seeds: usize, steps: usize) -> Result<Vec<CollapseCheck>> {
    let (batch, m) = (4, 2);
    let rho = 0.05;
    let mut out = Vec::new();
    for spec in noisy_families() {
        let ens = spec.build()?;
        let sgd = config(Variant::Sgd, 0.0, batch, m);
        for v in Variant::ALL.iter().copied().filter(|v| *v != Variant::Sgd) {
            out.push(compare(
                &ens,
                "rho_zero",
                &sgd,
                &config(v, 0.0, batch, m),
                seeds,
                steps,
            )?);
        }
        for (mv, bv) in [
            (Variant::MSam, Variant::MiniBatchSam),
            (Variant::MUsam, Variant::MiniBatchUsam),
        ] {
            out.push(compare(
                &ens,
                "m_equals_batch",
                &config(bv, rho, batch, batch),
                &config(mv, rho, batch, batch),
                seeds,
                steps,
            )?);
        }
    }
    for spec in zero_noise_families() {
        let ens = spec.build()?;
        for triple in [
            [Variant::MiniBatchSam, Variant::NSam, Variant::MSam],
            [Variant::MiniBatchUsam, Variant::NUsam, Variant::MUsam],
        ] {
            let reference = config(triple[0], rho, batch, m);
            for v in &triple[1..] {
                out.push(compare(
                    &ens,
                    "zero_noise",
                    &reference,
                    &config(*v, rho, batch, m),
                    seeds,
                    steps,
                )?);
            }
        }
    }
    Ok(out)
}
