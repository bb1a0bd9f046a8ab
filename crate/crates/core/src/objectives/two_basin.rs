use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Objective;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm};
use crate::rng::{tag, SeedStream};

/// Sharp/flat double well built from two Gaussian wells plus a weak
/// quadratic confinement:
///
/// `f_i(x) = −D_s exp(−‖x − c_s − δ_i‖²/2w_s²) − D_f exp(−‖x − c_f − ε_i‖²/2w_f²) + (q/2)‖x‖²`
///
/// The sharp well sits at `−separation/2 · e₀`, the flat one at
/// `+separation/2 · e₀`. Per-sample center jitter `δ_i`, `ε_i` is what
/// makes the gradient noise large in the sharp well and small in the flat one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoBasinSpec {
    pub seed: u64,
    pub dim: usize,
    pub n: usize,
    pub separation: f64,
    pub sharp_depth: f64,
    pub sharp_width: f64,
    pub sharp_jitter: f64,
    pub flat_depth: f64,
    pub flat_width: f64,
    pub flat_jitter: f64,
    pub confinement: f64,
}

impl TwoBasinSpec {
    /// The configuration used by the escape and m-sweep experiments.
    ///
    /// Some seeds merge the shallow sharp well into the flat one; the
    /// constructor rejects those. Seed 1 is the reference instance.
    pub fn noisy(seed: u64) -> Self {
        Self {
            seed,
            dim: 2,
            n: 64,
            separation: 1.5,
            sharp_depth: 0.55,
            sharp_width: 0.25,
            sharp_jitter: 0.2,
            flat_depth: 1.0,
            flat_width: 1.0,
            flat_jitter: 0.2,
            confinement: 0.02,
        }
    }

    /// Same landscape without per-sample jitter (zero gradient noise).
    pub fn noiseless(seed: u64) -> Self {
        Self {
            sharp_jitter: 0.0,
            flat_jitter: 0.0,
            ..Self::noisy(seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoBasin {
    spec: TwoBasinSpec,
    sharp_centers: Vec<Vec<f64>>,
    flat_centers: Vec<Vec<f64>>,
    sharp_min: Vec<f64>,
    flat_min: Vec<f64>,
    barrier: Vec<f64>,
}

fn well_terms(depth: f64, width: f64, x: &[f64], c: &[f64]) -> (f64, f64) {
    let r2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
    let e = (-r2 / (2.0 * width * width)).exp();
    (depth * e, depth * e / (width * width))
}

impl TwoBasin {
    pub fn new(spec: TwoBasinSpec) -> Result<Self> {
        let d = spec.dim;
        if d == 0 || spec.n == 0 {
            return Err(Error::Descriptor("two_basin needs dim ≥ 1 and n ≥ 1".into()));
        }
        let positive = [
            spec.sharp_depth,
            spec.sharp_width,
            spec.flat_depth,
            spec.flat_width,
            spec.separation,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Descriptor(
                "two_basin depths, widths and separation must be > 0".into(),
            ));
        }
        if [spec.sharp_jitter, spec.flat_jitter, spec.confinement]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Descriptor(
                "two_basin jitters and confinement must be ≥ 0".into(),
            ));
        }
        let mut cs = vec![0.0; d];
        let mut cf = vec![0.0; d];
        cs[0] = -0.5 * spec.separation;
        cf[0] = 0.5 * spec.separation;
        let mut rng = SeedStream::new(spec.seed).fork(tag::DATA).rng();
        let mut jittered = |c: &[f64], s: f64| -> Vec<f64> {
            c.iter()
                .map(|ci| ci + s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let sharp_centers: Vec<Vec<f64>> = (0..spec.n).map(|_| jittered(&cs, spec.sharp_jitter)).collect();
        let flat_centers: Vec<Vec<f64>> = (0..spec.n).map(|_| jittered(&cf, spec.flat_jitter)).collect();

        let mut out = Self {
            spec,
            sharp_centers,
            flat_centers,
            sharp_min: cs.clone(),
            flat_min: cf.clone(),
            barrier: vec![0.0; d],
        };
        out.sharp_min = out.descend(cs)?;
        out.flat_min = out.descend(cf)?;
        let gap: Vec<f64> = out.flat_min.iter().zip(&out.sharp_min).map(|(a, b)| a - b).collect();
        if norm(&gap) < 0.25 * out.spec.separation {
            return Err(Error::Descriptor("two_basin wells merged into a single minimum".into()));
        }
        out.barrier = out.locate_barrier();
        let noiseless = out.spec.sharp_jitter == 0.0 && out.spec.flat_jitter == 0.0;
        if !noiseless {
            let ts = out.noise_trace(&out.sharp_min);
            let tf = out.noise_trace(&out.flat_min);
            if !(ts >= 4.0 * tf && ts > 0.0) {
                return Err(Error::Descriptor(format!(
                    "two_basin noise traces at the minima must differ by ≥ 4x (sharp {ts:.3e}, flat {tf:.3e})"
                )));
            }
        }
        Ok(out)
    }

    fn descend(&self, start: Vec<f64>) -> Result<Vec<f64>> {
        let s = &self.spec;
        let lmax = s.sharp_depth / (s.sharp_width * s.sharp_width)
            + s.flat_depth / (s.flat_width * s.flat_width)
            + s.confinement;
        let step = 0.5 / lmax;
        let mut x = start;
        let mut g = vec![0.0; s.dim];
        for _ in 0..200_000 {
            self.mean_grad_into(&x, &mut g);
            if norm(&g) < 1e-13 {
                break;
            }
            axpy(-step, &g, &mut x);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Descriptor("two_basin minimum search diverged".into()));
        }
        Ok(x)
    }

    fn locate_barrier(&self) -> Vec<f64> {
        const GRID: usize = 4000;
        let mut best = (f64::NEG_INFINITY, self.sharp_min.clone());
        for j in 0..=GRID {
            let t = j as f64 / GRID as f64;
            let p: Vec<f64> = self
                .sharp_min
                .iter()
                .zip(&self.flat_min)
                .map(|(a, b)| a + t * (b - a))
                .collect();
            let f = self.mean_loss(&p);
            if f > best.0 {
                best = (f, p);
            }
        }
        best.1
    }

    pub fn spec(&self) -> &TwoBasinSpec {
        &self.spec
    }

    pub fn sharp_minimum(&self) -> &[f64] {
        &self.sharp_min
    }

    pub fn flat_minimum(&self) -> &[f64] {
        &self.flat_min
    }

    /// Highest point of the population loss on the segment between minima.
    pub fn barrier_point(&self) -> &[f64] {
        &self.barrier
    }

    /// True once `x` lies past the barrier on the flat side, measured along
    /// the sharp→flat axis.
    pub fn in_flat_region(&self, x: &[f64]) -> bool {
        let axis: Vec<f64> = self.flat_min.iter().zip(&self.sharp_min).map(|(a, b)| a - b).collect();
        let rel: Vec<f64> = x.iter().zip(&self.sharp_min).map(|(a, b)| a - b).collect();
        let bar: Vec<f64> = self.barrier.iter().zip(&self.sharp_min).map(|(a, b)| a - b).collect();
        dot(&rel, &axis) > dot(&bar, &axis)
    }
}

impl Objective for TwoBasin {
    fn dim(&self) -> usize {
        self.spec.dim
    }
    fn num_samples(&self) -> usize {
        self.spec.n
    }
    fn sample_loss(&self, i: usize, x: &[f64]) -> f64 {
        let s = &self.spec;
        let (es, _) = well_terms(s.sharp_depth, s.sharp_width, x, &self.sharp_centers[i]);
        let (ef, _) = well_terms(s.flat_depth, s.flat_width, x, &self.flat_centers[i]);
        -es - ef + 0.5 * s.confinement * dot(x, x)
    }
    fn sample_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let s = &self.spec;
        let cs = &self.sharp_centers[i];
        let cf = &self.flat_centers[i];
        let (_, ks) = well_terms(s.sharp_depth, s.sharp_width, x, cs);
        let (_, kf) = well_terms(s.flat_depth, s.flat_width, x, cf);
        for j in 0..s.dim {
            out[j] = ks * (x[j] - cs[j]) + kf * (x[j] - cf[j]) + s.confinement * x[j];
        }
    }
    fn sample_hvp_into(&self, i: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        let s = &self.spec;
        let cs = &self.sharp_centers[i];
        let cf = &self.flat_centers[i];
        let (_, ks) = well_terms(s.sharp_depth, s.sharp_width, x, cs);
        let (_, kf) = well_terms(s.flat_depth, s.flat_width, x, cf);
        let ps: f64 = x.iter().zip(cs).zip(v).map(|((a, c), vi)| (a - c) * vi).sum();
        let pf: f64 = x.iter().zip(cf).zip(v).map(|((a, c), vi)| (a - c) * vi).sum();
        let ws2 = s.sharp_width * s.sharp_width;
        let wf2 = s.flat_width * s.flat_width;
        for j in 0..s.dim {
            out[j] = ks * (v[j] - (x[j] - cs[j]) * ps / ws2)
                + kf * (v[j] - (x[j] - cf[j]) * pf / wf2)
                + s.confinement * v[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noisy_default_has_two_minima_with_trace_gap() {
        let tb = TwoBasin::new(TwoBasinSpec::noisy(1)).unwrap();
        let ts = tb.noise_trace(tb.sharp_minimum());
        let tf = tb.noise_trace(tb.flat_minimum());
        assert!(ts >= 4.0 * tf, "sharp {ts} flat {tf}");
        let mut g = vec![0.0; 2];
        tb.mean_grad_into(tb.sharp_minimum(), &mut g);
        assert!(norm(&g) < 1e-10);
        assert!(!tb.in_flat_region(tb.sharp_minimum()));
        assert!(tb.in_flat_region(tb.flat_minimum()));
        let fb = tb.mean_loss(tb.barrier_point());
        assert!(fb > tb.mean_loss(tb.sharp_minimum()));
        assert!(fb > tb.mean_loss(tb.flat_minimum()));
    }

    #[test]
    fn merged_wells_are_rejected() {
        let mut spec = TwoBasinSpec::noisy(0);
        spec.separation = 0.05;
        assert!(TwoBasin::new(spec).is_err());
    }

    #[test]
    fn noiseless_variant_has_identical_samples() {
        let tb = TwoBasin::new(TwoBasinSpec::noiseless(1)).unwrap();
        let x = [0.3, -0.2];
        let mut g0 = vec![0.0; 2];
        let mut g5 = vec![0.0; 2];
        tb.sample_grad_into(0, &x, &mut g0);
        tb.sample_grad_into(5, &x, &mut g5);
        assert_eq!(g0, g5);
        assert!(tb.noise_trace(&x).abs() < 1e-15);
    }
}
