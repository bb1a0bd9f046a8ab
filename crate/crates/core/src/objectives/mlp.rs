use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::Objective;
use crate::error::{Error, Result};
use crate::rng::{tag, SeedStream};

pub const MLP_INPUT: usize = 2;
pub const MLP_HIDDEN: usize = 8;
/// `W1 (8×2) | b1 (8) | w2 (8) | b2 (1)`.
pub const MLP_DIM: usize = MLP_HIDDEN * MLP_INPUT + MLP_HIDDEN + MLP_HIDDEN + 1;

const W1: usize = 0;
const B1: usize = MLP_HIDDEN * MLP_INPUT;
const W2: usize = B1 + MLP_HIDDEN;
const B2: usize = W2 + MLP_HIDDEN;

/// Two-layer tanh regression network on fixed synthetic data,
/// `f_i(θ) = ½ (w2·tanh(W1 u_i + b1) + b2 − y_i)²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyMlpSpec {
    pub seed: u64,
    pub n: usize,
    pub label_noise: f64,
    pub init_scale: f64,
    /// Replicate the first data point `n` times (zero gradient noise).
    pub identical_data: bool,
}

impl TinyMlpSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            n: 32,
            label_noise: 0.3,
            init_scale: 0.5,
            identical_data: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyMlp {
    spec: TinyMlpSpec,
    inputs: Vec<[f64; MLP_INPUT]>,
    targets: Vec<f64>,
    init: Vec<f64>,
}

struct Forward {
    h: [f64; MLP_HIDDEN],
    residual: f64,
}

impl TinyMlp {
    pub fn new(spec: TinyMlpSpec) -> Result<Self> {
        if spec.n == 0 || !(spec.label_noise.is_finite() && spec.label_noise >= 0.0) {
            return Err(Error::Descriptor("tiny_mlp needs n ≥ 1 and label_noise ≥ 0".into()));
        }
        if !(spec.init_scale.is_finite() && spec.init_scale > 0.0) {
            return Err(Error::Descriptor("tiny_mlp init_scale must be > 0".into()));
        }
        let stream = SeedStream::new(spec.seed);
        let mut rng = stream.fork(tag::DATA).rng();
        let unif = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        let mut inputs = Vec::with_capacity(spec.n);
        let mut targets = Vec::with_capacity(spec.n);
        for _ in 0..spec.n {
            let u = [rng.sample(unif), rng.sample(unif)];
            let clean = (std::f64::consts::PI * u[0]).sin() * (1.5 * u[1]).cos();
            let y = clean + spec.label_noise * rng.sample::<f64, _>(StandardNormal);
            inputs.push(u);
            targets.push(y);
        }
        if spec.identical_data {
            let (u0, y0) = (inputs[0], targets[0]);
            inputs.iter_mut().for_each(|u| *u = u0);
            targets.iter_mut().for_each(|y| *y = y0);
        }
        let mut rng = stream.fork(tag::INIT).rng();
        let init = (0..MLP_DIM)
            .map(|_| spec.init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            spec,
            inputs,
            targets,
            init,
        })
    }

    pub fn spec(&self) -> &TinyMlpSpec {
        &self.spec
    }

    /// Seeded construction point of the weights.
    pub fn initial_point(&self) -> Vec<f64> {
        self.init.clone()
    }

    /// Initial weights drawn from an independent seed, same data.
    pub fn initial_point_for(&self, seed: u64) -> Vec<f64> {
        let mut rng = SeedStream::new(seed).fork(tag::INIT).rng();
        (0..MLP_DIM)
            .map(|_| self.spec.init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn data(&self) -> (&[[f64; MLP_INPUT]], &[f64]) {
        (&self.inputs, &self.targets)
    }

    fn forward(&self, i: usize, p: &[f64]) -> Forward {
        let u = &self.inputs[i];
        let mut h = [0.0; MLP_HIDDEN];
        let mut out = p[B2];
        for k in 0..MLP_HIDDEN {
            let z = p[W1 + k * MLP_INPUT] * u[0] + p[W1 + k * MLP_INPUT + 1] * u[1] + p[B1 + k];
            h[k] = z.tanh();
            out += p[W2 + k] * h[k];
        }
        Forward {
            h,
            residual: out - self.targets[i],
        }
    }

    pub fn predict(&self, u: [f64; MLP_INPUT], p: &[f64]) -> f64 {
        let mut out = p[B2];
        for k in 0..MLP_HIDDEN {
            let z = p[W1 + k * MLP_INPUT] * u[0] + p[W1 + k * MLP_INPUT + 1] * u[1] + p[B1 + k];
            out += p[W2 + k] * z.tanh();
        }
        out
    }
}

impl Objective for TinyMlp {
    fn dim(&self) -> usize {
        MLP_DIM
    }
    fn num_samples(&self) -> usize {
        self.spec.n
    }
    fn sample_loss(&self, i: usize, x: &[f64]) -> f64 {
        let r = self.forward(i, x).residual;
        0.5 * r * r
    }
    fn sample_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let u = &self.inputs[i];
        let Forward { h, residual: r } = self.forward(i, x);
        out[B2] = r;
        for k in 0..MLP_HIDDEN {
            out[W2 + k] = r * h[k];
            let dz = r * x[W2 + k] * (1.0 - h[k] * h[k]);
            out[B1 + k] = dz;
            out[W1 + k * MLP_INPUT] = dz * u[0];
            out[W1 + k * MLP_INPUT + 1] = dz * u[1];
        }
    }
    /// Pearlmutter R-operator pass through forward and backward sweeps.
    fn sample_hvp_into(&self, i: usize, x: &[f64], v: &[f64], out: &mut [f64]) {
        let u = &self.inputs[i];
        let Forward { h, residual: r } = self.forward(i, x);
        let mut rh = [0.0; MLP_HIDDEN];
        let mut r_out = v[B2];
        for k in 0..MLP_HIDDEN {
            let rz = v[W1 + k * MLP_INPUT] * u[0] + v[W1 + k * MLP_INPUT + 1] * u[1] + v[B1 + k];
            rh[k] = (1.0 - h[k] * h[k]) * rz;
            r_out += v[W2 + k] * h[k] + x[W2 + k] * rh[k];
        }
        out[B2] = r_out;
        for k in 0..MLP_HIDDEN {
            out[W2 + k] = r_out * h[k] + r * rh[k];
            let s = 1.0 - h[k] * h[k];
            let dh = r * x[W2 + k];
            let r_dh = r_out * x[W2 + k] + r * v[W2 + k];
            let r_dz = r_dh * s - 2.0 * dh * h[k] * rh[k];
            out[B1 + k] = r_dz;
            out[W1 + k * MLP_INPUT] = r_dz * u[0];
            out[W1 + k * MLP_INPUT + 1] = r_dz * u[1];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_at_construction_point_matches_independent_resummation() {
        let mlp = TinyMlp::new(TinyMlpSpec::standard(5)).unwrap();
        let p = mlp.initial_point();
        let (inputs, targets) = mlp.data();
        // independent evaluation through `predict`, plain left-to-right sum
        let mut total = 0.0;
        for (u, y) in inputs.iter().zip(targets) {
            let r = mlp.predict(*u, &p) - y;
            total += 0.5 * r * r;
        }
        let oracle = total / inputs.len() as f64;
        assert!((mlp.mean_loss(&p) - oracle).abs() < 1e-12);
    }

    #[test]
    fn identical_data_has_no_gradient_noise() {
        let mut spec = TinyMlpSpec::standard(2);
        spec.identical_data = true;
        let mlp = TinyMlp::new(spec).unwrap();
        let p = mlp.initial_point();
        assert!(mlp.noise_trace(&p).abs() < 1e-14);
    }
}
