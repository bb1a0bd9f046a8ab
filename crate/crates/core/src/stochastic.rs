//! Batch sampling and stochastic-gradient-noise statistics.
//!
//! Expectations over random batches are taken over uniform size-`k`
//! subsets of `{0..n−1}` (sampling without replacement), either by exact
//! enumeration of all `C(n,k)` subsets or by Monte Carlo.
//!
//! The drift terms of the SAM-family SDEs are written with
//! `E‖Σ_{i∈γ} ∇f_i‖ / |γ|`. This module always works with the mean form
//! `E‖∇f_γ‖ = E‖(1/|γ|) Σ_{i∈γ} ∇f_i‖`; the sum form is `|γ|` times it.

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, RunningMean};
use crate::objectives::{check_point, Objective};
use crate::rng::{tag, SeedStream};

/// Largest `C(n,k)` for which exact subset enumeration is allowed.
pub const EXACT_SUBSET_LIMIT: u64 = 10_000;

/// A sampled index set and its partition into consecutive micro-batches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    gamma: Vec<usize>,
    micro_size: usize,
}

impl BatchPlan {
    /// Builds a plan from an explicit index list.
    pub fn new(gamma: Vec<usize>, micro_size: usize, n: usize) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if micro_size == 0 || !gamma.len().is_multiple_of(micro_size) {
            return Err(Error::Config(format!(
                "micro-batch size {micro_size} must divide batch size {}",
                gamma.len()
            )));
        }
        let mut seen = gamma.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("batch indices must be unique".into()));
        }
        if let Some(&max) = seen.last() {
            if max >= n {
                return Err(Error::IndexOutOfRange { index: max, n });
            }
        }
        Ok(Self { gamma, micro_size })
    }

    pub fn gamma(&self) -> &[usize] {
        &self.gamma
    }

    pub fn batch_size(&self) -> usize {
        self.gamma.len()
    }

    pub fn micro_size(&self) -> usize {
        self.micro_size
    }

    /// Disjoint blocks `I_j` of size `m` covering `γ`, in order.
    pub fn partition(&self) -> std::slice::Chunks<'_, usize> {
        self.gamma.chunks(self.micro_size)
    }

    pub fn num_blocks(&self) -> usize {
        self.gamma.len() / self.micro_size
    }
}

/// Uniform sample of `batch_size` distinct indices from `{0..n−1}`,
/// partitioned into consecutive blocks of `micro_size`.
pub fn sample_batch(n: usize, batch_size: usize, micro_size: usize, stream: &SeedStream) -> Result<BatchPlan> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!("batch size {batch_size} must lie in 1..={n}")));
    }
    if micro_size == 0 || !batch_size.is_multiple_of(micro_size) {
        return Err(Error::Config(format!(
            "micro-batch size {micro_size} must divide batch size {batch_size}"
        )));
    }
    let mut rng = stream.fork(tag::BATCH).rng();
    let gamma = index::sample(&mut rng, n, batch_size).into_vec();
    Ok(BatchPlan { gamma, micro_size })
}

/// Mean of per-sample gradients over `indices`, unchecked.
pub(crate) fn batch_grad_into<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    indices: &[usize],
    scratch: &mut [f64],
    acc: &mut RunningMean,
) {
    acc.reset();
    for &i in indices {
        ens.sample_grad_into(i, x, scratch);
        acc.push(scratch);
    }
}

/// `∇f_B(x)`, the mean of `∇f_i(x)` over `indices`.
pub fn batch_grad<O: Objective + ?Sized>(ens: &O, x: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
    check_point(ens, x)?;
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= ens.num_samples()) {
        return Err(Error::IndexOutOfRange {
            index: i,
            n: ens.num_samples(),
        });
    }
    let d = ens.dim();
    let mut scratch = vec![0.0; d];
    let mut acc = RunningMean::new(d);
    batch_grad_into(ens, x, indices, &mut scratch, &mut acc);
    Ok(acc.into_mean())
}

/// Exact population statistics of the per-sample gradients at one point.
#[derive(Debug, Clone)]
pub struct GradientStatistics {
    pub mean_grad: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub trace: f64,
    pub fisher: DMatrix<f64>,
    pub per_sample_norms: Vec<f64>,
}

/// JSON export shape of [`GradientStatistics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStatisticsExport {
    pub mean_grad: Vec<f64>,
    pub trace: f64,
    pub fisher_trace: f64,
    pub per_sample_norms: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<f64>>,
}

impl GradientStatistics {
    pub fn export(&self, include_covariance: bool) -> GradientStatisticsExport {
        let d = self.mean_grad.len();
        GradientStatisticsExport {
            mean_grad: self.mean_grad.clone(),
            trace: self.trace,
            fisher_trace: self.fisher.trace(),
            per_sample_norms: self.per_sample_norms.clone(),
            covariance: include_covariance.then(|| (0..d * d).map(|k| self.covariance[(k / d, k % d)]).collect()),
        }
    }

    pub fn to_json(&self, include_covariance: bool) -> String {
        serde_json::to_string(&self.export(include_covariance)).expect("statistics serialize")
    }
}

/// Clamps a slightly negative trace to zero, warning when below `−1e-10`.
pub(crate) fn clamp_trace(trace: f64) -> f64 {
    if trace < -1e-10 {
        log::warn!("noise trace {trace:e} below -1e-10; clamping to 0");
    }
    trace.max(0.0)
}

/// Exact `∇f`, `V(x)`, `tr V`, empirical Fisher and per-sample norms over
/// all `n` samples.
pub fn grad_stats<O: Objective + ?Sized>(ens: &O, x: &[f64]) -> Result<GradientStatistics> {
    check_point(ens, x)?;
    let d = ens.dim();
    let n = ens.num_samples();
    let mut g = vec![0.0; d];
    let mut acc = RunningMean::new(d);
    let mut fisher = DMatrix::<f64>::zeros(d, d);
    let mut per_sample_norms = Vec::with_capacity(n);
    for i in 0..n {
        ens.sample_grad_into(i, x, &mut g);
        acc.push(&g);
        per_sample_norms.push(norm(&g));
        for r in 0..d {
            for c in 0..d {
                fisher[(r, c)] += g[r] * g[c];
            }
        }
    }
    fisher /= n as f64;
    let mean_grad = acc.into_mean();
    let mut covariance = fisher.clone();
    for r in 0..d {
        for c in 0..d {
            covariance[(r, c)] -= mean_grad[r] * mean_grad[c];
        }
    }
    let trace = clamp_trace(covariance.trace());
    if trace.is_nan() {
        return Err(Error::NonFinite("noise covariance"));
    }
    Ok(GradientStatistics {
        mean_grad,
        covariance,
        trace,
        fisher,
        per_sample_norms,
    })
}

/// How an expectation over random subsets is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ExpectationMode {
    /// Enumerate all `C(n,k)` subsets; refused above [`EXACT_SUBSET_LIMIT`].
    Exact,
    /// Average over `samples` uniformly drawn subsets.
    MonteCarlo { samples: usize, seed: u64 },
    /// Exact when allowed, otherwise Monte Carlo.
    Auto { samples: usize, seed: u64 },
}

/// A scalar expectation with its standard error (zero when exact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub exact: bool,
    pub samples: usize,
}

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for j in 0..k {
        acc = acc * (n - j) as u128 / (j + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Lexicographic iterator over the `k`-subsets of `{0..n−1}`.
pub struct Combinations {
    n: usize,
    current: Vec<usize>,
    done: bool,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (0..k).collect(),
            done: k > n || k == 0,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let k = self.current.len();
        let mut j = k;
        loop {
            if j == 0 {
                self.done = true;
                break;
            }
            j -= 1;
            if self.current[j] < self.n - k + j {
                self.current[j] += 1;
                for t in j + 1..k {
                    self.current[t] = self.current[t - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Resolved subset source: either all subsets or a seeded list of draws.
pub(crate) enum SubsetPlan {
    Exact,
    Sampled { samples: usize, stream: SeedStream },
}

impl SubsetPlan {
    pub(crate) fn resolve(n: usize, k: usize, mode: ExpectationMode) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::Config(format!("subset size {k} must lie in 1..={n}")));
        }
        let allowed = binomial(n, k) <= EXACT_SUBSET_LIMIT;
        match mode {
            ExpectationMode::Exact if allowed => Ok(SubsetPlan::Exact),
            ExpectationMode::Exact => Err(Error::Capability(format!(
                "exact enumeration of C({n},{k}) subsets exceeds {EXACT_SUBSET_LIMIT}"
            ))),
            ExpectationMode::Auto { .. } if allowed => Ok(SubsetPlan::Exact),
            ExpectationMode::Auto { samples, seed } | ExpectationMode::MonteCarlo { samples, seed } => {
                if samples < 2 {
                    return Err(Error::Config("Monte Carlo needs at least 2 samples".into()));
                }
                Ok(SubsetPlan::Sampled {
                    samples,
                    stream: SeedStream::new(seed).fork(tag::SUBSET),
                })
            }
        }
    }

    pub(crate) fn is_exact(&self) -> bool {
        matches!(self, SubsetPlan::Exact)
    }

    /// Visits every subset (exact) or every draw (sampled), in a fixed order.
    pub(crate) fn for_each(&self, n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
        match self {
            SubsetPlan::Exact => Combinations::new(n, k).for_each(|s| visit(&s)),
            SubsetPlan::Sampled { samples, stream } => {
                for j in 0..*samples {
                    let mut rng = stream.fork(j as u64).rng();
                    let s = index::sample(&mut rng, n, k).into_vec();
                    visit(&s);
                }
            }
        }
    }
}

/// Mean and standard error of a scalar functional over random subsets.
pub(crate) fn subset_mean<O: Objective + ?Sized>(
    ens: &O,
    k: usize,
    mode: ExpectationMode,
    mut value: impl FnMut(&[usize]) -> f64,
) -> Result<Estimate> {
    let n = ens.num_samples();
    let plan = SubsetPlan::resolve(n, k, mode)?;
    let mut count = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    plan.for_each(n, k, |s| {
        let v = value(s);
        count += 1;
        let delta = v - mean;
        mean += delta / count as f64;
        m2 += delta * (v - mean);
    });
    let std_error = if plan.is_exact() || count < 2 {
        0.0
    } else {
        (m2 / (count - 1) as f64 / count as f64).sqrt()
    };
    Ok(Estimate {
        mean,
        std_error,
        exact: plan.is_exact(),
        samples: count,
    })
}

/// `E‖∇f_γ(x)‖` over uniform size-`k` subsets (mean-gradient form).
///
/// Multiply by `k` for the `E‖Σ_{i∈γ} ∇f_i(x)‖` form.
pub fn expected_batch_grad_norm<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    k: usize,
    mode: ExpectationMode,
) -> Result<Estimate> {
    check_point(ens, x)?;
    let n = ens.num_samples();
    let d = ens.dim();
    // Per-sample gradients are computed once and reused for every subset.
    let mut grads = vec![0.0; n * d];
    for i in 0..n {
        ens.sample_grad_into(i, x, &mut grads[i * d..(i + 1) * d]);
    }
    let mut acc = RunningMean::new(d);
    subset_mean(ens, k, mode, |s| {
        acc.reset();
        for &i in s {
            acc.push(&grads[i * d..(i + 1) * d]);
        }
        norm(acc.mean())
    })
}

/// Outcome of the gradient-norm sandwich check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBoundReport {
    /// `‖∇f(x)‖`
    pub lower: f64,
    /// `E‖∇f_γ(x)‖`
    pub value: f64,
    /// `√(‖∇f(x)‖² + tr V(x)/k)`
    pub upper: f64,
    pub tolerance: f64,
    pub std_error: f64,
    pub holds: bool,
}

/// Checks `‖∇f‖ ≤ E‖∇f_γ‖ ≤ √(‖∇f‖² + tr V/k)`; the tolerance is 3 standard
/// errors for Monte Carlo values and `1e-12` for exact ones.
pub fn check_norm_bounds<O: Objective + ?Sized>(
    ens: &O,
    x: &[f64],
    k: usize,
    mode: ExpectationMode,
) -> Result<NormBoundReport> {
    let stats = grad_stats(ens, x)?;
    let est = expected_batch_grad_norm(ens, x, k, mode)?;
    let g2 = dot(&stats.mean_grad, &stats.mean_grad);
    let lower = g2.sqrt();
    let upper = (g2 + stats.trace / k as f64).sqrt();
    let tolerance = if est.exact { 1e-12 } else { 3.0 * est.std_error };
    Ok(NormBoundReport {
        lower,
        value: est.mean,
        upper,
        tolerance,
        std_error: est.std_error,
        holds: lower - tolerance <= est.mean && est.mean <= upper + tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{EnsembleSpec, HeteroscedasticSpec, ShiftedQuadraticSpec};

    #[test]
    fn full_batch_plan_is_a_permutation_with_one_block() {
        let plan = sample_batch(4, 4, 4, &SeedStream::new(1)).unwrap();
        let mut g = plan.gamma().to_vec();
        g.sort_unstable();
        assert_eq!(g, vec![0, 1, 2, 3]);
        assert_eq!(plan.num_blocks(), 1);
    }

    #[test]
    fn non_divisible_micro_size_is_rejected() {
        assert!(matches!(
            sample_batch(8, 4, 3, &SeedStream::new(0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_batch(3, 4, 2, &SeedStream::new(0)),
            Err(Error::Config(_))
        ));
        assert!(BatchPlan::new(vec![0, 0], 1, 4).is_err());
        assert!(BatchPlan::new(vec![0, 5], 1, 4).is_err());
    }

    #[test]
    fn micro_partition_is_disjoint_and_covers_gamma() {
        let plan = sample_batch(8, 4, 2, &SeedStream::new(9)).unwrap();
        let blocks: Vec<&[usize]> = plan.partition().collect();
        assert_eq!(blocks.len(), 2);
        let mut all: Vec<usize> = blocks.concat();
        assert_eq!(all, plan.gamma());
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn inclusion_frequency_is_uniform() {
        // n=8, |γ|=4: each index is included with probability 1/2.
        let draws = 100_000;
        let root = SeedStream::new(2024);
        let mut counts = [0usize; 8];
        for j in 0..draws {
            let plan = sample_batch(8, 4, 2, &root.fork(j)).unwrap();
            for &i in plan.gamma() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn hetero_statistics_by_hand() {
        let ens = EnsembleSpec::HeteroscedasticQuadratic(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 1))
            .build()
            .unwrap();
        let s = grad_stats(&ens, &[2.0]).unwrap();
        assert_eq!(s.mean_grad, vec![4.0]);
        assert!((s.covariance[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((s.trace - 4.0).abs() < 1e-12);
    }

    #[test]
    fn identical_gradients_have_zero_covariance() {
        let spec = ShiftedQuadraticSpec::with_centers(vec![vec![1.0, 2.0]; 5], vec![1.0, 3.0]);
        let ens = EnsembleSpec::ShiftedQuadratic(spec).build().unwrap();
        let s = grad_stats(&ens, &[0.3, -0.7]).unwrap();
        assert_eq!(s.trace, 0.0);
        assert!(s.covariance.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn combinations_count_and_order() {
        let all: Vec<Vec<usize>> = Combinations::new(5, 3).collect();
        assert_eq!(all.len() as u64, binomial(5, 3));
        assert_eq!(all[0], vec![0, 1, 2]);
        assert_eq!(all.last().unwrap(), &vec![2, 3, 4]);
        assert_eq!(binomial(15, 8), 6435);
        assert_eq!(binomial(16, 8), 12870);
        assert_eq!(Combinations::new(3, 3).count(), 1);
    }

    #[test]
    fn full_subset_expectation_is_the_full_gradient_norm() {
        let ens = EnsembleSpec::ShiftedQuadratic(ShiftedQuadraticSpec::isotropic(2, 6, 1.0, 3))
            .build()
            .unwrap();
        let x = [0.4, -0.1];
        let est = expected_batch_grad_norm(&ens, &x, 6, ExpectationMode::Exact).unwrap();
        let g = crate::objectives::full_grad(&ens, &x).unwrap();
        assert!((est.mean - norm(&g)).abs() < 1e-15);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn exact_mode_refuses_large_enumerations() {
        let ens = EnsembleSpec::ShiftedQuadratic(ShiftedQuadraticSpec::isotropic(1, 40, 1.0, 3))
            .build()
            .unwrap();
        let r = expected_batch_grad_norm(&ens, &[0.0], 5, ExpectationMode::Exact);
        assert!(matches!(r, Err(Error::Capability(_))));
    }

    #[test]
    fn zero_noise_sandwich_collapses() {
        let spec = ShiftedQuadraticSpec::with_centers(vec![vec![1.0, -1.0]; 6], vec![1.0, 2.0]);
        let ens = EnsembleSpec::ShiftedQuadratic(spec).build().unwrap();
        let r = check_norm_bounds(&ens, &[0.0, 0.5], 2, ExpectationMode::Exact).unwrap();
        assert!(r.holds);
        assert!((r.lower - r.value).abs() < 1e-15 && (r.upper - r.value).abs() < 1e-15);
    }
}
