use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::objectives::{check_point, Objective};
use crate::optimizers::{step, OptimizerConfig};
use crate::rng::{tag, SeedStream};
use crate::sde::{DiffusionOrder, EulerMaruyama, SdeModel, SdeVariant, DEFAULT_SUBSTEPS};

/// Replicates per aggregation chunk. Chunk sums are combined pairwise in
/// chunk order, so results do not depend on the worker count.
const CHUNK: usize = 1024;

const DISCRETE_STREAM: u64 = 1;
const SDE_STREAM: u64 = 2;
const GUARD_STREAM: u64 = 3;

/// Polynomial test functions of degree ≤ 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Coordinate(usize),
    Product(usize, usize),
    SquaredNorm,
    Constant(f64),
}

impl TestFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            TestFunction::Coordinate(i) => x[i],
            TestFunction::Product(i, j) => x[i] * x[j],
            TestFunction::SquaredNorm => x.iter().map(|v| v * v).sum(),
            TestFunction::Constant(c) => c,
        }
    }

    pub fn id(&self) -> String {
        match *self {
            TestFunction::Coordinate(i) => format!("x{i}"),
            TestFunction::Product(i, j) => format!("x{i}*x{j}"),
            TestFunction::SquaredNorm => "norm2".into(),
            TestFunction::Constant(c) => format!("const{c}"),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        let ok = match *self {
            TestFunction::Coordinate(i) => i < d,
            TestFunction::Product(i, j) => i < d && j < d,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "test function {} out of range for d = {d}",
                self.id()
            )))
        }
    }

    /// Coordinates, pairwise products and the squared norm.
    pub fn battery(d: usize) -> Vec<TestFunction> {
        let mut out: Vec<TestFunction> = (0..d).map(TestFunction::Coordinate).collect();
        for i in 0..d {
            for j in i..d {
                out.push(TestFunction::Product(i, j));
            }
        }
        out.push(TestFunction::SquaredNorm);
        out
    }
}

/// Settings shared by every cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakGridConfig {
    pub variant: SdeVariant,
    pub batch_size: usize,
    pub micro_size: usize,
    pub eta_list: Vec<f64>,
    pub rho_list: Vec<f64>,
    pub horizon: f64,
    pub replicates: usize,
    pub seed: u64,
    pub substeps: usize,
    pub order: DiffusionOrder,
    /// Re-run the SDE side with `2κ` and compare cell errors.
    pub kappa_guard: bool,
}

impl WeakGridConfig {
    pub fn new(variant: SdeVariant, batch_size: usize, eta_list: Vec<f64>, rho_list: Vec<f64>) -> Self {
        Self {
            variant,
            batch_size,
            micro_size: batch_size,
            eta_list,
            rho_list,
            horizon: 1.0,
            replicates: 100_000,
            seed: 0,
            substeps: DEFAULT_SUBSTEPS,
            order: DiffusionOrder::Sigma00Only,
            kappa_guard: false,
        }
    }
}

/// `E[g(x_k)]` and `E[g(X_{kη})]` per step for every test function.
struct Moments {
    /// `[g][k]`
    mean: Vec<Vec<f64>>,
    var_of_mean: Vec<Vec<f64>>,
    diverged: usize,
}

/// Sums `g(state_k)` and `g(state_k)²` over the replicates of one chunk.
struct ChunkSums {
    sum: Vec<Vec<f64>>,
    sq: Vec<Vec<f64>>,
    diverged: usize,
}

fn aggregate(chunks: Vec<ChunkSums>, n_g: usize, steps: usize, replicates: usize) -> Moments {
    let r = replicates as f64;
    let mut mean = vec![vec![0.0; steps + 1]; n_g];
    let mut var_of_mean = vec![vec![0.0; steps + 1]; n_g];
    let mut col = Vec::with_capacity(chunks.len());
    for g in 0..n_g {
        for k in 0..=steps {
            col.clear();
            col.extend(chunks.iter().map(|c| c.sum[g][k]));
            let m = pairwise_sum(&col) / r;
            col.clear();
            col.extend(chunks.iter().map(|c| c.sq[g][k]));
            let m2 = pairwise_sum(&col) / r;
            mean[g][k] = m;
            var_of_mean[g][k] = ((m2 - m * m) * r / (r - 1.0)).max(0.0) / r;
        }
    }
    Moments {
        mean,
        var_of_mean,
        diverged: chunks.iter().map(|c| c.diverged).sum(),
    }
}

fn chunk_ranges(replicates: usize) -> Vec<(usize, usize)> {
    (0..replicates.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(replicates)))
        .collect()
}

fn discrete_moments<O: Objective + ?Sized>(
    ens: &O,
    x0: &[f64],
    cfg: &OptimizerConfig,
    battery: &[TestFunction],
    steps: usize,
    replicates: usize,
    stream: &SeedStream,
) -> Result<Moments> {
    let n_g = battery.len();
    let chunks: Result<Vec<ChunkSums>> = chunk_ranges(replicates)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut sum = vec![vec![0.0; steps + 1]; n_g];
            let mut sq = vec![vec![0.0; steps + 1]; n_g];
            let mut diverged = 0;
            for r in lo..hi {
                let rs = stream.fork(r as u64);
                let mut x = x0.to_vec();
                for k in 0..=steps {
                    if k > 0 {
                        x = step(ens, &x, cfg, &rs.fork(k as u64))?.x_next;
                    }
                    for (g, f) in battery.iter().enumerate() {
                        let v = f.eval(&x);
                        sum[g][k] += v;
                        sq[g][k] += v * v;
                    }
                }
                diverged += x.iter().any(|v| !v.is_finite()) as usize;
            }
            Ok(ChunkSums { sum, sq, diverged })
        })
        .collect();
    Ok(aggregate(chunks?, n_g, steps, replicates))
}

#[allow(clippy::too_many_arguments)]
fn sde_moments<O: Objective + ?Sized>(
    model: &SdeModel<'_, O>,
    x0: &[f64],
    battery: &[TestFunction],
    steps: usize,
    kappa: usize,
    replicates: usize,
    stream: &SeedStream,
) -> Result<Moments> {
    let n_g = battery.len();
    let chunks: Result<Vec<ChunkSums>> = chunk_ranges(replicates)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut em = EulerMaruyama::new(model, kappa)?;
            let mut sum = vec![vec![0.0; steps + 1]; n_g];
            let mut sq = vec![vec![0.0; steps + 1]; n_g];
            let mut diverged = 0;
            let mut x = x0.to_vec();
            for r in lo..hi {
                let mut rng = stream.fork(r as u64).rng();
                x.copy_from_slice(x0);
                let mut alive = true;
                for k in 0..=steps {
                    if k > 0 && alive {
                        for _ in 0..kappa {
                            if !em.step(&mut x, &mut rng)? {
                                alive = false;
                                break;
                            }
                        }
                    }
                    for (g, f) in battery.iter().enumerate() {
                        let v = f.eval(&x);
                        sum[g][k] += v;
                        sq[g][k] += v * v;
                    }
                }
                diverged += (!alive) as usize;
            }
            Ok(ChunkSums { sum, sq, diverged })
        })
        .collect();
    Ok(aggregate(chunks?, n_g, steps, replicates))
}

/// One `(η, ρ, g)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakCell {
    pub eta: f64,
    pub rho: f64,
    pub g_id: String,
    /// `max_k |E g(x_k) − E g(X_{kη})|`
    pub error: f64,
    /// Standard error of the difference at the maximizing step.
    pub se: f64,
    pub argmax_step: usize,
    pub n_rep: usize,
    pub inconclusive: bool,
    /// Cell error recomputed with `2κ` substeps, when the guard ran.
    pub guard_error: Option<f64>,
    /// The `2κ` error differs by at most one standard error.
    pub guard_ok: Option<bool>,
    pub diverged_paths: usize,
}

/// Least-squares line `y = intercept + slope·x` with residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub points: usize,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = xs.iter().zip(ys).map(|(x, y)| y - intercept - slope * x).collect();
    Some(LineFit {
        slope,
        intercept,
        residuals,
        points: n,
    })
}

/// Slope fits for one test function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub g_id: String,
    /// `log error` vs `log η` at the smallest `ρ`.
    pub eta_slope: Option<LineFit>,
    /// `error` vs `ρ²` at the smallest `η`; reported, never asserted.
    pub rho_squared_fit: Option<LineFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakApproxReport {
    pub config: WeakGridConfig,
    pub x0: Vec<f64>,
    pub cells: Vec<WeakCell>,
    pub slopes: Vec<SlopeSummary>,
}

impl WeakApproxReport {
    pub fn inconclusive_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.inconclusive).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `eta,rho,g_id,error,se,n_rep` rows.
    pub fn to_csv(&self) -> String {
        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(["eta", "rho", "g_id", "error", "se", "n_rep"])
            .expect("in-memory write");
        for c in &self.cells {
            wr.write_record([
                c.eta.to_string(),
                c.rho.to_string(),
                c.g_id.clone(),
                c.error.to_string(),
                c.se.to_string(),
                c.n_rep.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(wr.into_inner().expect("flush")).expect("utf8")
    }
}

fn max_gap(disc: &Moments, sde: &Moments, g: usize) -> (f64, f64, usize) {
    let mut best = (0.0, 0.0, 0);
    for k in 0..disc.mean[g].len() {
        let e = (disc.mean[g][k] - sde.mean[g][k]).abs();
        if e > best.0 || k == 0 {
            let se = (disc.var_of_mean[g][k] + sde.var_of_mean[g][k]).sqrt();
            best = (e, se, k);
        }
    }
    best
}

/// Weak error `max_k |E g(x_k) − E g(X_{kη})|` over the `(η, ρ)` grid.
/// The discrete and SDE ensembles use disjoint seed streams.
pub fn weak_error_grid<O: Objective + ?Sized>(
    ens: &O,
    x0: &[f64],
    battery: &[TestFunction],
    cfg: &WeakGridConfig,
) -> Result<WeakApproxReport> {
    check_point(ens, x0)?;
    if battery.is_empty() || cfg.eta_list.is_empty() || cfg.rho_list.is_empty() {
        return Err(Error::Config(
            "weak grid needs test functions, eta and rho values".into(),
        ));
    }
    for f in battery {
        f.check(ens.dim())?;
    }
    if cfg.eta_list.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(Error::Config("weak-order runs need eta in (0, 1)".into()));
    }
    if cfg.replicates < 2 {
        return Err(Error::Config("need at least 2 replicates".into()));
    }
    let root = SeedStream::new(cfg.seed).fork(tag::REPLICATE);
    let mut cells = Vec::new();
    for (ei, &eta) in cfg.eta_list.iter().enumerate() {
        for (ri, &rho) in cfg.rho_list.iter().enumerate() {
            let steps = (cfg.horizon / eta).floor() as usize;
            let opt =
                OptimizerConfig::new(cfg.variant.optimizer(), eta, rho, cfg.batch_size).with_micro_size(cfg.micro_size);
            opt.validate()?;
            let model = SdeModel::new(ens, cfg.variant, eta, rho, cfg.batch_size)
                .with_micro_size(cfg.micro_size)
                .with_order(cfg.order);
            let cell_stream = root.fork2(ei as u64, ri as u64);
            let disc = discrete_moments(
                ens,
                x0,
                &opt,
                battery,
                steps,
                cfg.replicates,
                &cell_stream.fork(DISCRETE_STREAM),
            )?;
            let sde = sde_moments(
                &model,
                x0,
                battery,
                steps,
                cfg.substeps,
                cfg.replicates,
                &cell_stream.fork(SDE_STREAM),
            )?;
            let guard = if cfg.kappa_guard {
                Some(sde_moments(
                    &model,
                    x0,
                    battery,
                    steps,
                    2 * cfg.substeps,
                    cfg.replicates,
                    &cell_stream.fork(GUARD_STREAM),
                )?)
            } else {
                None
            };
            for (g, f) in battery.iter().enumerate() {
                let (error, se, argmax_step) = max_gap(&disc, &sde, g);
                let (guard_error, guard_ok) = match &guard {
                    Some(gm) => {
                        let (ge, gse, _) = max_gap(&disc, gm, g);
                        let tol = (se * se + gse * gse).sqrt();
                        (Some(ge), Some((ge - error).abs() <= tol))
                    }
                    None => (None, None),
                };
                cells.push(WeakCell {
                    eta,
                    rho,
                    g_id: f.id(),
                    error,
                    se,
                    argmax_step,
                    n_rep: cfg.replicates,
                    inconclusive: se > 0.5 * error,
                    guard_error,
                    guard_ok,
                    diverged_paths: disc.diverged + sde.diverged,
                });
            }
        }
    }
    let rho_min = cfg.rho_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let eta_min = cfg.eta_list.iter().cloned().fold(f64::INFINITY, f64::min);
    let slopes = battery
        .iter()
        .map(|f| {
            let id = f.id();
            let at_rho: Vec<&WeakCell> = cells.iter().filter(|c| c.g_id == id && c.rho == rho_min).collect();
            let positive: Vec<&&WeakCell> = at_rho.iter().filter(|c| c.error > 0.0).collect();
            let eta_slope = fit_line(
                &positive.iter().map(|c| c.eta.ln()).collect::<Vec<_>>(),
                &positive.iter().map(|c| c.error.ln()).collect::<Vec<_>>(),
            );
            let at_eta: Vec<&WeakCell> = cells.iter().filter(|c| c.g_id == id && c.eta == eta_min).collect();
            let rho_squared_fit = fit_line(
                &at_eta.iter().map(|c| c.rho * c.rho).collect::<Vec<_>>(),
                &at_eta.iter().map(|c| c.error).collect::<Vec<_>>(),
            );
            SlopeSummary {
                g_id: id,
                eta_slope,
                rho_squared_fit,
            }
        })
        .collect();
    Ok(WeakApproxReport {
        config: cfg.clone(),
        x0: x0.to_vec(),
        cells,
        slopes,
    })
}
