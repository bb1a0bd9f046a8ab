//! Seeded training runs with per-step records.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use samlab_core::linalg::norm;
use samlab_core::objectives::{Ensemble, Objective};
use samlab_core::optimizers::{step, OptimizerConfig};
use samlab_core::rng::SeedStream;

use crate::report::{csv_string, num};

/// One recorded step. `guarded_count` is cumulative since step 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub trace_v: f64,
    pub guarded_count: usize,
}

/// A labelled optimizer setting trained across seeds.
#[derive(Debug, Clone)]
pub struct Arm {
    pub label: String,
    pub config: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub rows: Vec<StepRow>,
    /// Elapsed nanoseconds at each recorded row; never part of the
    /// deterministic outputs.
    #[serde(skip)]
    pub wall_ns: Vec<u128>,
    pub final_loss: f64,
    pub final_trace_v: f64,
    /// First step after which the iterate lies in the flat basin.
    pub escape_step: Option<usize>,
}

fn measure(ens: &Ensemble, x: &[f64], step: usize, guarded: usize) -> StepRow {
    let mut g = vec![0.0; ens.dim()];
    ens.mean_grad_into(x, &mut g);
    StepRow {
        step,
        loss: ens.mean_loss(x),
        grad_norm: norm(&g),
        trace_v: ens.noise_trace(x).max(0.0),
        guarded_count: guarded,
    }
}

/// Starting point for a seed: the MLP draws a fresh initialization per
/// seed, other families use `x0` or their natural start.
pub fn start_point(ens: &Ensemble, x0: Option<&[f64]>, seed: u64) -> Vec<f64> {
    match (x0, ens) {
        (Some(x), _) => x.to_vec(),
        (None, Ensemble::TinyMlp(m)) => m.initial_point_for(seed),
        (None, e) => e.default_start(),
    }
}

/// Trains `arm` for `steps` steps; step `k` draws from
/// `SeedStream::new(seed).fork(k)`.
pub fn train(
    ens: &Ensemble,
    arm: &Arm,
    x0: &[f64],
    steps: usize,
    seed: u64,
    record_every: usize,
) -> samlab_core::Result<RunRecord> {
    arm.config.validate()?;
    let clock = Instant::now();
    let stream = SeedStream::new(seed);
    let mut x = x0.to_vec();
    let mut guarded = 0;
    let mut rows = vec![measure(ens, &x, 0, 0)];
    let mut wall_ns = vec![clock.elapsed().as_nanos()];
    let mut escape_step = None;
    for k in 0..steps {
        let out = step(ens, &x, &arm.config, &stream.fork(k as u64))?;
        x = out.x_next;
        guarded += out.guarded;
        if escape_step.is_none() {
            if let Ensemble::TwoBasin(tb) = ens {
                if tb.in_flat_region(&x) {
                    escape_step = Some(k + 1);
                }
            }
        }
        if (k + 1) % record_every == 0 || k + 1 == steps {
            rows.push(measure(ens, &x, k + 1, guarded));
            wall_ns.push(clock.elapsed().as_nanos());
        }
    }
    let last = rows.last().expect("at least one row");
    Ok(RunRecord {
        label: arm.label.clone(),
        seed,
        final_loss: last.loss,
        final_trace_v: last.trace_v,
        rows,
        wall_ns,
        escape_step,
    })
}

/// Every `(arm, seed)` pair, run in parallel and returned arm-major in
/// seed order.
pub fn train_all(
    ens: &Ensemble,
    arms: &[Arm],
    x0: Option<&[f64]>,
    seeds: &[u64],
    steps: usize,
    record_every: usize,
) -> samlab_core::Result<Vec<RunRecord>> {
    let jobs: Vec<(usize, u64)> = (0..arms.len())
        .flat_map(|a| seeds.iter().map(move |s| (a, *s)))
        .collect();
    jobs.into_par_iter()
        .map(|(a, s)| train(ens, &arms[a], &start_point(ens, x0, s), steps, s, record_every))
        .collect()
}

/// `label,seed,step,loss,grad_norm,trace_V,guarded_count`
pub fn runs_csv(records: &[RunRecord]) -> String {
    csv_string(
        &["label", "seed", "step", "loss", "grad_norm", "trace_V", "guarded_count"],
        records.iter().flat_map(|r| {
            r.rows.iter().map(move |row| {
                vec![
                    r.label.clone(),
                    r.seed.to_string(),
                    row.step.to_string(),
                    num(row.loss),
                    num(row.grad_norm),
                    num(row.trace_v),
                    row.guarded_count.to_string(),
                ]
            })
        }),
    )
}

/// `label,seed,step,wall_ns`
pub fn wall_csv(records: &[RunRecord]) -> String {
    csv_string(
        &["label", "seed", "step", "wall_ns"],
        records.iter().flat_map(|r| {
            r.rows
                .iter()
                .zip(&r.wall_ns)
                .map(move |(row, w)| vec![r.label.clone(), r.seed.to_string(), row.step.to_string(), w.to_string()])
        }),
    )
}

/// `label,seed,final_loss,final_trace_V,escape_step` (empty when none).
pub fn finals_csv(records: &[RunRecord]) -> String {
    csv_string(
        &["label", "seed", "final_loss", "final_trace_V", "escape_step"],
        records.iter().map(|r| {
            vec![
                r.label.clone(),
                r.seed.to_string(),
                num(r.final_loss),
                num(r.final_trace_v),
                r.escape_step.map(|s| s.to_string()).unwrap_or_default(),
            ]
        }),
    )
}
