use serde_json::json;

use samlab_core::linalg::{dot, norm};
use samlab_core::objectives::{Ensemble, Objective};
use samlab_core::optimizers::fd::{
    fd_norm_estimate_fn, fd_squared_estimate, gaussian_fourth_moment_mc, rademacher_fourth_moment_exhaustive, Probes,
    EXHAUSTIVE_PROBE_MAX_DIM,
};
use samlab_core::optimizers::{gibbs_weights, OptimizerConfig, ScoreNormalization, Variant};
use samlab_core::rng::{tag, SeedStream};
use samlab_core::sde::SdeVariant;
use samlab_core::stochastic::{check_norm_bounds, ExpectationMode};
use samlab_core::verify::{
    factor_checks, fit_line, moment_scaling, one_step_moments, scale_checks, weak_error_grid, MomentReport,
    TestFunction, WeakGridConfig,
};

use crate::config::{ConfigError, Experiment, RunConfig};
use crate::report::{csv_string, median, median_se, non_increasing, num, Check, MedianEntry, Outcome};
use crate::training::{finals_csv, runs_csv, train_all, wall_csv, Arm, RunRecord};

type Res = Result<Outcome, ConfigError>;

/// Runs the experiment named in `cfg`.
pub fn run(cfg: &RunConfig) -> Res {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::VerifyDrift => verify_drift(cfg),
        Experiment::VerifyWeakOrder => verify_weak_order(cfg),
        Experiment::VerifyProp1 => verify_prop1(cfg),
        Experiment::VerifyEstimator => verify_estimator(cfg),
        Experiment::Msweep | Experiment::Escape | Experiment::Trace => training(cfg),
        Experiment::DeltaSweep => delta_sweep(cfg),
    }
}

fn start(ens: &Ensemble, cfg: &RunConfig) -> Result<Vec<f64>, ConfigError> {
    let x = cfg.x0.clone().unwrap_or_else(|| ens.default_start());
    if x.len() != ens.dim() {
        return Err(ConfigError(format!(
            "x0 has {} entries, ensemble dimension is {}",
            x.len(),
            ens.dim()
        )));
    }
    Ok(x)
}

fn optimizer(cfg: &RunConfig, variant: Variant, batch: usize, m: Option<usize>) -> OptimizerConfig {
    let mut o = OptimizerConfig::new(variant, cfg.eta, cfg.rho, batch);
    o.grad_norm_floor = cfg.grad_norm_floor;
    if let Some(m) = m {
        o = o.with_micro_size(m);
    }
    if variant == Variant::ReweightedSam {
        o = o.with_reweighting(cfg.lambda, cfg.delta, cfg.q_probes);
    }
    o
}

fn moment_rows(level: &str, k: usize, r: &MomentReport) -> Vec<Vec<String>> {
    (0..r.x.len())
        .map(|j| {
            vec![
                r.variant.to_string(),
                k.to_string(),
                level.to_string(),
                num(r.eta),
                num(r.rho),
                j.to_string(),
                num(r.empirical_first_moment[j]),
                num(r.empirical_first_se[j]),
                num(r.predicted_first_moment[j]),
                num(r.predicted_first_se[j]),
            ]
        })
        .collect()
}

fn residual_row(level: &str, k: usize, r: &MomentReport) -> Vec<String> {
    vec![
        r.variant.to_string(),
        k.to_string(),
        level.to_string(),
        num(r.eta),
        num(r.rho),
        r.replicates.to_string(),
        num(r.residual_first),
        num(r.residual_first_se),
        r.first_moment_consistent().to_string(),
        num(r.residual_second),
        num(r.residual_second_se),
        r.second_moment_consistent().to_string(),
    ]
}

/// One-step moment matching per variant and batch size, the residual
/// scaling under `(η, ρ) → (η/2, ρ/2)`, and diffusion-factor diagnostics.
fn verify_drift(cfg: &RunConfig) -> Res {
    let ens = cfg.ensemble.build()?;
    let x = start(&ens, cfg)?;
    let seed = cfg.seeds[0];
    let mode = ExpectationMode::Auto { samples: 4096, seed };
    let mut out = Outcome::new(cfg.clone());
    let mut moments = Vec::new();
    let mut residuals = Vec::new();
    let mut results = Vec::new();
    for &v in &cfg.variants {
        for &k in &cfg.k_list {
            let opt = if v.uses_micro_batches() {
                if !cfg.batch_size.is_multiple_of(k) {
                    return Err(ConfigError(format!("k = {k} must divide batch_size for {v}")));
                }
                optimizer(cfg, v, cfg.batch_size, Some(k))
            } else {
                optimizer(cfg, v, k, None)
            };
            let sc = moment_scaling(&ens, &x, &opt, cfg.replicates, seed, mode)?;
            let name = format!("{v} k={k}");
            let c = &sc.coarse;
            out.checks.push(Check::assert(
                format!("first moment {name}"),
                c.first_moment_consistent(),
                format!(
                    "empirical {:?} vs predicted {:?}: residual {:.3e} ≤ 3·{:.3e} + ρ²",
                    c.empirical_first_moment, c.predicted_first_moment, c.residual_first, c.residual_first_se
                ),
            ));
            out.checks.push(Check::assert(
                format!("residual scaling {name}"),
                sc.passed,
                format!(
                    "shrink {:.3} (residuals {:.3e} → {:.3e}){}",
                    sc.shrink_factor,
                    c.residual_first,
                    sc.fine.residual_first,
                    if sc.at_noise_floor {
                        ", both at the noise floor"
                    } else {
                        ""
                    }
                ),
            ));
            let second = one_step_moments(&ens, &x, &opt, cfg.replicates, seed, mode, cfg.diffusion_order)?;
            out.checks.push(Check::info(
                format!("second moment {name}"),
                format!(
                    "residual {:.3e} (SE {:.3e}) with {:?}",
                    second.residual_second, second.residual_second_se, cfg.diffusion_order
                ),
            ));
            for (level, r) in [("coarse", &sc.coarse), ("fine", &sc.fine)] {
                moments.extend(moment_rows(level, k, r));
                residuals.push(residual_row(level, k, r));
            }
            results.push(json!({"variant": v, "k": k, "scaling": sc}));
        }
    }
    let factors = factor_checks(&[cfg.rho.min(0.1)], cfg.eta)?;
    let bad: Vec<_> = factors.iter().filter(|f| !f.passed()).collect();
    let worst = factors.iter().map(|f| f.reconstruction_error).fold(0.0, f64::max);
    out.checks.push(Check::assert(
        "diffusion factor",
        bad.is_empty(),
        format!(
            "{} factors, max reconstruction error {worst:.2e}, {} failing",
            factors.len(),
            bad.len()
        ),
    ));
    let scales = scale_checks(8, &[1, 2, 4, 8], cfg.eta)?;
    out.checks.push(Check::assert(
        "m-variant diffusion scale",
        scales.iter().all(|s| s.ok),
        scales
            .iter()
            .map(|s| format!("m={} {:.6}", s.micro_size, s.measured))
            .collect::<Vec<_>>()
            .join(", "),
    ));
    out.files.insert(
        "moments.csv".into(),
        csv_string(
            &[
                "variant",
                "k",
                "level",
                "eta",
                "rho",
                "component",
                "empirical",
                "empirical_se",
                "predicted",
                "predicted_se",
            ],
            moments,
        ),
    );
    out.files.insert(
        "residuals.csv".into(),
        csv_string(
            &[
                "variant",
                "k",
                "level",
                "eta",
                "rho",
                "replicates",
                "residual_first",
                "residual_first_se",
                "first_consistent",
                "residual_second",
                "residual_second_se",
                "second_consistent",
            ],
            residuals,
        ),
    );
    out.results = json!({"moments": results, "diffusion_factors": factors, "scale_checks": scales});
    Ok(out)
}

/// Weak error grid per variant with `g ∈ {x₀, x₀²}` and log-log η slopes.
fn verify_weak_order(cfg: &RunConfig) -> Res {
    let ens = cfg.ensemble.build()?;
    let x = start(&ens, cfg)?;
    let battery = [TestFunction::Coordinate(0), TestFunction::Product(0, 0)];
    let mut out = Outcome::new(cfg.clone());
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut inconclusive = 0;
    for &v in &cfg.variants {
        let sv = SdeVariant::from_optimizer(v).ok_or_else(|| ConfigError(format!("{v} has no SDE")))?;
        let mut wc = WeakGridConfig::new(sv, cfg.batch_size, cfg.eta_list.clone(), cfg.rho_list.clone());
        if sv.is_micro() {
            let m = cfg
                .m_list
                .iter()
                .copied()
                .find(|m| cfg.batch_size.is_multiple_of(*m))
                .unwrap_or(cfg.batch_size);
            wc.micro_size = m;
        }
        wc.horizon = cfg.horizon;
        wc.replicates = cfg.replicates;
        wc.seed = cfg.seeds[0];
        wc.substeps = cfg.substeps;
        wc.order = cfg.diffusion_order;
        wc.kappa_guard = cfg.kappa_guard;
        let rep = weak_error_grid(&ens, &x, &battery, &wc)?;
        inconclusive += rep.inconclusive_cells();
        for c in &rep.cells {
            rows.push(vec![
                v.to_string(),
                num(c.eta),
                num(c.rho),
                c.g_id.clone(),
                num(c.error),
                num(c.se),
                c.n_rep.to_string(),
                c.argmax_step.to_string(),
                c.inconclusive.to_string(),
                c.guard_error.map(num).unwrap_or_default(),
                c.diverged_paths.to_string(),
            ]);
        }
        for s in &rep.slopes {
            match &s.eta_slope {
                Some(fit) => out.checks.push(Check::assert(
                    format!("eta slope {v} g={}", s.g_id),
                    fit.slope >= cfg.slope_min && fit.slope <= cfg.slope_max,
                    format!("{:.3} in [{}, {}]", fit.slope, cfg.slope_min, cfg.slope_max),
                )),
                None => out.checks.push(Check::inconclusive(
                    format!("eta slope {v} g={}", s.g_id),
                    "fewer than two usable η values",
                )),
            }
            if let Some(fit) = &s.rho_squared_fit {
                out.checks.push(Check::info(
                    format!("rho² fit {v} g={}", s.g_id),
                    format!("slope {:.4e}", fit.slope),
                ));
            }
        }
        if cfg.kappa_guard {
            let ok = rep.cells.iter().filter(|c| c.guard_ok == Some(true)).count();
            out.checks.push(Check::info(
                format!("2κ guard {v}"),
                format!("{ok}/{} cells agree within one SE", rep.cells.len()),
            ));
        }
        reports.push(rep);
    }
    let total: usize = reports.iter().map(|r| r.cells.len()).sum();
    let detail = format!(
        "{inconclusive}/{total} cells have SE > error/2 (allowed {})",
        cfg.max_inconclusive
    );
    if inconclusive > cfg.max_inconclusive {
        out.checks.push(Check::inconclusive("inconclusive cells", detail));
    } else {
        out.checks.push(Check::info("inconclusive cells", detail));
    }
    out.files.insert(
        "weak_errors.csv".into(),
        csv_string(
            &[
                "variant",
                "eta",
                "rho",
                "g_id",
                "error",
                "se",
                "n_rep",
                "argmax_step",
                "inconclusive",
                "guard_error",
                "diverged_paths",
            ],
            rows,
        ),
    );
    out.results = json!({"reports": reports});
    Ok(out)
}

/// Gradient-norm sandwich and monotonicity in `k` on seeded instances of
/// the configured family, one instance per seed.
fn verify_prop1(cfg: &RunConfig) -> Res {
    let mut out = Outcome::new(cfg.clone());
    let mut rows = Vec::new();
    let (mut sandwich_fail, mut mono_fail, mut total) = (0, 0, 0);
    for &seed in &cfg.seeds {
        let ens = with_seed(&cfg.ensemble, seed).build()?;
        if cfg.k_list.iter().any(|k| *k > ens.num_samples()) {
            return Err(ConfigError(
                "k_list entries must not exceed the number of samples".into(),
            ));
        }
        let x = match &cfg.x0 {
            Some(x) => x.clone(),
            None => {
                let mut rng = SeedStream::new(seed).fork(tag::INIT).rng();
                (0..ens.dim())
                    .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
                    .collect()
            }
        };
        let mode = ExpectationMode::Auto { samples: 20_000, seed };
        let mut prev: Option<(f64, f64)> = None;
        for &k in &cfg.k_list {
            let r = check_norm_bounds(&ens, &x, k, mode)?;
            total += 1;
            sandwich_fail += usize::from(!r.holds);
            let mono = match prev {
                Some((v, se)) => r.value <= v + cfg.tolerance_se * (se * se + r.std_error * r.std_error).sqrt() + 1e-12,
                None => true,
            };
            mono_fail += usize::from(!mono);
            prev = Some((r.value, r.std_error));
            rows.push(vec![
                seed.to_string(),
                k.to_string(),
                num(r.lower),
                num(r.value),
                num(r.std_error),
                num(r.upper),
                num(r.tolerance),
                r.holds.to_string(),
                mono.to_string(),
            ]);
        }
    }
    out.checks.push(Check::assert(
        "norm sandwich",
        sandwich_fail == 0,
        format!("{}/{total} (instance, k) pairs within bounds", total - sandwich_fail),
    ));
    out.checks.push(Check::assert(
        "monotone in k",
        mono_fail == 0,
        format!("{mono_fail} increases beyond {} SE", cfg.tolerance_se),
    ));
    out.files.insert(
        "norm_bounds.csv".into(),
        csv_string(
            &[
                "seed",
                "k",
                "lower",
                "value",
                "std_error",
                "upper",
                "tolerance",
                "holds",
                "monotone",
            ],
            rows,
        ),
    );
    out.results = json!({"instances": cfg.seeds.len(), "pairs": total});
    Ok(out)
}

fn with_seed(spec: &samlab_core::objectives::EnsembleSpec, seed: u64) -> samlab_core::objectives::EnsembleSpec {
    use samlab_core::objectives::EnsembleSpec as E;
    let mut s = spec.clone();
    match &mut s {
        E::ShiftedQuadratic(q) => q.seed = seed,
        E::HeteroscedasticQuadratic(h) => h.seed = seed,
        E::TwoBasin(t) => t.seed = seed,
        E::TinyMlp(m) => m.seed = seed,
    }
    s
}

/// Gibbs weights and the finite-difference norm estimator.
fn verify_estimator(cfg: &RunConfig) -> Res {
    let mut out = Outcome::new(cfg.clone());
    let scores = [0.3, 1.2, 2.5, 0.7, 1.9];
    let uniform = gibbs_weights(&scores, 0.0, ScoreNormalization::Standardize);
    out.checks.push(Check::assert(
        "gibbs λ=0 uniform",
        uniform.is_uniform(),
        format!("{:?}", uniform.weights),
    ));
    let pair = gibbs_weights(&[1.0, 2.0], 1.0, ScoreNormalization::None);
    let expect = [0.2689, 0.7311];
    let err = pair
        .weights
        .iter()
        .zip(expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    out.checks.push(Check::assert(
        "gibbs (1,2) at λ=1",
        err <= 1e-4,
        format!("{:?}, max deviation {err:.2e}", pair.weights),
    ));
    let mut entropy_rows = Vec::new();
    let mut monotone = true;
    for norm_mode in [ScoreNormalization::Standardize, ScoreNormalization::None] {
        let mut prev = f64::INFINITY;
        for &l in &cfg.lambda_list {
            let h = gibbs_weights(&scores, l, norm_mode).entropy();
            monotone &= h <= prev + 1e-15;
            prev = h;
            entropy_rows.push(vec![format!("{norm_mode:?}").to_lowercase(), num(l), num(h)]);
        }
    }
    out.checks.push(Check::assert(
        "gibbs entropy non-increasing in λ",
        monotone,
        format!("λ ∈ {:?}", cfg.lambda_list),
    ));

    let a = [1.0, -2.0, 0.5, 3.0, -1.0];
    let x = [0.2, -0.1, 0.7, 0.05, -0.3];
    let exact = dot(&a, &a);
    let sq = fd_squared_estimate(|p| dot(&a, p), &x, cfg.delta, Probes::ExhaustiveRademacher)?;
    let nrm = fd_norm_estimate_fn(|p| dot(&a, p), &x, cfg.delta, Probes::ExhaustiveRademacher)?;
    let lin_err = (sq - exact).abs().max((nrm - exact.sqrt()).abs());
    out.checks.push(Check::assert(
        "linear objective exact",
        lin_err <= 1e-12,
        format!("squared {sq} vs {exact}, norm {nrm}; error {lin_err:.2e}"),
    ));

    let v = [1.0, 1.0];
    let rad = rademacher_fourth_moment_exhaustive(&v)?;
    out.checks.push(Check::assert(
        "rademacher fourth moment",
        (rad - 8.0).abs() <= 1e-12,
        format!("{rad}"),
    ));
    let (gauss, gse) = gaussian_fourth_moment_mc(&v, cfg.draws, cfg.seeds[0]);
    out.checks.push(Check::assert(
        "gaussian fourth moment",
        (gauss - 12.0).abs() <= 0.2,
        format!("{gauss:.4} ± {gse:.4} over {} draws, target 12 ± 0.2", cfg.draws),
    ));
    out.files.insert(
        "gibbs_entropy.csv".into(),
        csv_string(&["normalization", "lambda", "entropy"], entropy_rows),
    );
    out.results = json!({
        "gibbs_pair": pair.weights,
        "linear": {"squared": sq, "norm": nrm, "exact_squared": exact},
        "fourth_moment": {"rademacher": rad, "gaussian": gauss, "gaussian_se": gse},
    });
    Ok(out)
}

/// Bias of the squared-norm estimator of sample 0 over the δ grid, with
/// exhaustive Rademacher probes so only the δ-dependence remains.
fn delta_sweep(cfg: &RunConfig) -> Res {
    let ens = cfg.ensemble.build()?;
    let x = start(&ens, cfg)?;
    if ens.dim() > EXHAUSTIVE_PROBE_MAX_DIM {
        return Err(ConfigError(format!(
            "delta-sweep enumerates probes; dimension must be ≤ {EXHAUSTIVE_PROBE_MAX_DIM}"
        )));
    }
    let mut g = vec![0.0; ens.dim()];
    ens.sample_grad_into(0, &x, &mut g);
    let exact = dot(&g, &g);
    let a: Vec<f64> = (0..ens.dim()).map(|j| 1.0 - 0.5 * j as f64).collect();
    let lin_exact = dot(&a, &a);
    let mut rows = Vec::new();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    let mut lin_max: f64 = 0.0;
    for &d in &cfg.delta_list {
        let est = fd_squared_estimate(|p| ens.sample_loss(0, p), &x, d, Probes::ExhaustiveRademacher)?;
        let bias = est - exact;
        let lin = fd_squared_estimate(|p| dot(&a, p), &x, d, Probes::ExhaustiveRademacher)?;
        lin_max = lin_max.max((lin - lin_exact).abs());
        rows.push(vec!["sample0".into(), num(d), num(est), num(exact), num(bias)]);
        rows.push(vec![
            "linear".into(),
            num(d),
            num(lin),
            num(lin_exact),
            num(lin - lin_exact),
        ]);
        if bias != 0.0 {
            lx.push(d.ln());
            ly.push(bias.abs().ln());
        }
    }
    let mut out = Outcome::new(cfg.clone());
    out.checks.push(Check::assert(
        "linear bias zero",
        lin_max <= 1e-12 * lin_exact.max(1.0),
        format!("max |bias| {lin_max:.2e}"),
    ));
    let fit = fit_line(&lx, &ly);
    match &fit {
        Some(f) => out.checks.push(Check::assert(
            "bias slope in δ",
            f.slope >= cfg.slope_min && f.slope <= cfg.slope_max,
            format!("{:.4} (expected range [{}, {}])", f.slope, cfg.slope_min, cfg.slope_max),
        )),
        None => out
            .checks
            .push(Check::inconclusive("bias slope in δ", "fewer than two nonzero biases")),
    }
    out.files.insert(
        "delta_sweep.csv".into(),
        csv_string(&["objective", "delta", "estimate", "exact", "bias"], rows),
    );
    out.results = json!({"exact_squared_norm": exact, "gradient_norm": norm(&g), "fit": fit});
    Ok(out)
}

fn arms(cfg: &RunConfig) -> Result<Vec<Arm>, ConfigError> {
    let mut out = Vec::new();
    for &v in &cfg.variants {
        if v.uses_micro_batches() {
            for &m in &cfg.m_list {
                if !cfg.batch_size.is_multiple_of(m) {
                    return Err(ConfigError(format!(
                        "m = {m} must divide batch_size {}",
                        cfg.batch_size
                    )));
                }
                out.push(Arm {
                    label: format!("{v}_m{m}"),
                    config: optimizer(cfg, v, cfg.batch_size, Some(m)),
                });
            }
        } else {
            out.push(Arm {
                label: v.to_string(),
                config: optimizer(cfg, v, cfg.batch_size, None),
            });
        }
    }
    for a in &out {
        a.config.validate()?;
    }
    Ok(out)
}

struct ArmSummary {
    label: String,
    trace: MedianEntry,
    loss: f64,
    escape: MedianEntry,
    escaped: usize,
}

fn summarize(arm: &Arm, idx: usize, records: &[RunRecord], steps: usize) -> ArmSummary {
    let mine: Vec<&RunRecord> = records.iter().filter(|r| r.label == arm.label).collect();
    let tr: Vec<f64> = mine.iter().map(|r| r.final_trace_v).collect();
    let ls: Vec<f64> = mine.iter().map(|r| r.final_loss).collect();
    // Runs that never escape are censored at `steps + 1`.
    let es: Vec<f64> = mine.iter().map(|r| r.escape_step.unwrap_or(steps + 1) as f64).collect();
    let seed = 0x5eed ^ idx as u64;
    ArmSummary {
        label: arm.label.clone(),
        trace: MedianEntry {
            label: arm.label.clone(),
            median: median(&tr),
            se: median_se(&tr, seed),
        },
        loss: median(&ls),
        escape: MedianEntry {
            label: arm.label.clone(),
            median: median(&es),
            se: median_se(&es, seed.wrapping_add(1)),
        },
        escaped: mine.iter().filter(|r| r.escape_step.is_some()).count(),
    }
}

/// Entries of one m-variant sorted by decreasing `m`.
fn by_decreasing_m<'a>(cfg: &RunConfig, v: Variant, sums: &'a [ArmSummary]) -> Vec<&'a ArmSummary> {
    let mut ms = cfg.m_list.clone();
    ms.sort_unstable_by(|a, b| b.cmp(a));
    ms.dedup();
    ms.iter()
        .filter_map(|m| sums.iter().find(|s| s.label == format!("{v}_m{m}")))
        .collect()
}

fn training(cfg: &RunConfig) -> Res {
    let ens = cfg.ensemble.build()?;
    if let Some(x) = &cfg.x0 {
        if x.len() != ens.dim() {
            return Err(ConfigError("x0 does not match the ensemble dimension".into()));
        }
    }
    if cfg.experiment == Experiment::Escape && !matches!(ens, Ensemble::TwoBasin(_)) {
        return Err(ConfigError("escape needs a two_basin ensemble".into()));
    }
    let arms = arms(cfg)?;
    let records = train_all(&ens, &arms, cfg.x0.as_deref(), &cfg.seeds, cfg.steps, cfg.record_every)?;
    let sums: Vec<ArmSummary> = arms
        .iter()
        .enumerate()
        .map(|(i, a)| summarize(a, i, &records, cfg.steps))
        .collect();
    let mut out = Outcome::new(cfg.clone());
    let is_two_basin = matches!(ens, Ensemble::TwoBasin(_));

    match cfg.experiment {
        Experiment::Trace => {
            let entries: Vec<MedianEntry> = sums.iter().map(|s| s.trace.clone()).collect();
            let (ok, chain) = non_increasing(&entries, cfg.ordering, cfg.tolerance_se);
            out.checks.push(Check::assert("final trace_V ordering", ok, chain));
        }
        Experiment::Msweep | Experiment::Escape => {
            for v in cfg.variants.iter().copied().filter(|v| v.uses_micro_batches()) {
                let chain = by_decreasing_m(cfg, v, &sums);
                let tr: Vec<MedianEntry> = chain.iter().map(|s| s.trace.clone()).collect();
                let (ok, text) = non_increasing(&tr, cfg.ordering, cfg.tolerance_se);
                if cfg.experiment == Experiment::Msweep {
                    out.checks
                        .push(Check::assert(format!("{v} final trace_V as m decreases"), ok, text));
                } else {
                    out.checks
                        .push(Check::info(format!("{v} final trace_V as m decreases"), text));
                    let es: Vec<MedianEntry> = chain.iter().map(|s| s.escape.clone()).collect();
                    let (ok, text) = non_increasing(&es, cfg.ordering, cfg.tolerance_se);
                    out.checks
                        .push(Check::assert(format!("{v} escape step as m decreases"), ok, text));
                }
            }
            if cfg.experiment == Experiment::Escape {
                for s in sums.iter().filter(|s| !s.label.contains("_m")) {
                    out.checks.push(Check::info(
                        format!("{} escapes", s.label),
                        format!("{}/{} seeds within {} steps", s.escaped, cfg.seeds.len(), cfg.steps),
                    ));
                }
            }
        }
        _ => unreachable!("not a training experiment"),
    }

    let median_rows = sums.iter().map(|s| {
        vec![
            s.label.clone(),
            num(s.trace.median),
            num(s.trace.se),
            num(s.loss),
            if is_two_basin {
                num(s.escape.median)
            } else {
                String::new()
            },
            if is_two_basin { num(s.escape.se) } else { String::new() },
            if is_two_basin {
                s.escaped.to_string()
            } else {
                String::new()
            },
        ]
    });
    out.files.insert(
        "medians.csv".into(),
        csv_string(
            &[
                "label",
                "median_final_trace_V",
                "se_final_trace_V",
                "median_final_loss",
                "median_escape_step",
                "se_escape_step",
                "escaped",
            ],
            median_rows,
        ),
    );
    out.files.insert("runs.csv".into(), runs_csv(&records));
    out.files.insert("finals.csv".into(), finals_csv(&records));
    out.sidecars.insert("runs_wall.csv".into(), wall_csv(&records));
    out.results = json!({
        "arms": sums.iter().map(|s| json!({
            "label": s.label,
            "median_final_trace_V": s.trace.median,
            "se_final_trace_V": s.trace.se,
            "median_final_loss": s.loss,
            "median_escape_step": if is_two_basin { json!(s.escape.median) } else { json!(null) },
            "escaped": if is_two_basin { json!(s.escaped) } else { json!(null) },
        })).collect::<Vec<_>>(),
        "finals": records.iter().map(|r| json!({
            "label": r.label, "seed": r.seed, "final_loss": r.final_loss,
            "final_trace_V": r.final_trace_v, "escape_step": r.escape_step,
        })).collect::<Vec<_>>(),
    });
    Ok(out)
}
