//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, list values are
//! comma-separated. Unknown or repeated keys are errors. Every key has an
//! experiment-specific default, so an empty file is a valid configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use clap::ValueEnum;
use serde::Serialize;

use samlab_core::objectives::{EnsembleSpec, HeteroscedasticSpec, ShiftedQuadraticSpec, TinyMlpSpec, TwoBasinSpec};
use samlab_core::optimizers::Variant;
use samlab_core::sde::DiffusionOrder;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<samlab_core::Error> for ConfigError {
    fn from(e: samlab_core::Error) -> Self {
        ConfigError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    VerifyDrift,
    VerifyWeakOrder,
    VerifyProp1,
    VerifyEstimator,
    Msweep,
    Escape,
    Trace,
    DeltaSweep,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::VerifyDrift,
        Experiment::VerifyWeakOrder,
        Experiment::VerifyProp1,
        Experiment::VerifyEstimator,
        Experiment::Msweep,
        Experiment::Escape,
        Experiment::Trace,
        Experiment::DeltaSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::VerifyDrift => "verify-drift",
            Experiment::VerifyWeakOrder => "verify-weak-order",
            Experiment::VerifyProp1 => "verify-prop1",
            Experiment::VerifyEstimator => "verify-estimator",
            Experiment::Msweep => "msweep",
            Experiment::Escape => "escape",
            Experiment::Trace => "trace",
            Experiment::DeltaSweep => "delta-sweep",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| ConfigError(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(ConfigError(format!("unknown output format `{other}`"))),
        }
    }
}

/// How an expected ordering of medians is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingMode {
    /// `next ≤ prev + tolerance_se · SE`
    Weak,
    /// `next < prev`
    Strict,
}

impl FromStr for OrderingMode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "weak" => Ok(OrderingMode::Weak),
            "strict" => Ok(OrderingMode::Strict),
            other => Err(ConfigError(format!("ordering must be weak or strict, got `{other}`"))),
        }
    }
}

/// Fully resolved configuration; serialized verbatim into `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub ensemble: EnsembleSpec,
    /// Starting point; `None` uses the family's natural start.
    pub x0: Option<Vec<f64>>,
    pub variants: Vec<Variant>,
    pub eta: f64,
    pub rho: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub delta: f64,
    pub q_probes: usize,
    pub grad_norm_floor: f64,
    pub eta_list: Vec<f64>,
    pub rho_list: Vec<f64>,
    pub m_list: Vec<usize>,
    pub k_list: Vec<usize>,
    pub lambda_list: Vec<f64>,
    pub delta_list: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub record_every: usize,
    pub replicates: usize,
    pub horizon: f64,
    pub substeps: usize,
    pub kappa_guard: bool,
    pub diffusion_order: DiffusionOrder,
    pub draws: usize,
    pub tolerance_se: f64,
    pub ordering: OrderingMode,
    pub slope_min: f64,
    pub slope_max: f64,
    pub max_inconclusive: usize,
    pub formats: Vec<Format>,
}

/// The keys accepted in a configuration file.
pub const KEYS: [&str; 33] = [
    "experiment",
    "ensemble",
    "x0",
    "variants",
    "eta",
    "rho",
    "batch_size",
    "lambda",
    "delta",
    "q_probes",
    "grad_norm_floor",
    "eta_list",
    "rho_list",
    "m_list",
    "k_list",
    "lambda_list",
    "delta_list",
    "seeds",
    "seed_list",
    "steps",
    "record_every",
    "replicates",
    "horizon",
    "substeps",
    "kappa_guard",
    "diffusion_order",
    "draws",
    "tolerance_se",
    "ordering",
    "slope_min",
    "slope_max",
    "max_inconclusive",
    "formats",
];

fn hetero_pair() -> EnsembleSpec {
    EnsembleSpec::HeteroscedasticQuadratic(HeteroscedasticSpec::pattern(vec![1.0, 3.0], 5000))
}

fn seed_range(n: u64) -> Vec<u64> {
    (0..n).collect()
}

impl RunConfig {
    /// Defaults for `experiment` before any file keys are applied.
    pub fn defaults(experiment: Experiment) -> Self {
        let mut c = RunConfig {
            experiment,
            ensemble: hetero_pair(),
            x0: None,
            variants: vec![Variant::MiniBatchUsam],
            eta: 0.01,
            rho: 0.1,
            batch_size: 2,
            lambda: 1.0,
            delta: 1e-3,
            q_probes: 4,
            grad_norm_floor: samlab_core::optimizers::DEFAULT_GRAD_NORM_FLOOR,
            eta_list: vec![0.04, 0.02, 0.01],
            rho_list: vec![0.01],
            m_list: vec![8, 4, 2, 1],
            k_list: vec![1, 2, 4],
            lambda_list: vec![0.25, 0.5, 1.0, 2.0],
            delta_list: vec![1e-1, 1e-2, 1e-3, 1e-4],
            seeds: vec![0],
            steps: 4000,
            record_every: 10,
            replicates: 100_000,
            horizon: 1.0,
            substeps: samlab_core::sde::DEFAULT_SUBSTEPS,
            kappa_guard: false,
            diffusion_order: DiffusionOrder::Sigma00Only,
            draws: 1_000_000,
            tolerance_se: 3.0,
            ordering: OrderingMode::Weak,
            slope_min: 0.7,
            slope_max: 1.3,
            max_inconclusive: 1,
            formats: vec![Format::Csv, Format::Json],
        };
        match experiment {
            Experiment::VerifyDrift => {
                c.x0 = Some(vec![1.0]);
                c.variants = vec![Variant::MiniBatchUsam, Variant::NUsam, Variant::MUsam];
                c.batch_size = 4;
                c.diffusion_order = DiffusionOrder::WithSigma01;
            }
            Experiment::VerifyWeakOrder => {
                c.x0 = Some(vec![1.0]);
                c.variants = vec![Variant::MiniBatchUsam, Variant::MiniBatchSam];
                c.rho = 0.01;
                c.seeds = vec![11];
            }
            Experiment::VerifyProp1 => {
                c.ensemble = EnsembleSpec::ShiftedQuadratic(ShiftedQuadraticSpec::isotropic(3, 12, 1.0, 0));
                c.k_list = vec![1, 2, 4, 8];
                c.seeds = seed_range(20);
            }
            Experiment::VerifyEstimator => {}
            Experiment::DeltaSweep => {
                let mut q = ShiftedQuadraticSpec::isotropic(3, 4, 1.0, 2);
                q.curvature = vec![0.5, 1.0, 3.0];
                q.rotate = true;
                c.ensemble = EnsembleSpec::ShiftedQuadratic(q);
                c.x0 = Some(vec![0.3, -0.2, 0.4]);
            }
            Experiment::Msweep | Experiment::Escape => {
                c.ensemble = EnsembleSpec::TwoBasin(TwoBasinSpec::noisy(1));
                c.variants = if experiment == Experiment::Escape {
                    vec![Variant::Sgd, Variant::MSam]
                } else {
                    vec![Variant::MSam]
                };
                c.batch_size = 8;
                c.rho = if experiment == Experiment::Escape { 0.1 } else { 0.05 };
                c.seeds = seed_range(10);
            }
            Experiment::Trace => {
                c.ensemble = EnsembleSpec::TinyMlp(TinyMlpSpec::standard(7));
                c.variants = vec![Variant::Sgd, Variant::MiniBatchSam, Variant::ReweightedSam];
                c.eta = 0.05;
                c.rho = 0.05;
                c.batch_size = 8;
                c.steps = 5000;
                c.seeds = seed_range(10);
            }
        }
        c
    }

    /// Parses `text` on top of the defaults for `experiment`.
    pub fn parse(text: &str, experiment: Experiment) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        let mut c = RunConfig::defaults(experiment);
        if pairs.contains_key("seeds") && pairs.contains_key("seed_list") {
            return Err(ConfigError("give either `seeds` or `seed_list`, not both".into()));
        }
        for (key, (line, value)) in &pairs {
            c.apply(key, value)
                .map_err(|e| ConfigError(format!("line {line}: `{key}`: {}", e.0)))?;
        }
        c.validate()?;
        Ok(c)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "experiment" => {
                let e: Experiment = value.parse()?;
                if e != self.experiment {
                    return Err(ConfigError(format!(
                        "file is for `{e}`, invoked as `{}`",
                        self.experiment
                    )));
                }
            }
            "ensemble" => self.ensemble = parse_ensemble(value)?,
            "x0" => self.x0 = Some(list(value)?),
            "variants" => {
                self.variants = value
                    .split(',')
                    .map(|s| s.trim().parse::<Variant>().map_err(ConfigError::from))
                    .collect::<Result<_, _>>()?
            }
            "eta" => self.eta = scalar(value)?,
            "rho" => self.rho = scalar(value)?,
            "batch_size" => self.batch_size = scalar(value)?,
            "lambda" => self.lambda = scalar(value)?,
            "delta" => self.delta = scalar(value)?,
            "q_probes" => self.q_probes = scalar(value)?,
            "grad_norm_floor" => self.grad_norm_floor = scalar(value)?,
            "eta_list" => self.eta_list = list(value)?,
            "rho_list" => self.rho_list = list(value)?,
            "m_list" => self.m_list = list(value)?,
            "k_list" => self.k_list = list(value)?,
            "lambda_list" => self.lambda_list = list(value)?,
            "delta_list" => self.delta_list = list(value)?,
            "seeds" => self.seeds = seed_range(scalar(value)?),
            "seed_list" => self.seeds = list(value)?,
            "steps" => self.steps = scalar(value)?,
            "record_every" => self.record_every = scalar(value)?,
            "replicates" => self.replicates = scalar(value)?,
            "horizon" => self.horizon = scalar(value)?,
            "substeps" => self.substeps = scalar(value)?,
            "kappa_guard" => self.kappa_guard = scalar(value)?,
            "diffusion_order" => {
                self.diffusion_order = match value {
                    "sigma00" => DiffusionOrder::Sigma00Only,
                    "sigma01" => DiffusionOrder::WithSigma01,
                    other => return Err(ConfigError(format!("expected sigma00 or sigma01, got `{other}`"))),
                }
            }
            "draws" => self.draws = scalar(value)?,
            "tolerance_se" => self.tolerance_se = scalar(value)?,
            "ordering" => self.ordering = value.parse()?,
            "slope_min" => self.slope_min = scalar(value)?,
            "slope_max" => self.slope_max = scalar(value)?,
            "max_inconclusive" => self.max_inconclusive = scalar(value)?,
            "formats" => self.formats = parse_formats(value)?,
            other => return Err(ConfigError(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Replaces the seed list by `0..n`.
    pub fn with_seed_count(mut self, n: u64) -> Self {
        self.seeds = seed_range(n);
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.into()));
        if self.variants.is_empty() {
            return bad("variants must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.formats.is_empty() {
            return bad("formats must not be empty");
        }
        if self.batch_size == 0 || self.record_every == 0 {
            return bad("batch_size and record_every must be ≥ 1");
        }
        if !(self.eta.is_finite() && self.eta >= 0.0 && self.rho.is_finite() && self.rho >= 0.0) {
            return bad("eta and rho must be finite and ≥ 0");
        }
        if !(self.tolerance_se.is_finite() && self.tolerance_se >= 0.0) {
            return bad("tolerance_se must be ≥ 0");
        }
        if self.slope_min.is_nan() || self.slope_max.is_nan() || self.slope_min > self.slope_max {
            return bad("slope_min must not exceed slope_max");
        }
        if self.m_list.contains(&0) {
            return bad("m_list entries must be ≥ 1");
        }
        if self.k_list.contains(&0) {
            return bad("k_list entries must be ≥ 1");
        }
        if self
            .delta_list
            .iter()
            .chain([&self.delta])
            .any(|d| d.is_nan() || *d <= 0.0)
        {
            return bad("finite-difference steps must be > 0");
        }
        Ok(())
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>, ConfigError> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected `key = value`", no + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(ConfigError(format!("line {}: unknown key `{k}`", no + 1)));
        }
        if v.is_empty() {
            return Err(ConfigError(format!("line {}: `{k}` has no value", no + 1)));
        }
        if out.insert(k.to_string(), (no + 1, v.to_string())).is_some() {
            return Err(ConfigError(format!("line {}: `{k}` given twice", no + 1)));
        }
    }
    Ok(out)
}

fn scalar<T: FromStr>(s: &str) -> Result<T, ConfigError> {
    s.parse().map_err(|_| ConfigError(format!("cannot parse `{s}`")))
}

fn list<T: FromStr>(s: &str) -> Result<Vec<T>, ConfigError> {
    s.split(',').map(|p| scalar(p.trim())).collect()
}

fn parse_formats(s: &str) -> Result<Vec<Format>, ConfigError> {
    let mut out: Vec<Format> = list(s)?;
    out.dedup();
    Ok(out)
}

/// Parses `--format`-style lists such as `csv,json`.
pub fn formats_from_arg(s: &str) -> Result<Vec<Format>, ConfigError> {
    parse_formats(s)
}

/// A JSON descriptor (`{"family": ...}`) or a named preset:
/// `hetero_pair`, `two_basin[:seed]`, `two_basin_noiseless[:seed]`,
/// `tiny_mlp[:seed]`, `tiny_mlp_identical[:seed]`.
pub fn parse_ensemble(value: &str) -> Result<EnsembleSpec, ConfigError> {
    if value.starts_with('{') {
        return Ok(EnsembleSpec::from_json(value)?);
    }
    let (name, seed) = match value.split_once(':') {
        Some((n, s)) => (n, scalar::<u64>(s)?),
        None => (value, 1),
    };
    Ok(match name {
        "hetero_pair" => hetero_pair(),
        "two_basin" => EnsembleSpec::TwoBasin(TwoBasinSpec::noisy(seed)),
        "two_basin_noiseless" => EnsembleSpec::TwoBasin(TwoBasinSpec::noiseless(seed)),
        "tiny_mlp" => EnsembleSpec::TinyMlp(TinyMlpSpec::standard(seed)),
        "tiny_mlp_identical" => {
            let mut s = TinyMlpSpec::standard(seed);
            s.identical_data = true;
            EnsembleSpec::TinyMlp(s)
        }
        other => return Err(ConfigError(format!("unknown ensemble preset `{other}`"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("", Experiment::Trace).unwrap();
        assert_eq!(c, RunConfig::defaults(Experiment::Trace));
    }

    #[test]
    fn comments_lists_and_presets() {
        let text = "# sweep\nensemble = two_basin:3\nm_list = 4, 2,1 # trailing\nrho=0.2\nseed_list = 5,9\n";
        let c = RunConfig::parse(text, Experiment::Msweep).unwrap();
        assert_eq!(c.m_list, vec![4, 2, 1]);
        assert_eq!(c.rho, 0.2);
        assert_eq!(c.seeds, vec![5, 9]);
        assert_eq!(c.ensemble, EnsembleSpec::TwoBasin(TwoBasinSpec::noisy(3)));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert!(RunConfig::parse("learning_rate = 0.1", Experiment::Trace).is_err());
        assert!(RunConfig::parse("eta = 0.1\neta = 0.2", Experiment::Trace).is_err());
        assert!(RunConfig::parse("eta 0.1", Experiment::Trace).is_err());
        assert!(RunConfig::parse("seeds = 3\nseed_list = 1", Experiment::Trace).is_err());
        assert!(RunConfig::parse("experiment = escape", Experiment::Trace).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("m_list = 0", Experiment::Msweep).is_err());
        assert!(RunConfig::parse("delta_list = 0.1, 0", Experiment::DeltaSweep).is_err());
        assert!(RunConfig::parse("variants = adam", Experiment::Trace).is_err());
        assert!(RunConfig::parse("ensemble = {\"family\":\"nope\"}", Experiment::Trace).is_err());
    }

    #[test]
    fn json_descriptor_round_trips() {
        let spec = EnsembleSpec::TinyMlp(TinyMlpSpec::standard(4));
        let c = RunConfig::parse(&format!("ensemble = {}", spec.to_json()), Experiment::Trace).unwrap();
        assert_eq!(c.ensemble, spec);
    }
}
