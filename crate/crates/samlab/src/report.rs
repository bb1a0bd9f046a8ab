use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use samlab_core::rng::SeedStream;

use crate::config::{Format, OrderingMode, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::Fail => 1,
            Status::Inconclusive => 3,
        }
    }
}

/// A named assertion; `passed = None` marks a reported-only quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: Option<bool>,
    pub inconclusive: bool,
    pub detail: String,
}

impl Check {
    pub fn assert(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: Some(passed),
            inconclusive: false,
            detail: detail.into(),
        }
    }

    pub fn info(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: None,
            inconclusive: false,
            detail: detail.into(),
        }
    }

    pub fn inconclusive(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: None,
            inconclusive: true,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        let tag = match (self.passed, self.inconclusive) {
            (_, true) => "INCONCLUSIVE",
            (Some(true), _) => "PASS",
            (Some(false), _) => "FAIL",
            (None, _) => "INFO",
        };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

/// Everything an experiment produced. `files` are byte-deterministic;
/// `sidecars` hold wall-clock data and are excluded from that guarantee.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub config: RunConfig,
    pub checks: Vec<Check>,
    pub results: Value,
    pub files: BTreeMap<String, String>,
    pub sidecars: BTreeMap<String, String>,
}

impl Outcome {
    pub fn new(config: RunConfig) -> Self {
        Outcome {
            config,
            checks: Vec::new(),
            results: Value::Null,
            files: BTreeMap::new(),
            sidecars: BTreeMap::new(),
        }
    }

    /// Any failed assertion fails the run; otherwise any inconclusive
    /// check makes it inconclusive.
    pub fn status(&self) -> Status {
        if self.checks.iter().any(|c| c.passed == Some(false)) {
            Status::Fail
        } else if self.checks.iter().any(|c| c.inconclusive) {
            Status::Inconclusive
        } else {
            Status::Pass
        }
    }

    pub fn summary_json(&self) -> String {
        let v = json!({
            "experiment": self.config.experiment,
            "status": self.status(),
            "config": self.config,
            "ensemble_descriptor": self.config.ensemble.to_json(),
            "seeds": self.config.seeds,
            "checks": self.checks,
            "results": self.results,
        });
        let mut s = serde_json::to_string_pretty(&v).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes the requested formats into `dir`; CSV files, their wall-time
    /// sidecars and `summary.json`.
    pub fn write(&self, dir: &Path) -> io::Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        if self.config.formats.contains(&Format::Csv) {
            for (name, body) in self.files.iter().chain(&self.sidecars) {
                fs::write(dir.join(name), body)?;
                written.push(name.clone());
            }
        }
        if self.config.formats.contains(&Format::Json) {
            fs::write(dir.join("summary.json"), self.summary_json())?;
            written.push("summary.json".into());
        }
        Ok(written)
    }
}

/// Serializes rows with a header through the `csv` writer.
pub fn csv_string<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(header).expect("in-memory write");
    for r in rows {
        wr.write_record(r).expect("in-memory write");
    }
    String::from_utf8(wr.into_inner().expect("flush")).expect("utf8")
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bootstrap standard error of the median, 2000 resamples drawn from
/// `SeedStream::new(seed)`.
pub fn median_se(values: &[f64], seed: u64) -> f64 {
    const RESAMPLES: usize = 2000;
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut rng = SeedStream::new(seed).rng();
    let mut meds = Vec::with_capacity(RESAMPLES);
    let mut buf = vec![0.0; n];
    for _ in 0..RESAMPLES {
        for b in buf.iter_mut() {
            *b = values[rng.random_range(0..n)];
        }
        meds.push(median(&buf));
    }
    let m = meds.iter().sum::<f64>() / RESAMPLES as f64;
    (meds.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (RESAMPLES - 1) as f64).sqrt()
}

/// One labelled median with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MedianEntry {
    pub label: String,
    pub median: f64,
    pub se: f64,
}

/// Checks that medians are non-increasing along `entries`. Returns the
/// verdict and a readable chain such as `a 3 (±0.1) ≥ b 2 (±0.1)`.
pub fn non_increasing(entries: &[MedianEntry], mode: OrderingMode, tolerance_se: f64) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        parts.push(format!("{} {:.6} (±{:.2e})", e.label, e.median, e.se));
        if i > 0 {
            let prev = &entries[i - 1];
            let holds = match mode {
                OrderingMode::Strict => e.median < prev.median,
                OrderingMode::Weak => e.median <= prev.median + tolerance_se * (prev.se * prev.se + e.se * e.se).sqrt(),
            };
            ok &= holds;
        }
    }
    (ok, parts.join(" ≥ "))
}

/// `f64` formatted for CSV output: shortest round-trip representation.
pub fn num(v: f64) -> String {
    v.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(label: &str, median: f64, se: f64) -> MedianEntry {
        MedianEntry {
            label: label.into(),
            median,
            se,
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn bootstrap_se_is_zero_for_constant_and_deterministic() {
        assert_eq!(median_se(&[2.0; 7], 1), 0.0);
        let v = [1.0, 5.0, 2.0, 8.0, 3.0];
        assert_eq!(median_se(&v, 4), median_se(&v, 4));
        assert!(median_se(&v, 4) > 0.0);
    }

    #[test]
    fn ordering_modes() {
        let e = [entry("a", 3.0, 0.1), entry("b", 3.1, 0.1), entry("c", 1.0, 0.0)];
        assert!(non_increasing(&e, OrderingMode::Weak, 3.0).0);
        assert!(!non_increasing(&e, OrderingMode::Strict, 3.0).0);
        assert!(!non_increasing(&e, OrderingMode::Weak, 0.0).0);
    }

    #[test]
    fn status_precedence() {
        let mut o = Outcome::new(RunConfig::defaults(crate::config::Experiment::Trace));
        o.checks.push(Check::info("x", ""));
        assert_eq!(o.status(), Status::Pass);
        o.checks.push(Check::inconclusive("y", ""));
        assert_eq!(o.status(), Status::Inconclusive);
        o.checks.push(Check::assert("z", false, ""));
        assert_eq!(o.status(), Status::Fail);
    }
}
