use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn samlab(dir: &Path, subcommand: &str, config: &str, extra: &[&str]) -> Output {
    let conf = dir.join(format!("{subcommand}.conf"));
    fs::write(&conf, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_samlab"))
        .arg(subcommand)
        .arg("--config")
        .arg(&conf)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

const SHORT_MSWEEP: &str = "experiment = msweep
ensemble = two_basin:1
variants = m_sam
m_list = 4, 1
batch_size = 8
eta = 0.01
rho = 0.05
steps = 300
record_every = 50
seeds = 3
";

#[test]
fn unknown_and_duplicate_keys_exit_with_config_error() {
    let dir = TempDir::new().unwrap();
    let out = samlab(
        dir.path(),
        "msweep",
        &format!("{SHORT_MSWEEP}learning_rate = 0.1\n"),
        &[],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = samlab(dir.path(), "msweep", &format!("{SHORT_MSWEEP}eta = 0.02\n"), &[]);
    assert_eq!(out.status.code(), Some(2));

    let out = samlab(dir.path(), "escape", SHORT_MSWEEP, &[]);
    assert_eq!(out.status.code(), Some(2), "experiment key must match the subcommand");
}

#[test]
fn invalid_values_exit_with_config_error() {
    let dir = TempDir::new().unwrap();
    for bad in ["eta = -1", "m_list = 3", "ensemble = nope", "formats = xml"] {
        let text = SHORT_MSWEEP
            .lines()
            .filter(|l| !l.starts_with(bad.split(' ').next().unwrap()))
            .collect::<Vec<_>>();
        let out = samlab(dir.path(), "msweep", &format!("{}\n{bad}\n", text.join("\n")), &[]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
}

#[test]
fn reruns_are_byte_identical_apart_from_wall_time() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let oa = samlab(a.path(), "msweep", SHORT_MSWEEP, &[]);
    let ob = samlab(b.path(), "msweep", SHORT_MSWEEP, &[]);
    assert_eq!(oa.status.code(), ob.status.code());
    let mut names: Vec<String> = fs::read_dir(a.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["finals.csv", "medians.csv", "runs.csv", "runs_wall.csv", "summary.json"]
    );
    for name in names.iter().filter(|n| *n != "runs_wall.csv") {
        let x = fs::read(a.path().join("out").join(name)).unwrap();
        let y = fs::read(b.path().join("out").join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn outputs_have_documented_headers_and_summary() {
    let dir = TempDir::new().unwrap();
    samlab(dir.path(), "msweep", SHORT_MSWEEP, &["--seeds", "2"]);
    let out = dir.path().join("out");
    let first = |f: &str| {
        fs::read_to_string(out.join(f))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(
        first("runs.csv"),
        "label,seed,step,loss,grad_norm,trace_V,guarded_count"
    );
    assert_eq!(first("finals.csv"), "label,seed,final_loss,final_trace_V,escape_step");
    assert_eq!(first("runs_wall.csv"), "label,seed,step,wall_ns");

    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    // 2 arms × 2 seeds × (300/50 + 1) rows.
    assert_eq!(runs.lines().count(), 1 + 2 * 2 * 7);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([0, 1]));
    assert_eq!(summary["experiment"], "msweep");
    assert!(summary["ensemble_descriptor"].as_str().unwrap().contains("two_basin"));
    assert!(summary["config"]["eta"].as_f64().unwrap() == 0.01);
}

#[test]
fn format_flag_limits_outputs() {
    let dir = TempDir::new().unwrap();
    samlab(dir.path(), "msweep", SHORT_MSWEEP, &["--format", "json"]);
    let names: Vec<_> = fs::read_dir(dir.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names, ["summary.json"]);
}

#[test]
fn exit_codes_follow_status() {
    let dir = TempDir::new().unwrap();
    let est = "experiment = verify-estimator\nlambda_list = 0.25, 0.5, 1, 2\ndraws = 200000\n";
    assert_eq!(samlab(dir.path(), "verify-estimator", est, &[]).status.code(), Some(0));

    let sweep = include_str!("../../../configs/delta-sweep.conf");
    let out = samlab(dir.path(), "delta-sweep", sweep, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL bias slope"));
}
