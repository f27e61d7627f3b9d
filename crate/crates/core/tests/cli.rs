use std::fs;
use std::path::Path;
use std::process::Command;

use coverlab::cli::{self, ExperimentConfig, ExperimentKind, ExperimentRecord, LongRow, ParamRow, ReportFormat, SummaryRow};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_coverlab"))
}

fn chen_stein(replicas: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(ExperimentKind::ChenStein, 3, 8);
    c.replicas = replicas;
    c.seed = 42;
    c.budgets.max_k = 6;
    c
}

/// A consistent constants cache, so runs skip the estimation.
fn constants_fixture(dir: &Path) -> std::path::PathBuf {
    let p_d = 0.3405373296f64;
    let c = json!({
        "d": 3, "G0": 1.0 / (1.0 - p_d), "p_d": p_d, "c_d": 0.4774648, "C_d": 0.4774648 * (1.0 - p_d),
        "meta": {
            "method": "fixture", "box_sides": [], "center_values": [],
            "g0_extrapolation_error": 0.0, "fit_range": [5, 8], "log_log_slope": -1.0,
            "c_d_fit_residual": 0.0, "mc_box": 0, "mc_walks": 0, "mc_return_prob": 0.0,
            "mc_return_se": 0.0, "mc_box_g0": 0.0
        }
    });
    let path = dir.join("constants_d3.json");
    fs::write(&path, c.to_string()).unwrap();
    path
}

fn write_config(dir: &Path, c: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(c).unwrap()).unwrap();
    p
}

#[test]
fn zero_replicas_give_an_empty_valid_record() {
    let dir = tempfile::tempdir().unwrap();
    let rec = cli::run(&chen_stein(0), dir.path()).unwrap();
    assert!(rec.replicas.is_empty());
    assert_eq!(rec.summary["instances"], 0);
    assert_eq!(rec.summary["violations"], 0);
    let back = ExperimentRecord::load(&dir.path().join("record.json")).unwrap();
    assert_eq!(back.config_hash, rec.config_hash);
    assert!(!dir.path().join("checkpoint.json").exists());
}

#[test]
fn reports_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let rec = cli::run(&chen_stein(6), dir.path()).unwrap();
    let files = cli::report(&rec, ReportFormat::All, dir.path()).unwrap();
    assert_eq!(files.len(), 4);

    let params: Vec<ParamRow> = cli::read_csv(&dir.path().join("parameters.csv")).unwrap();
    assert_eq!(params, rec.parameters);
    let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, cli::PARAMETER_NAMES);

    let summary: Vec<SummaryRow> = cli::read_csv(&dir.path().join("summary.csv")).unwrap();
    let instances = summary.iter().find(|r| r.key == "instances").unwrap();
    assert_eq!(instances.value, "6");

    let long: Vec<LongRow> = cli::read_csv(&dir.path().join("long.csv")).unwrap();
    assert_eq!(long.iter().filter(|r| r.metric == "exact_tv").count(), 6);

    let text = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    for name in cli::PARAMETER_NAMES {
        assert!(text.contains(name), "summary text lacks {name}");
    }
}

#[test]
fn interrupted_run_resumes_from_checkpoint() {
    let full = tempfile::tempdir().unwrap();
    let config = chen_stein(8);
    let rec = cli::run(&config, full.path()).unwrap();

    // A checkpoint holding the first three replicas, one of them altered so
    // that reuse is visible in the summary.
    let part = tempfile::tempdir().unwrap();
    let mut stages = serde_json::Map::new();
    for (i, row) in rec.replicas.iter().take(3).enumerate() {
        let mut row = row.clone();
        if i == 1 {
            row["violation"] = json!(true);
        }
        stages.insert(format!("instances/{i:06}"), row);
    }
    let ckpt = json!({ "config_hash": rec.config_hash, "stages": stages });
    fs::write(part.path().join("checkpoint.json"), ckpt.to_string()).unwrap();
    let resumed = cli::run(&config, part.path()).unwrap();
    assert_eq!(resumed.summary["violations"], 1);
    assert_eq!(resumed.replicas[5], rec.replicas[5]);
    assert!(!part.path().join("checkpoint.json").exists());

    // A checkpoint for a different config is ignored.
    let other = tempfile::tempdir().unwrap();
    let stale = json!({ "config_hash": "0000", "stages": stages });
    fs::write(other.path().join("checkpoint.json"), stale.to_string()).unwrap();
    let fresh = cli::run(&config, other.path()).unwrap();
    assert_eq!(fresh.summary, rec.summary);
}

#[test]
fn summary_file_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = chen_stein(12);
    cli::run(&config, a.path()).unwrap();
    cli::run(&config, b.path()).unwrap();
    let read = |d: &Path| fs::read(d.join("summary.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let mut other = config.clone();
    other.seed += 1;
    let c = tempfile::tempdir().unwrap();
    cli::run(&other, c.path()).unwrap();
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn binary_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &chen_stein(4));
    let out = dir.path().join("run");
    let st = bin()
        .args(["chen-stein", "--config"])
        .arg(&cfg)
        .args(["--replicas", "3", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(String::from_utf8_lossy(&st.stdout).contains("experiment: chen-stein"));
    let rec: Value = serde_json::from_slice(&fs::read(out.join("record.json")).unwrap()).unwrap();
    assert_eq!(rec["config"]["replicas"], 3);

    let again = dir.path().join("again");
    let st = bin()
        .args(["report", "--format", "csv", "--record"])
        .arg(out.join("record.json"))
        .arg("--out")
        .arg(&again)
        .output()
        .unwrap();
    assert!(st.status.success());
    assert_eq!(
        fs::read(again.join("parameters.csv")).unwrap(),
        fs::read(out.join("parameters.csv")).unwrap()
    );
    assert!(!again.join("long.csv").exists());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code().unwrap();

    let good = write_config(dir.path(), &chen_stein(2));
    let good = good.to_str().unwrap();
    // Config describes another experiment.
    assert_eq!(code(&["gff", "--config", good]), 2);

    let mut v: Value = serde_json::from_str(&fs::read_to_string(good).unwrap()).unwrap();
    v["replcias"] = json!(3);
    let typo = dir.path().join("typo.json");
    fs::write(&typo, v.to_string()).unwrap();
    assert_eq!(code(&["chen-stein", "--config", typo.to_str().unwrap()]), 2);

    let mut bad = chen_stein(2);
    bad.schema_version = 99;
    let bad_dir = tempfile::tempdir().unwrap();
    let bad = write_config(bad_dir.path(), &bad);
    assert_eq!(code(&["chen-stein", "--config", bad.to_str().unwrap()]), 2);

    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    assert_eq!(
        code(&["chen-stein", "--config", good, "--out", out.to_str().unwrap()]),
        3
    );
    assert_eq!(code(&["report", "--record", "missing.json", "--format", "xml"]), 2);
}

#[test]
fn presets_are_written_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin().arg("presets").arg("--out").arg(dir.path()).output().unwrap();
    assert!(st.status.success());
    let mut n = 0;
    for e in fs::read_dir(dir.path()).unwrap() {
        let c = ExperimentConfig::load(&e.unwrap().path()).unwrap();
        c.validate().unwrap();
        n += 1;
    }
    assert_eq!(n, cli::presets().len());
    // The shipped copies match the generator.
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    for (name, c) in cli::presets() {
        assert_eq!(ExperimentConfig::load(&shipped.join(format!("{name}.json"))).unwrap(), c);
    }
}

#[test]
fn discrimination_record_carries_the_tv_proxy() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::new(ExperimentKind::Discriminate, 3, 12);
    c.alpha = Some(0.6);
    c.radii = Some([1.0, 2.5]);
    c.replicas = 30;
    c.seed = 3;
    c.budgets.excursions = 40_000;
    c.budgets.fm_replicas = 2;
    c.constants = Some(constants_fixture(dir.path()));
    let rec = cli::run(&c, &dir.path().join("out")).unwrap();
    let tv = rec.summary["tv_lower_bound"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&tv));
    assert!(rec.summary["tv_note"].as_str().unwrap().contains("lower bound"));
    let p = rec.summary["matched_p"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    for stat in ["adjacent_pairs", "size"] {
        let b = rec.summary["tests"][stat]["bonferroni_p"].as_f64().unwrap();
        assert!(b >= rec.summary["tests"][stat]["rank_test"]["p_value"].as_f64().unwrap());
    }
    assert_eq!(rec.replicas.len(), 60);
}
