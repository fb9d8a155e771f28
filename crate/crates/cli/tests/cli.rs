use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dtrwql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtrwql"))
        .args(args)
        .env_remove("DTRWQL_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

const SPECS: &str = r#"
[stages.1]
treatment_free = ["1", "X1_1", "X1_2"]
blip = ["1", "X1_2"]

[stages.2]
treatment_free = ["1", "Y1", "A1", "X2_1", "X2_2"]
blip = ["1", "A1", "X2_2"]
"#;

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&dtrwql(&["simulate", "--design", "sim1", "--n", "80", "--reps", "2", "--seed", "9", "--out", out.to_str().unwrap()]));
    }
    for f in ["rep0.csv", "rep1.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(read(&a.join("rep0.csv")), read(&a.join("rep1.csv")));
    let header = read(&a.join("rep0.csv")).lines().next().unwrap().to_string();
    assert_eq!(header, "id,X1_1,X1_2,A1,Y1,X2_1,X2_2,A2,Y2");
}

#[test]
fn manifest_records_design_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gz");
    ok(&dtrwql(&["simulate", "--design", "sim2_gz", "--gz", "0.4", "--n", "50", "--out", out.to_str().unwrap()]));
    let m: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(m["design"]["design"], "sim2_gz");
    assert_eq!(m["design"]["param"], 0.4);
    assert_eq!(m["seed"], 1);
}

#[test]
fn seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env");
    let status = Command::new(env!("CARGO_BIN_EXE_dtrwql"))
        .args(["simulate", "--design", "sim1", "--n", "20", "--out", out.to_str().unwrap()])
        .env("DTRWQL_SEED", "42")
        .output()
        .unwrap();
    ok(&status);
    let m: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(m["seed"], 42);
}

#[test]
fn cc_and_wq_ee_agree_without_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&dtrwql(&["simulate", "--design", "sim1", "--n", "200", "--full", "--seed", "3", "--out", sim.to_str().unwrap()]));
    let data = sim.join("full0.csv");
    let mut reports = Vec::new();
    for method in ["cc", "wq_ee"] {
        let cfg = dir.path().join(format!("{method}.toml"));
        let out = dir.path().join(method);
        let mut text = format!("data = {:?}\nout = {:?}\n{SPECS}\n[method]\nname = \"{method}\"\n", data, out);
        if method == "wq_ee" {
            text.push_str("[[method.instruments]]\nstage = 1\nu = [\"X1_2\", \"A1\"]\nz = [\"X1_1\"]\n");
        }
        fs::write(&cfg, text).unwrap();
        ok(&dtrwql(&["fit", "--config", cfg.to_str().unwrap()]));
        // drop the method label column
        let coef: Vec<String> = read(&out.join("coefficients.csv"))
            .lines()
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect();
        reports.push((coef, read(&out.join("recommendations.csv"))));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn wq_sa_without_gamma_prime_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sa.toml");
    fs::write(&cfg, format!("[design]\nname = \"sim3\"\nn = 100\n{SPECS}\n[method]\nname = \"wq_sa\"\n")).unwrap();
    let out = dtrwql(&["fit", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config error") && err.contains("gamma_prime"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nsede = 2\n").unwrap();
    let out = dtrwql(&["fit", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn fit_writes_reports_for_simulated_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fit.toml");
    let out = dir.path().join("fit");
    fs::write(
        &cfg,
        format!("seed = 5\nout = {out:?}\n[design]\nname = \"sim1\"\nn = 300\n[method]\nname = \"wq_ee\"\n"),
    )
    .unwrap();
    ok(&dtrwql(&["fit", "--config", cfg.to_str().unwrap()]));
    let fit: serde_json::Value = serde_json::from_str(&read(&out.join("fit.json"))).unwrap();
    assert_eq!(fit["method"], "wq_ee");
    let recs = read(&out.join("recommendations.csv"));
    assert_eq!(recs.lines().count(), 301);
    let m: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(m["gamma_hat"][0]["stage"], 1);
}

#[test]
fn calibrate_and_bootstrap_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("run");
    fs::write(
        &cfg,
        format!("seed = 2\nout = {out:?}\n[design]\nname = \"sim3\"\nn = 300\n[method]\nname = \"cc\"\n[bootstrap]\nb = 30\n"),
    )
    .unwrap();
    ok(&dtrwql(&["calibrate", "--config", cfg.to_str().unwrap(), "--grid", "0:1:2", "--mcr", "10"]));
    let cal = read(&out.join("calibration.csv"));
    assert_eq!(cal.lines().count(), 4, "{cal}");

    ok(&dtrwql(&["bootstrap", "--config", cfg.to_str().unwrap(), "--m", "auto"]));
    let m: serde_json::Value = serde_json::from_str(&read(&out.join("manifest.json"))).unwrap();
    assert_eq!(m["command"], "bootstrap");
    assert!(m["m"].as_u64().unwrap() <= 300);
    assert!(read(&out.join("bootstrap.csv")).lines().count() > 1);
}

#[test]
fn small_bench() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&dtrwql(&[
        "bench", "--design", "sim1", "--n", "150", "--reps", "2", "--n-eval", "2000", "--methods", "cc,wq_ee", "--threads", "1", "--out",
        out.to_str().unwrap(),
    ]));
    let study = read(&out.join("study.csv"));
    let mut methods: Vec<&str> = study.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    methods.dedup();
    assert_eq!(methods, ["cc", "wq_ee"], "{study}");
    assert!(out.join("replicates.csv").exists());
}

#[test]
fn validate_flags_bad_treatment_coding() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    fs::write(&good, "id,X1_1,A1,Y1\n1,0.5,1,1.0\n2,,-1,0.3\n").unwrap();
    let out = dtrwql(&["validate", "--data", good.to_str().unwrap()]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("patients 2"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "id,X1_1,A1,Y1\n1,0.5,2,1.0\n2,0.1,-1,0.3\n").unwrap();
    assert!(!dtrwql(&["validate", "--data", bad.to_str().unwrap()]).status.success());
}
