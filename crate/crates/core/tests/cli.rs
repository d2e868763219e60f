use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kcascade"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn read_rows(path: &Path, delim: u8) -> Vec<Vec<String>> {
    csv::ReaderBuilder::new()
        .delimiter(delim)
        .from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn run_writes_report_and_traces() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["run", "--config"])
        .arg(config("rlc_ald_krls.toml"))
        .arg("--out")
        .arg(out.path())
        .status()
        .unwrap();
    assert!(status.success());
    let report = read_rows(&out.path().join("report.csv"), b',');
    assert_eq!(report.len(), 7);
    for d in 1..=7 {
        let trace = read_rows(&out.path().join(format!("trace_depth{d}.csv")), b',');
        assert_eq!(trace.len(), 2000);
        assert_eq!(trace[0][0], "500");
        // Recompute the reported metrics from the exported errors.
        let errs: Vec<f64> = trace.iter().map(|r| r[3].parse().unwrap()).collect();
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64;
        let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / errs.len() as f64;
        let rep_mae: f64 = report[d - 1][1].parse().unwrap();
        let rep_mse: f64 = report[d - 1][2].parse().unwrap();
        assert!((mae - rep_mae).abs() <= 1e-12 * rep_mae.max(1.0));
        assert!((mse - rep_mse).abs() <= 1e-12 * rep_mse.max(1.0));
    }
    let channels = read_rows(&out.path().join("channels.csv"), b',');
    assert_eq!(channels.len(), 7 * 2500);
}

#[test]
fn same_seed_same_bytes_and_tsv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let ok = bin()
            .args(["run", "--seed", "11", "--format", "tsv", "--config"])
            .arg(config("lorenz_ald_krls.toml"))
            .arg("--out")
            .arg(dir)
            .status()
            .unwrap();
        assert!(ok.success());
    }
    let ra = std::fs::read(a.path().join("report.tsv")).unwrap();
    assert_eq!(ra, std::fs::read(b.path().join("report.tsv")).unwrap());
    assert!(String::from_utf8(ra).unwrap().starts_with("depth\tmae\tmse\n"));
    let echo = std::fs::read_to_string(a.path().join("config.toml")).unwrap();
    assert!(echo.contains("seed = 11"));
}

#[test]
fn generate_series() {
    let out = tempfile::tempdir().unwrap();
    let ok = bin()
        .args(["generate", "--config"])
        .arg(config("rlc_ald_krls.toml"))
        .arg("--out")
        .arg(out.path())
        .status()
        .unwrap();
    assert!(ok.success());
    let rows = read_rows(&out.path().join("rlc.csv"), b',');
    assert_eq!(rows.len(), 2501);
    assert_eq!(rows[0], ["0", "0", "0.3"]);
}

#[test]
fn sweep_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    let base = std::fs::read_to_string(config("rlc_ald_krls.toml")).unwrap();
    std::fs::write(&cfg, format!("{base}\n[sweep]\n\"topology.depth\" = [2, 4]\n")).unwrap();
    let out = dir.path().join("out");
    let ok = bin().args(["sweep", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(ok.success());
    let rows = read_rows(&out.join("sweep.csv"), b',');
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.last().unwrap() == "ok"));
    assert!(out.join("run_001/trace_depth4.csv").exists());
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let base = std::fs::read_to_string(config("rlc_ald_krls.toml")).unwrap();
    std::fs::write(&cfg, base.replace("nu = 0.01", "nu = 0.01\nnew_key = 1")).unwrap();
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("new_key"));

    let out = bin().args(["run", "--config", "/definitely/missing.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_writes_table() {
    let out = tempfile::tempdir().unwrap();
    let res = bin().arg("verify").arg("--out").arg(out.path()).output().unwrap();
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]")).count(), 11);
    let rows = read_rows(&out.path().join("verify.csv"), b',');
    assert_eq!(rows.len(), 11);
    assert_eq!(res.status.success(), rows.iter().all(|r| r[2] == "true"));
}
