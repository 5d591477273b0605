use std::fs;
use std::path::Path;
use std::process::Command;

fn dwm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dwm"))
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(|x| x.parse().unwrap()).collect()).collect()
}

#[test]
fn mde_semicircle_density_and_median() {
    let dir = tempfile::tempdir().unwrap();
    let def = dir.path().join("zero.json");
    fs::write(&def, r#"{"eigenvalues": [0.0, 0.0, 0.0, 0.0]}"#).unwrap();
    let out = dir.path().join("out");
    let st = dwm().args(["mde", "--deformation"]).arg(&def).args(["--grid", "2048", "--quantiles", "100", "--out"]).arg(&out).status().unwrap();
    assert!(st.success());
    let rows = read_csv(&out.join("density.csv"));
    assert_eq!(rows.len(), 2049);
    let mid = rows.iter().find(|r| r[0].abs() < 1e-12).expect("E = 0 on the grid");
    assert!((mid[1] - 1.0 / std::f64::consts::PI).abs() < 1e-6, "rho(0) = {}", mid[1]);
    let q = read_csv(&out.join("quantiles.csv"));
    assert_eq!(q.len(), 100);
    assert!(q[49][1].abs() < 1e-6, "gamma_50 = {}", q[49][1]);
    assert!(out.join("bulk.json").exists() && out.join("manifest.json").exists());
}

#[test]
fn mde_missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let st = dwm().args(["mde", "--deformation", "/nonexistent/d.json", "--out"]).arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn flow_semicircle_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f");
    let st = dwm().args(["flow", "--z0", "0,2", "--t", "1", "--out"]).arg(&out).status().unwrap();
    assert!(st.success());
    let rows = read_csv(&out.join("trajectory.csv"));
    let last = rows.last().unwrap();
    assert!((last[0] - 1.0).abs() < 1e-12);
    assert!((last[2] - 0.78136).abs() < 5e-5, "Im z_T = {}", last[2]);
    assert!(rows.iter().all(|r| r[8] <= 1e-8));

    let out0 = dir.path().join("f0");
    assert!(dwm().args(["flow", "--z0", "0,2", "--t", "0", "--out"]).arg(&out0).status().unwrap().success());
    assert_eq!(read_csv(&out0.join("trajectory.csv")).len(), 1);
}

#[test]
fn verify_unknown_test_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let st = dwm().args(["verify", "--suite", "smoke", "--test", "no-such-test", "--out"]).arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn verify_bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"trails": 7}"#).unwrap();
    let st = dwm().args(["verify", "--suite", "smoke", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

fn smoke_reports(out: &Path, workers: &str) -> Vec<(String, Vec<u8>)> {
    let st = dwm()
        .args(["verify", "--suite", "smoke", "--seed", "7", "--workers", workers])
        .args(["--test", "overlap-decay", "--test", "rigidity", "--test", "local-law-avg", "--test", "stability-relations", "--out"])
        .arg(out)
        .env_remove("DWM_SEED")
        .status()
        .unwrap();
    assert!(st.code() == Some(0) || st.code() == Some(1));
    let mut files: Vec<_> = fs::read_dir(out.join("reports"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.push(("summary.json".into(), fs::read(out.join("summary.json")).unwrap()));
    files.sort();
    files
}

#[test]
fn verify_smoke_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = smoke_reports(&dir.path().join("a"), "1");
    let b = smoke_reports(&dir.path().join("b"), "2");
    assert!(a.len() >= 5);
    assert_eq!(a, b);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["seed_source"], "flag");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_precedence_env_over_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let st = dwm()
        .args(["verify", "--suite", "smoke", "--test", "stability-relations", "--out"])
        .arg(&out)
        .env("DWM_SEED", "11")
        .status()
        .unwrap();
    assert!(st.code().is_some());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["seed_source"], "env");
}
