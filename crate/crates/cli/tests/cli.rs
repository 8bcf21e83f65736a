use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qbsdej_cli::output::sha256_hex;
use qbsdej_cli::{EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_PASS};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qbsdej"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn exec(verb: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg(verb).arg(config).arg("--out").arg(out).args(extra).output().unwrap()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

const SOLVE: &str = r#"{
  "experiment": "solve",
  "driver": { "preset": "zero" },
  "terminal": { "kind": "affine", "scale": 1.0, "shift": 0.0 },
  "grid": { "horizon": 1.0, "steps": 20 },
  "ensemble": { "n_paths": 20000, "seed": 1, "dynamics": "brownian" }
}"#;

#[test]
fn solve_martingale_case_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "solve.json", SOLVE);
    let out = dir.path().join("out");
    let res = exec("run", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(EXIT_PASS), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = read_csv(&out.join("summary.csv"));
    let mart = summary.iter().find(|r| r[0] == "martingale_rejected_fraction").unwrap();
    assert_eq!(mart[3], "true");
    // Y is a martingale started at E[W_T] = 0
    let y0 = read_csv(&out.join("y0.csv"));
    let (v, se): (f64, f64) = (y0[0][0].parse().unwrap(), y0[0][1].parse().unwrap());
    assert!(v.abs() <= 3.0 * se, "{v} +- {se}");
}

#[test]
fn identical_configs_give_bit_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "audit.json",
        r#"{
          "experiment": "audit",
          "model": { "preset": "gamma", "theta": 1.0, "beta": 1.0 },
          "driver": { "preset": "canonical", "delta": 1.0 },
          "terminal": { "kind": "affine", "scale": 0.5, "shift": 3.0 },
          "grid": { "horizon": 1.0, "steps": 10 },
          "ensemble": { "n_paths": 5000, "seed": 11 },
          "truncation": { "kappa": 4.0, "cells_per_band": 2 },
          "triple": [4, 4, 4]
        }"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(exec("run", &cfg, &a, &[]).status.code(), Some(EXIT_PASS));
    assert_eq!(exec("run", &cfg, &b, &["--threads", "1"]).status.code(), Some(EXIT_PASS));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 5);
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn manifest_references_config_hash_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "solve.json", SOLVE);
    let out = dir.path().join("out");
    assert_eq!(exec("run", &cfg, &out, &[]).status.code(), Some(EXIT_PASS));
    let hash = sha256_hex(&fs::read(&cfg).unwrap());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"], hash.as_str());
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["ensemble"]["seed"], 1);
    assert!(manifest["version"].is_string());
    let listed: Vec<String> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["file"].as_str().unwrap().to_string())
        .collect();
    for entry in fs::read_dir(&out).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.ends_with(".csv") {
            let text = fs::read_to_string(out.join(&name)).unwrap();
            assert_eq!(text.lines().next().unwrap(), format!("# config_sha256: {hash}"));
            assert!(listed.contains(&name), "{name} missing from manifest");
        }
    }
    for a in manifest["artifacts"].as_array().unwrap() {
        let bytes = fs::read(out.join(a["file"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"], sha256_hex(&bytes).as_str());
    }
}

#[test]
fn floats_round_trip_with_seventeen_digits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "solve.json", SOLVE);
    let out = dir.path().join("out");
    exec("run", &cfg, &out, &[]);
    for row in read_csv(&out.join("y_mean.csv")) {
        let mantissa = row[2].split('e').next().unwrap().trim_start_matches('-').replace('.', "");
        assert_eq!(mantissa.len(), 17, "{}", row[2]);
    }
}

#[test]
fn missing_seed_is_a_config_error_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{
  "experiment": "solve",
  "grid": { "horizon": 1.0, "steps": 20 },
  "ensemble": { "n_paths": 1000 }
}"#,
    );
    let out = dir.path().join("out");
    for verb in ["run", "validate"] {
        let res = exec(verb, &cfg, &out, &[]);
        assert_eq!(res.status.code(), Some(EXIT_CONFIG));
        let msg = String::from_utf8_lossy(&res.stderr);
        assert!(msg.contains("seed") && msg.contains("line"), "{msg}");
    }
    assert!(!out.exists());
}

#[test]
fn invalid_values_and_unknown_presets_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [
        r#"{"experiment":"solve","grid":{"horizon":0.0,"steps":20},"ensemble":{"n_paths":1000,"seed":1}}"#,
        r#"{"experiment":"solve","grid":{"horizon":1.0,"steps":1},"ensemble":{"n_paths":1000,"seed":1}}"#,
        r#"{"experiment":"solve","grid":{"horizon":1.0,"steps":20},"ensemble":{"n_paths":50,"seed":1}}"#,
        r#"{"experiment":"solve","model":{"preset":"tempered"},"grid":{"horizon":1.0,"steps":20},"ensemble":{"n_paths":1000,"seed":1}}"#,
        r#"{"experiment":"solve","driver":{"preset":"canonical","delta":1.0},"grid":{"horizon":1.0,"steps":20},"ensemble":{"n_paths":1000,"seed":1}}"#,
        r#"{"experiment":"scheme","schedule":[[4,4,4],[2,2,2]],"grid":{"horizon":1.0,"steps":20},"ensemble":{"n_paths":1000,"seed":1}}"#,
        r#"{"experiment":"oracle","oracles":[{"name":"black_scholes"}],"grid":{"horizon":1.0,"steps":20},"ensemble":{"n_paths":1000,"seed":1}}"#,
        r#"{"experiment":"solve", "grid": "#,
    ];
    for (i, body) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.json"), body);
        let res = exec("run", &cfg, &out, &[]);
        assert_eq!(res.status.code(), Some(EXIT_CONFIG), "case {i}: {}", String::from_utf8_lossy(&res.stderr));
    }
    assert!(!out.exists());
}

#[test]
fn oracle_values_match_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "oracles.json",
        r#"{
          "experiment": "oracle",
          "grid": { "horizon": 1.0, "steps": 10 },
          "ensemble": { "n_paths": 100000, "seed": 5 },
          "oracles": [
            { "name": "gaussian_entropic", "sigma": 1.0 },
            { "name": "huber", "n": 2.0, "y": 3.0 },
            { "name": "null_measure" },
            { "name": "girsanov", "b": 0.5 },
            { "name": "compound_poisson", "rate": 2.0, "u": 0.4 }
          ]
        }"#,
    );
    let out = dir.path().join("out");
    let res = exec("oracle", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(EXIT_PASS), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = read_csv(&out.join("oracles.csv"));
    assert_eq!(rows.len(), 5);
    let value = |i: usize| rows[i][1].parse::<f64>().unwrap();
    let se = |i: usize| rows[i][2].parse::<f64>().unwrap();
    assert!((value(0) - 0.5).abs() <= 3.0 * se(0));
    assert!((value(1) - 5.0).abs() < 1e-6);
    assert_eq!(value(2), 0.0);
    assert!((value(3) - 0.5).abs() <= 3.0 * se(3));
    assert!((value(4) - 1.0).abs() <= 3.0 * se(4));
    assert!(rows.iter().all(|r| r[4] == "true"));
}

#[test]
fn failing_check_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    // e^{4 X_T} for gamma jumps has no finite moment: the stability check must fail
    let cfg = write_config(
        dir.path(),
        "heavy.json",
        r#"{
          "experiment": "risk",
          "model": { "preset": "gamma", "theta": 1.0, "beta": 1.0 },
          "terminal": { "kind": "affine", "scale": 4.0, "shift": 0.0 },
          "grid": { "horizon": 1.0, "steps": 4 },
          "ensemble": { "n_paths": 5000, "seed": 3 },
          "risk": { "times": [0], "gammas": [1.0] }
        }"#,
    );
    let out = dir.path().join("out");
    let res = exec("run", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(EXIT_CHECK_FAILED));
    assert!(out.join("summary.csv").exists() && out.join("manifest.json").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["pass"], false);
}

#[test]
fn scheme_report_has_one_row_per_triple_and_monotone_links() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "scheme.json",
        r#"{
          "experiment": "scheme",
          "model": { "preset": "gamma", "theta": 1.0, "beta": 1.0 },
          "driver": { "preset": "canonical", "delta": 1.0 },
          "terminal": { "kind": "affine", "scale": 0.5, "shift": 3.0 },
          "grid": { "horizon": 1.0, "steps": 20 },
          "ensemble": { "n_paths": 20000, "seed": 7 },
          "schedule": [[2, 2, 2], [4, 4, 4], [8, 8, 8]]
        }"#,
    );
    let out = dir.path().join("out");
    let res = exec("run", &cfg, &out, &[]);
    assert_eq!(res.status.code(), Some(EXIT_PASS), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = read_csv(&out.join("convergence.csv"));
    assert_eq!(rows.len(), 3);
    let links = read_csv(&out.join("links.csv"));
    assert_eq!(links.len(), 2);
    for l in &links {
        assert_eq!(l[2], "increase");
        assert!(l[3].parse::<f64>().unwrap() < 0.01);
    }
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let res = bin().arg("validate").arg(&path).output().unwrap();
        assert_eq!(res.status.code(), Some(EXIT_PASS), "{}: {}", path.display(), String::from_utf8_lossy(&res.stderr));
    }
}
