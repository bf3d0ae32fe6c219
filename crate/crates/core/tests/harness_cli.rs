use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use minimax_debias::debiased::Method;
use minimax_debias::dgp::{sample, DgpConfig, H0Kind};
use minimax_debias::harness::{run_grid, run_replication, Cell, ExperimentConfig, CSV_HEADER};

const SMALL_GRID: &str = r#"
reps = 3
base_seed = 17
oracle_mc_n = 20000

[grid]
h0 = ["sin", "abs"]
n = [200]
rho = [0.5]

[estimator]
h_class = { kind = "linear_sieve", degree = 3, intercept = true }
xi_class = { kind = "linear_sieve", degree = 3, intercept = true }
q_class = { kind = "linear_sieve", degree = 3, intercept = true }
q_tilde_class = { kind = "linear_sieve", degree = 3, intercept = true }
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minimax-debias"))
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(SMALL_GRID).unwrap()
}

#[test]
fn one_cell_grid_has_a_row_per_method() {
    let mut cfg = small_config();
    cfg.grid.h0 = vec![H0Kind::Abs];
    cfg.reps = 5;
    let result = run_grid(&cfg).unwrap();
    let methods: Vec<Method> = result.rows.iter().map(|r| r.method).collect();
    assert_eq!(methods, vec![Method::Dr, Method::Tmle, Method::Ipw, Method::Direct]);
    for row in &result.rows {
        assert_eq!(row.reps, 5);
        assert!(row.rmse * row.rmse >= row.bias * row.bias - 1e-12);
        assert_eq!(row.cov.is_some(), row.method.has_se());
    }
    assert_eq!(result.manifest.cells.len(), 1);
    assert_eq!(result.manifest.cells[0].failed_reps, 0);
}

#[test]
fn replications_are_reproducible_and_scored_against_target() {
    let cfg = small_config();
    let cell = Cell {
        h0: H0Kind::Sin,
        n: 200,
        rho: 0.5,
    };
    let a = run_replication(&cfg, &cell, 2, 0.9);
    let b = run_replication(&cfg, &cell, 2, 0.9);
    assert_eq!(a, b);

    for rep in 0..3 {
        let rec = run_replication(&cfg, &cell, rep, 100.9);
        for (m, r) in rec.outcome.unwrap() {
            if m.has_se() {
                assert_eq!(r.covered, Some(false), "{m} rep {rep}");
            } else {
                assert_eq!(r.covered, None);
            }
        }
    }
}

#[test]
fn kernel_replication_fits_desk_budget() {
    let cfg = ExperimentConfig::default();
    let cell = Cell {
        h0: H0Kind::Sin,
        n: 500,
        rho: 0.5,
    };
    let start = Instant::now();
    let rec = run_replication(&cfg, &cell, 0, 0.0);
    assert!(rec.outcome.is_ok());
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> Vec<u8> {
    let config = dir.join("grid.toml");
    std::fs::write(&config, SMALL_GRID).unwrap();
    let out = dir.join(name);
    run(bin().arg("simulate").arg("--config").arg(&config).arg("--out").arg(&out).args(extra));
    std::fs::read(out).unwrap()
}

#[test]
fn simulate_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let first = simulate(dir.path(), "a.csv", &[]);
    let second = simulate(dir.path(), "b.csv", &["--threads", "1"]);
    assert_eq!(first, second);

    let text = String::from_utf8(first).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(lines.count(), 8);
    assert!(dir.path().join("a.json").exists());

    let reseeded = simulate(dir.path(), "c.csv", &["--seed", "99"]);
    assert_ne!(reseeded, text.as_bytes());
}

#[test]
fn thread_count_is_read_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("grid.toml");
    std::fs::write(&config, SMALL_GRID).unwrap();
    run(bin()
        .env("MINIMAX_DEBIAS_THREADS", "2")
        .arg("simulate")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("x.csv"))
        .args(["--split", "crossfit"]));
    let bad = bin()
        .env("MINIMAX_DEBIAS_THREADS", "lots")
        .args(["oracle-check", "--slope-n", "1000"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

fn write_dataset(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let p = sample(&DgpConfig::new(H0Kind::Sin, 300, 0.5, 4)).unwrap();
    let d = &p.dataset;
    let mut text = String::from("s,t,y\n");
    for i in 0..d.n {
        text.push_str(&format!("{},{},{}\n", d.s[(i, 0)], d.t[(i, 0)], d.g2[i]));
    }
    let data = dir.join("data.csv");
    std::fs::write(&data, text).unwrap();
    let roles = dir.join("roles.json");
    std::fs::write(&roles, r#"{"s": ["s"], "t": ["t"], "g2": "y"}"#).unwrap();
    (data, roles)
}

#[test]
fn estimate_prints_theta_json() {
    let dir = tempfile::tempdir().unwrap();
    let (data, roles) = write_dataset(dir.path());
    let out = run(bin()
        .arg("estimate")
        .arg("--data")
        .arg(&data)
        .arg("--roles")
        .arg(&roles)
        .args(["--seed", "3", "--split", "simple"]));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let obj = json.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["alpha", "ci", "k_folds", "method", "n", "se", "seed", "theta"]);
    assert_eq!(obj["method"], "dr");
    assert_eq!(obj["k_folds"], 2);
    assert_eq!(obj["seed"], 3);
    assert_eq!(obj["n"], 150);

    let target = dir.path().join("ipw.json");
    run(bin()
        .arg("estimate")
        .arg("--data")
        .arg(&data)
        .arg("--roles")
        .arg(&roles)
        .args(["--method", "ipw", "--out"])
        .arg(&target));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(target).unwrap()).unwrap();
    assert_eq!(json["method"], "ipw");
    assert!(json["se"].is_null() && json["ci"].is_null());
}

#[test]
fn estimate_reports_missing_columns() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_dataset(dir.path());
    let roles = dir.path().join("bad.json");
    std::fs::write(&roles, r#"{"s": ["s"], "t": ["nope"], "g2": "y"}"#).unwrap();
    let out = bin()
        .arg("estimate")
        .arg("--data")
        .arg(&data)
        .arg("--roles")
        .arg(&roles)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn oracle_check_passes_and_flags_bad_input() {
    let out = run(bin().args(["oracle-check", "--slope-n", "200000"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 3 * 7 + 4);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"s_support": [0.0], "t_support": [0.0], "pmf": [[0.5]], "g1_table": [[1.0]], "g2_table": [[1.0]], "m_weights": [1.0]}"#).unwrap();
    let out = bin().args(["oracle-check", "--slope-n", "1000", "--problem"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
}
