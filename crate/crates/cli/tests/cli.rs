//! End-to-end tests of the `leafsolve` binary: exit codes, report shape,
//! validation diagnostics, output files, and the determinism contract.

use std::path::PathBuf;
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_leafsolve")
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(binary())
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(output: &Output) -> serde_json::Value {
    serde_json::from_slice(&output.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&output.stdout)
        )
    })
}

#[test]
fn acceptance_criterion_10_selftest_is_deterministic() {
    let first = run(&["selftest"]);
    assert!(
        first.status.success(),
        "selftest failed: {}",
        String::from_utf8_lossy(&first.stdout)
    );
    let second = run(&["selftest"]);
    assert!(second.status.success());
    assert_eq!(
        first.stdout, second.stdout,
        "selftest reports are not byte-identical"
    );
    // all residuals on the flat fixture are below 1e-10
    let report = stdout_json(&first);
    let checks = report["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    for check in checks {
        assert_eq!(check["pass"], true, "failed check {check}");
        assert!(
            check["residual"].as_f64().unwrap() < 1e-10,
            "residual too large in {check}"
        );
    }
    println!(
        "ACCEPTANCE 10 PASS selftest determinism: {} checks, byte-identical reports",
        checks.len()
    );
}

#[test]
fn selftest_report_shape_and_conventions() {
    let output = run(&["selftest"]);
    let report = stdout_json(&output);
    assert_eq!(report["command"], "selftest");
    assert!(report["inputs_digest"]
        .as_str()
        .unwrap()
        .starts_with("sha256:"));
    assert!(report["conventions"]["christoffel_layout"]
        .as_str()
        .unwrap()
        .contains("[a][i][j]"));
    assert_eq!(report["pass"], true);
}

#[test]
fn flag_overrides_roundtrip_into_the_digest() {
    let a = stdout_json(&run(&["selftest"]));
    let b = stdout_json(&run(&["selftest", "--step", "0.02"]));
    assert_ne!(a["inputs_digest"], b["inputs_digest"]);
    assert_eq!(b["settings"]["step"], 0.02);
}

#[test]
fn validate_accepts_good_fixtures() {
    for name in [
        "sphere.json",
        "exponential_tde.json",
        "twist.json",
        "sphere_mismatch.json",
    ] {
        let path = fixture(name);
        let output = run(&["validate", "--manifest", path.to_str().unwrap()]);
        assert!(output.status.success(), "{name} failed validation");
        let report = stdout_json(&output);
        assert_eq!(report["diagnostics"].as_array().unwrap().len(), 0);
    }
}

#[test]
fn validate_reports_parse_offset_and_path() {
    let path = fixture("bad_expr.json");
    let output = run(&["validate", "--manifest", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    let report = stdout_json(&output);
    let diagnostics = report["diagnostics"].as_array().unwrap();
    assert_eq!(diagnostics.len(), 1);
    let d = &diagnostics[0];
    assert_eq!(d["path"], "/distributions/broken/f/0/0");
    assert!(d["message"].as_str().unwrap().contains("offset 4"));
}

#[test]
fn validate_reports_sigma_shape_mismatch() {
    let path = fixture("bad_sigma.json");
    let output = run(&["validate", "--manifest", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    let report = stdout_json(&output);
    let diagnostics = report["diagnostics"].as_array().unwrap();
    assert!(diagnostics
        .iter()
        .any(|d| d["path"] == "/cah/mismatched/sigma0"
            && d["message"].as_str().unwrap().contains("2 x 3")));
}

#[test]
fn solve_tde_passes_on_integrable_and_flags_twist() {
    let good = fixture("exponential_tde.json");
    let output = run(&["solve-tde", "--manifest", good.to_str().unwrap()]);
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stdout)
    );

    let twist = fixture("twist.json");
    let output = run(&["solve-tde", "--manifest", twist.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1), "twist must fail the checks");
    let report = stdout_json(&output);
    let levi = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "levi_residual_along_rays")
        .unwrap();
    assert!(levi["residual"].as_f64().unwrap() >= 0.9);
}

#[test]
fn recover_and_verify_metric_on_the_sphere() {
    let path = fixture("sphere.json");
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "verify-metric",
        "--manifest",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stdout)
    );
    let report = stdout_json(&output);
    let nabla = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "nabla_g_residual")
        .unwrap();
    assert!(nabla["residual"].as_f64().unwrap() < 1e-5);
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn recover_metric_writes_grid_csv() {
    let path = fixture("sphere.json");
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "recover-metric",
        "--manifest",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let csv_path = dir.path().join("metric_round.csv");
    let text = std::fs::read_to_string(csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "x1,x2,g11,g12,g21,g22,nabla_residual,signature,boundary"
    );
    assert_eq!(lines.count(), 81); // 9 x 9 grid
}

#[test]
fn sphere_battery_subcommands_pass() {
    let path = fixture("sphere.json");
    for cmd in [
        "levi",
        "integrability",
        "curvature",
        "transport",
        "geodesic",
        "exp",
        "log",
        "cah-map",
        "cah-check",
        "affine-symmetry",
    ] {
        let output = run(&[cmd, "--manifest", path.to_str().unwrap()]);
        assert!(
            output.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&output.stdout)
        );
    }
}

#[test]
fn cah_check_flags_curvature_scale_mismatch() {
    let path = fixture("sphere_mismatch.json");
    let output = run(&["cah-check", "--manifest", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    let report = stdout_json(&output);
    let curvature = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "order_0_curvature")
        .unwrap();
    let residual = curvature["residual"].as_f64().unwrap();
    assert!((residual - 0.75).abs() < 1e-9, "residual {residual}");
}

#[test]
fn csv_format_renders_check_table() {
    let output = run(&["selftest", "--format", "csv"]);
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.starts_with("name,target,residual,threshold,pass"));
}

#[test]
fn validate_names_christoffel_shape_indices() {
    let path = fixture("bad_gamma.json");
    let output = run(&["validate", "--manifest", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2));
    let report = stdout_json(&output);
    let diagnostics = report["diagnostics"].as_array().unwrap();
    assert!(diagnostics
        .iter()
        .any(|d| d["path"] == "/connections/lopsided/christoffel/0/1"
            && d["message"].as_str().unwrap().contains("length 3")));
}

#[test]
fn thread_cap_does_not_change_reports() {
    let default = run(&["selftest"]);
    let capped = Command::new(binary())
        .args(["selftest"])
        .env("LEAFSOLVE_THREADS", "1")
        .output()
        .expect("binary runs");
    assert!(capped.status.success());
    assert_eq!(default.stdout, capped.stdout);
}

#[test]
fn missing_manifest_is_an_input_error() {
    let output = run(&["curvature"]);
    assert_eq!(output.status.code(), Some(2));
    let output = run(&["curvature", "--manifest", "/nonexistent/path.json"]);
    assert_eq!(output.status.code(), Some(2));
}
