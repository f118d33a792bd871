use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use soc_core::ecm::{reference_ocv, simulate, CellState};
use soc_core::fitting::make_incremental_current_profile;
use soc_core::io::{self, RunManifest};
use soc_core::{EcmParams, OcvTable, Profile};

fn soc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) {
    let out = soc(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn snapshot_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots")
}

/// Compares against `tests/snapshots/<name>`; set `UPDATE_SNAPSHOTS=1` to
/// rewrite.
fn check_snapshot(name: &str, actual: &str) {
    let path = snapshot_dir().join(name);
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        fs::create_dir_all(snapshot_dir()).unwrap();
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
    assert_eq!(actual, expected, "snapshot {name} differs");
}

fn small_cell() -> EcmParams {
    EcmParams {
        ocv: OcvTable::from_fn(0.1, reference_ocv).unwrap(),
        ..EcmParams::reference_cell()
    }
}

fn fixture(dir: &Path) {
    io::write_params(&dir.join("cell.toml"), &small_cell()).unwrap();
    let current = [0.0, -2.0, -2.0, -2.0, 0.0, 0.0, 1.0, 1.0];
    fs::write(
        dir.join("drive.csv"),
        std::iter::once("t,i".to_string())
            .chain(current.iter().enumerate().map(|(k, i)| format!("{k},{i}")))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n",
    )
    .unwrap();
}

fn read_manifest(out: &Path) -> RunManifest {
    let mut p = out.as_os_str().to_owned();
    p.push(".manifest.json");
    RunManifest::from_json(&fs::read_to_string(PathBuf::from(p)).unwrap()).unwrap()
}

#[test]
fn simulate_snapshot_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    ok(
        &["simulate", "--params", "cell.toml", "--profile", "drive.csv", "--out", "traj.csv", "--soc0", "0.5"],
        dir.path(),
    );
    let traj = fs::read_to_string(dir.path().join("traj.csv")).unwrap();
    check_snapshot("simulate.csv", &traj);

    let manifest = read_manifest(&dir.path().join("traj.csv"));
    assert_eq!(manifest.command, "simulate");
    assert_eq!(manifest.config["soc0"], 0.5);
    assert_eq!(
        manifest.input_digests["drive.csv"],
        io::file_digest(&dir.path().join("drive.csv")).unwrap()
    );
    assert_eq!(manifest.input_digests.len(), 2);
}

#[test]
fn estimate_snapshot_with_truth_column() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    ok(
        &["simulate", "--params", "cell.toml", "--profile", "drive.csv", "--out", "traj.csv", "--soc0", "0.5"],
        dir.path(),
    );
    for kind in ["cc", "ekf", "aekf-mle", "aekf-cm"] {
        let out = format!("est-{kind}.csv");
        ok(
            &["estimate", "--params", "cell.toml", "--profile", "traj.csv", "--kind", kind, "--window", "4", "--out", &out],
            dir.path(),
        );
        let text = fs::read_to_string(dir.path().join(&out)).unwrap();
        assert!(text.starts_with("t,z_est,z_true\n"));
        assert_eq!(text.lines().count(), 9);
        check_snapshot(&out, &text);
        assert_eq!(read_manifest(&dir.path().join(&out)).config["kind"], kind);
    }
}

#[test]
fn fit_ocv_recovers_table() {
    let dir = tempfile::tempdir().unwrap();
    let cell = small_cell();
    // C/50 sweeps; the ohmic drop plays the role of hysteresis.
    let i = cell.q_max / 3600.0 / 50.0;
    let n = (cell.q_max / i / 10.0) as usize;
    for (name, sign, z0) in [("charge.csv", 1.0, 0.0), ("discharge.csv", -1.0, 1.0)] {
        let mut current = vec![sign * i; n];
        current.push(0.0);
        let profile = Profile::uniform(10.0, current, None).unwrap();
        let traj = simulate(&cell, CellState::at_rest(z0), &profile).unwrap();
        let profile = profile.with_voltage(traj.iter().map(|s| s.voltage).collect()).unwrap();
        io::write_profile(&dir.path().join(name), &profile).unwrap();
    }
    ok(
        &["fit-ocv", "--charge", "charge.csv", "--discharge", "discharge.csv", "--spacing", "0.1", "--out", "ocv.toml"],
        dir.path(),
    );
    let fitted = io::read_params(&dir.path().join("ocv.toml")).unwrap();
    assert!((fitted.q_max / cell.q_max - 1.0).abs() < 1e-2);
    for (a, b) in fitted.ocv.ocv_values().iter().zip(cell.ocv.ocv_values()) {
        assert!((a - b).abs() < 5e-3, "{a} vs {b}");
    }
    assert_eq!(read_manifest(&dir.path().join("ocv.toml")).input_digests.len(), 2);
}

#[test]
fn fit_params_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cell = EcmParams::reference_cell();
    let rest = Profile::uniform(1.0, vec![0.0; 30], None).unwrap();
    let pulses = make_incremental_current_profile(2.5, 360.0, 1200.0, 2, 1.0).unwrap();
    let profile = rest.concat(&pulses, 1.0).unwrap();
    let traj = simulate(&cell, CellState::at_rest(0.3), &profile).unwrap();
    let profile = profile.with_voltage(traj.iter().map(|s| s.voltage).collect()).unwrap();
    io::write_profile(&dir.path().join("pulses.csv"), &profile).unwrap();
    let guess = cell.scaled_passive(0.5);
    io::write_params(&dir.path().join("guess.toml"), &guess).unwrap();

    ok(
        &[
            "fit-params", "--params", "guess.toml", "--profile", "pulses.csv", "--out", "fit.toml", "--report",
            "report.json",
        ],
        dir.path(),
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    for key in ["params", "final_rss", "iterations", "converged"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["converged"], true);
    let fitted = io::read_params(&dir.path().join("fit.toml")).unwrap();
    for (a, b) in fitted.passive().iter().zip(cell.passive()) {
        assert!((a / b - 1.0).abs() < 1e-2, "{a} vs {b}");
    }
}

#[test]
fn benchmark_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec!["benchmark", "--axis", "param-error", "--values", "-20,0,20", "--trials", "3", "--duration", "300", "--seed", "5", "--out", out]
    };
    ok(&args("a.csv"), dir.path());
    ok(&args("b.csv"), dir.path());
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
    assert!(a.starts_with("axis_value,estimator,mae_mean,ci_lo,ci_hi\n"));
    assert_eq!(a.lines().count(), 1 + 3 * 4);
    check_snapshot("benchmark.csv", &a);
    let manifest = read_manifest(&dir.path().join("a.csv"));
    assert_eq!(manifest.master_seed, Some(5));
    assert_eq!(manifest.command, "benchmark");
}

#[test]
fn sweep_window_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["sweep-window", "--values", "4,16", "--trials", "2", "--duration", "300", "--out", "w.csv"],
        dir.path(),
    );
    let text = fs::read_to_string(dir.path().join("w.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    check_snapshot("sweep-window.csv", &text);
    assert_eq!(read_manifest(&dir.path().join("w.csv")).config["spec"]["axis"], "window_size");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(soc(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(soc(&["simulate", "--nope"], dir.path()).status.code(), Some(2));
    assert_eq!(
        soc(&["estimate", "--kind", "ukf", "--params", "a", "--profile", "b", "--out", "c"], dir.path()).status.code(),
        Some(2)
    );
    assert!(soc(&["--help"], dir.path()).status.success());
}

#[test]
fn domain_errors_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    fs::write(dir.path().join("bad.toml"), fs::read_to_string(dir.path().join("cell.toml")).unwrap().replacen("r0 = ", "r0 = -", 1))
        .unwrap();
    let out = soc(
        &["simulate", "--params", "bad.toml", "--profile", "drive.csv", "--out", "t.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.contains("r0"), "{stderr}");

    let out = soc(
        &["simulate", "--params", "cell.toml", "--profile", "missing.csv", "--out", "t.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("t.csv").exists());
}
