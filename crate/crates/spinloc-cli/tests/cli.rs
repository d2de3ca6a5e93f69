use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spinloc::calibration::nv_axes_lab;
use spinloc::hamiltonian::nv_resonances;
use spinloc::spincore::Vec3;

fn spinloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinloc"))
        .args(args)
        .env_remove("SPINLOC_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// Data rows of a CSV on stdout, header dropped.
fn rows(o: &Output) -> Vec<Vec<String>> {
    stdout(o)
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap_or_else(|_| panic!("`{s}` is not a number"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../spinloc/scenarios")
        .join(format!("{name}.toml"))
}

fn golden(file: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../spinloc/scenarios/golden").join(file);
    fs::read_to_string(path).unwrap()
}

#[test]
fn invert_hyperfine_prints_components() {
    let o = spinloc(&["invert-hyperfine", "--fcp", "10.2", "--f0", "387.5", "--f1", "215.6", "--tau", "1.6875"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("a_parallel_khz,a_perp_khz"));
    let r = &rows(&o)[0];
    assert!((num(&r[0]) + 173.1).abs() < 0.1, "{r:?}");
    assert!((num(&r[1]) - 22.3).abs() < 0.1, "{r:?}");
}

#[test]
fn trivial_phase_recovery() {
    let o = spinloc(&["recover-phase", "--eta", "0", "--m", "0", "--t0", "6.872", "--dt", "9.6"]);
    assert!(o.status.success());
    assert_eq!(num(&rows(&o)[0][0]), 0.0);
}

#[test]
fn match_sites_lists_six_labels() {
    let o = spinloc(&["match-sites", "--apar", "-173.1", "--aperp", "22.3", "--tol", "5,1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let labels: Vec<String> = rows(&o).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(labels.len(), 6, "{labels:?}");
    assert_eq!(labels[0], "C280");
}

#[test]
fn json_format_carries_columns_and_rows() {
    let o = spinloc(&[
        "--format", "json", "invert-hyperfine", "--fcp", "10.2", "--f0", "387.5", "--f1", "215.6", "--tau", "1.6875",
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["columns"][1], "a_perp_khz");
    assert!((v["rows"][0][0].as_f64().unwrap() + 173.1).abs() < 0.1);
}

#[test]
fn input_errors_exit_with_two() {
    let o = spinloc(&["invert-hyperfine", "--fcp", "10.2", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bogus"));

    let o = spinloc(&["recover-phase", "--eta", "0", "--m", "3", "--t0", "6.872", "--dt", "9.6"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("odd"));

    let o = spinloc(&["run", "/nonexistent/scenario.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/scenario.toml"));
}

#[test]
fn malformed_files_report_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    fs::write(&trace, "t_us,value\n0,1\n1,x\n").unwrap();
    let o = spinloc(&["fit", trace.to_str().unwrap(), "--f-hint", "10"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("value"), "{err}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\n[sequence]\nkind = \"cp-sweep\"\nn_pulses = 0\ntau_us = { start = 1.0, stop = 2.0, points = 3 }\n[[targets]]\na_parallel_khz = 1.0\na_perp_khz = 1.0\n").unwrap();
    let o = spinloc(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sequence.n_pulses"), "{}", stderr(&o));

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "name = \"x\"\nsed = 3\n").unwrap();
    let o = spinloc(&["run", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn numerical_failure_exits_with_three() {
    // alpha = pi: the inversion is singular
    let o = spinloc(&["invert-hyperfine", "--fcp", "10", "--f0", "500", "--f1", "215.6", "--tau", "2"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn run_writes_golden_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nutation.csv");
    let o = spinloc(&["run", scenario("fig2b-nutation").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), golden("fig2b-nutation.csv"));
    assert_eq!(fs::read_to_string(dir.path().join("nutation.json")).unwrap(), golden("fig2b-nutation.json"));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_spinloc"))
        .args(["run", scenario("empty-bath-flat").to_str().unwrap()])
        .env("SPINLOC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    assert_eq!(fs::read_to_string(dir.path().join("empty-bath-flat.csv")).unwrap(), golden("empty-bath-flat.csv"));
    assert!(dir.path().join("empty-bath-flat.json").exists());
}

#[test]
fn identical_invocations_give_identical_bytes() {
    for name in ["fig2a-cp-spectrum", "figs2-field"] {
        let path = scenario(name);
        let args = ["--format", "json", "run", path.to_str().unwrap()];
        let a = spinloc(&args);
        let b = spinloc(&args);
        assert!(a.status.success());
        assert_eq!(a.stdout, b.stdout, "{name}");
    }
}

#[test]
fn fit_recovers_a_synthetic_tone() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let mut text = String::from("t_us,value\n");
    for i in 0..200 {
        let t = i as f64 * 2.0;
        let v = 0.5 + 0.3 * (std::f64::consts::TAU * 10.2e-3 * t + 0.7).cos();
        text.push_str(&format!("{t},{v}\n"));
    }
    fs::write(&trace, text).unwrap();
    let o = spinloc(&["fit", trace.to_str().unwrap(), "--f-hint", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = &rows(&o)[0];
    assert!((num(&r[0]) - 10.2).abs() < 1e-6, "{r:?}");
    assert!((num(&r[3]) - 0.7f64.to_degrees()).abs() < 1e-4, "{r:?}");
    assert_eq!(r[4], "");
}

#[test]
fn analytic_phi_from_measured_phases() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    fs::write(&m, "phi_rf_deg,phi0_deg,f_p_khz\n0,334,215.7908\n90,64,215.7908\n180,154,215.7908\n270,244,215.7908\n").unwrap();
    let o = spinloc(&[
        "phi", "--measurements", m.to_str().unwrap(), "--analytic", "--theta", "94.8", "--rf-axis", "55.7,186.2",
        "--f-rf", "215.6", "--t1", "102.041",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for r in rows(&o) {
        assert!((num(&r[3]) - 243.2).abs() < 0.1, "{r:?}");
    }
    assert!(stderr(&o).contains("phi_mean_deg"));

    let o = spinloc(&["phi", "--measurements", m.to_str().unwrap(), "--simulate", "--analytic", "--theta", "94.8"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn field_calibration_round_trip() {
    let b = Vec3::from_spherical(5.2f64.to_radians(), 81.6f64.to_radians()) * 1.47;
    let mut text = String::from("axis_x,axis_y,axis_z,f_minus_mhz,f_plus_mhz\n");
    for axis in nv_axes_lab() {
        let (lo, hi) = nv_resonances(2870.4, 28.0, b, axis);
        text.push_str(&format!("{},{},{},{lo},{hi}\n", axis.x, axis.y, axis.z));
    }
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("field.csv");
    fs::write(&file, text).unwrap();
    let o = spinloc(&["calibrate", "field", file.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: Vec<f64> = rows(&o)[0].iter().map(|s| num(s)).collect();
    assert!((r[0] - 2870.4).abs() < 1e-3 && (r[1] - 1.47).abs() < 1e-4, "{r:?}");
    assert!((r[2] - 5.2).abs() < 0.05 && (r[3] - 81.6).abs() < 0.05, "{r:?}");
    assert!((r[4] - 55.7).abs() < 0.1 && (r[5] - 186.2).abs() < 0.1, "{r:?}");
}

#[test]
fn delay_calibration_on_scenario_scan() {
    let scan: String = golden("figs3-delay-scan.csv")
        .lines()
        .map(|l| {
            let mut f = l.split(',');
            format!("{},{}\n", f.next().unwrap(), f.next().unwrap())
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("scan.csv");
    fs::write(&file, scan).unwrap();
    let o = spinloc(&[
        "calibrate", "delay", file.to_str().unwrap(), "--tau", "2.319", "--n-pulses", "4", "--burst-start", "11",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t_delay = num(&rows(&o)[0][0]);
    assert!((t_delay - 1.088).abs() < 0.003, "{t_delay}");
}

#[test]
fn lattice_window_selects_by_azimuth() {
    let all = spinloc(&["lattice", "--extent", "7", "--shell", "6.715,96.4"]);
    assert_eq!(rows(&all).len(), 12);
    let o = spinloc(&["lattice", "--extent", "7", "--shell", "6.715,96.4", "--phi-window", "250.9,2"]);
    let r = rows(&o);
    assert_eq!(r.len(), 1);
    assert!((num(&r[0][9]) - 250.9).abs() < 0.1);
}

#[test]
fn help_documents_units() {
    let o = spinloc(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("degrees") && text.contains("µs") && text.contains("kHz"));
}
