use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn isospec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isospec"))
        .args(args)
        .current_dir(dir)
        .env("ISOSPEC_LOG", "error")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error record");
    serde_json::from_str(line).expect("error record is JSON")
}

#[test]
fn spectrum_starts_with_the_ground_mode() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"surface": {"kind": "torus", "nx": 16, "ny": 16}, "solver": {"n_modes": 5}}"#,
    )
    .unwrap();
    let out = isospec(
        tmp.path(),
        &["spectrum", "--config", "cfg.json", "--out", "run"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(tmp.path().join("run/spectrum.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "index,eigenvalue,group");
    assert_eq!(rows.len(), 6);
    let first: Vec<&str> = rows[1].split(',').collect();
    assert_eq!(first[0], "0");
    assert!(first[1].parse::<f64>().unwrap().abs() < 1e-10);
    let groups: Vec<&str> = rows[2..]
        .iter()
        .map(|r| r.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(groups, ["1"; 4]);
    let manifest = read_json(&tmp.path().join("run/manifest.json"));
    assert_eq!(manifest["experiment"], "spectrum");
    assert_eq!(manifest["schema_version"], 1);
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert!(manifest["versions"]["isospec-core"].is_string());
}

#[test]
fn zero_perturbation_has_zero_corrections() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"surface": {"kind": "torus", "nx": 8, "ny": 8}, "perturbation": {"f1": "0"}, "solver": {"n_modes": 10}}"#,
    )
    .unwrap();
    let out = isospec(
        tmp.path(),
        &["corrections", "--config", "cfg.json", "--out", "run"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = read_json(&tmp.path().join("run/corrections.json"));
    let modes = v["modes"].as_array().unwrap();
    assert_eq!(modes.len(), 10);
    for m in modes {
        assert_eq!(m["lambda1"].as_f64().unwrap(), 0.0);
        assert_eq!(m["lambda2"].as_f64().unwrap(), 0.0);
    }
    assert!(tmp.path().join("run/corrections.csv").is_file());
}

#[test]
fn nonpositive_blend_names_the_node() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"surface": {"kind": "torus", "nx": 8, "ny": 8}, "convexity": {"c1": "1", "c2": "cos(2*pi*x)"}, "solver": {"n_modes": 5}}"#,
    )
    .unwrap();
    let out = isospec(
        tmp.path(),
        &["convexity", "--config", "cfg.json", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(3));
    let record = error_record(&out);
    assert_eq!(record["error"]["kind"], "numerical");
    assert!(record["error"]["node"].is_u64());
    assert!(record["error"]["message"]
        .as_str()
        .unwrap()
        .contains("node"));
    assert_eq!(read_json(&tmp.path().join("run/error.json")), record);
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"solver": {"n_modes": 5, "extra": 1}}"#,
        r#"{"surface": {"kind": "mesh", "path": "missing.off"}}"#,
        r#"{"solver": {"tol_deg": 0.5}}"#,
        r#"{"solver": {"n_modes": 1000}}"#,
        r#"{"perturbation": {"f1": "exp(x)"}}"#,
        r#"{"experiment": "weyl"}"#,
        "not json",
    ];
    for (k, cfg) in cases.iter().enumerate() {
        let name = format!("cfg{k}.json");
        fs::write(tmp.path().join(&name), cfg).unwrap();
        let out = isospec(
            tmp.path(),
            &["corrections", "--config", &name, "--out", "run"],
        );
        assert_eq!(out.status.code(), Some(2), "case {cfg}");
        assert_eq!(error_record(&out)["error"]["kind"], "config", "case {cfg}");
    }
    let out = isospec(tmp.path(), &["weyl", "--modes", "10", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn manifest_config_reproduces_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("cfg.json"),
        r#"{"surface": {"kind": "torus", "nx": 8, "ny": 8}, "perturbation": {"f1": {"random": {"amplitude": 0.5}}}, "sweep": {"t_grid": [0.001, 0.01]}}"#,
    )
    .unwrap();
    let out = isospec(
        tmp.path(),
        &[
            "corrections",
            "--config",
            "cfg.json",
            "--out",
            "a",
            "--seed",
            "17",
            "--modes",
            "12",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let manifest = read_json(&tmp.path().join("a/manifest.json"));
    assert_eq!(manifest["seed"], 17);
    let mut config = manifest["config"].clone();
    config["output"]["dir"] = "b".into();
    fs::write(tmp.path().join("echo.json"), config.to_string()).unwrap();
    let out = isospec(tmp.path(), &["corrections", "--config", "echo.json"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in manifest["artifacts"].as_array().unwrap() {
        let name = name.as_str().unwrap();
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn writes_stay_in_the_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = isospec(
        tmp.path(),
        &["metric-probe", "--out", "only/here", "--modes", "6"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let top: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(top, ["only"]);
    let mut files: Vec<_> = fs::read_dir(tmp.path().join("only/here"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(
        files,
        ["manifest.json", "metric_probe.csv", "metric_probe.json"]
    );
    let csv = fs::read_to_string(tmp.path().join("only/here/metric_probe.csv")).unwrap();
    assert!(csv.contains("tau_or_t,mode,eigenvalue,deviation"));
}

#[test]
fn mesh_experiments_run_from_a_relative_path() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("cfg")).unwrap();
    fs::copy(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/icosphere2.off"),
        tmp.path().join("cfg/sphere.off"),
    )
    .unwrap();
    fs::write(
        tmp.path().join("cfg/run.json"),
        r#"{"surface": {"kind": "mesh", "path": "sphere.off"}, "solver": {"n_modes": 9}, "obstruction": {"basis_dim": 9}}"#,
    )
    .unwrap();
    let out = isospec(
        tmp.path(),
        &["obstruction", "--config", "cfg/run.json", "--out", "o"],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = read_json(&tmp.path().join("o/obstruction.json"));
    assert_eq!(v["field_dim"], 9);
    assert_eq!(v["kernel_dims_by_n_modes"].as_array().unwrap().len(), 9);
    let out = isospec(
        tmp.path(),
        &[
            "weyl",
            "--config",
            "cfg/run.json",
            "--out",
            "w",
            "--modes",
            "100",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = read_json(&tmp.path().join("w/weyl.json"));
    assert!((v["true_area"].as_f64().unwrap() - 4.0 * std::f64::consts::PI).abs() < 0.5);
}

#[test]
fn obstruction_on_the_default_torus() {
    let tmp = tempfile::tempdir().unwrap();
    let out = isospec(tmp.path(), &["obstruction", "--out", "o"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = read_json(&tmp.path().join("o/obstruction.json"));
    assert_eq!(v["kernel_dim"], 0);
    assert_eq!(v["schema_version"], 1);
}

#[test]
fn selftest_is_deterministic_and_catches_a_bad_solver() {
    let tmp = tempfile::tempdir().unwrap();
    let first = isospec(tmp.path(), &["selftest"]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stdout)
    );
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert_eq!(
        stdout.lines().filter(|l| l.starts_with("[PASS]")).count(),
        10
    );
    let second = isospec(tmp.path(), &["selftest"]);
    assert_eq!(first.stdout, second.stdout);

    let faulty = isospec(tmp.path(), &["selftest", "--inject-fault"]);
    assert!(!faulty.status.success());
    assert!(String::from_utf8_lossy(&faulty.stdout).contains("[FAIL]"));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}
