//! End-to-end tests of the command-line interface: row counts, column
//! contracts, exit codes, manifests, and byte-identical reruns.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fastslow"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fastslow-cli-tests");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("failed to launch binary")
}

#[test]
fn simulate_homog_row_count_and_manifest() {
    let out = tmp("homog.csv");
    let res = run(&[
        "simulate", "--model", "builtin:test", "--pipeline", "homog",
        "--eps", "0.125", "--dt", "0.03", "--T", "1",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    // T/dt + 1 rows with dt adjusted to divide T: ceil(1/0.03) = 34 steps.
    assert_eq!(lines.len(), 36, "header + 35 rows");
    assert_eq!(lines[0], "t,y1,y2,p1,p2,phi01,phi02");
    // 17 significant digits.
    assert!(lines[1].starts_with("0.0000000000000000e0,1.0000000000000000e0"));

    let manifest = std::fs::read_to_string(format!("{}.manifest.json", out.display())).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["model"], "builtin:test");
    assert!(v["determinism"].as_str().unwrap().contains("deterministic"));
    assert!(v["version"].is_string());
}

#[test]
fn simulate_is_byte_identical_across_reruns() {
    let (a, b) = (tmp("rerun_a.csv"), tmp("rerun_b.csv"));
    for out in [&a, &b] {
        let res = run(&[
            "simulate", "--model", "builtin:test", "--pipeline", "full",
            "--eps", "0.125", "--dt", "0.001", "--T", "0.25",
            "--out", out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn simulate_full_column_contract_and_coarse_step_warning() {
    let out = tmp("full.csv");
    let res = run(&[
        "simulate", "--model", "builtin:test", "--pipeline", "full",
        "--eps", "0.125", "--dt", "0.2", "--T", "1",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "dt > eps must warn, not fail");
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(
        stderr.contains("under-resolves fast phase"),
        "missing warning, stderr: {stderr}"
    );
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("t,y1,y2,p1,p2,z1,z2,zdot1,zdot2"));
}

#[test]
fn simulate_second_writes_reconstructed_columns() {
    let out = tmp("second.csv");
    let res = run(&[
        "simulate", "--model", "builtin:test", "--pipeline", "second",
        "--eps", "0.125", "--dt", "0.01", "--T", "1",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "t,y1,y2,p1,p2,phi01,phi02,ybar21,ybar22,pbar21,pbar22,phibar21,phibar22,y_recon1,y_recon2"
    );
}

#[test]
fn config_errors_exit_2() {
    let res = run(&[
        "simulate", "--model", "/no/such/model.json", "--pipeline", "homog",
        "--dt", "0.01", "--T", "1", "--out", tmp("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));

    // Missing --eps for the stiff pipeline is a config error too.
    let res = run(&[
        "simulate", "--model", "builtin:test", "--pipeline", "full",
        "--dt", "0.01", "--T", "1", "--out", tmp("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn model_config_file_round_trips() {
    let path = tmp("model.json");
    std::fs::write(
        &path,
        r#"{
            "name": "from-file",
            "n": 2, "r": 2,
            "V": "0.5*y1^4 + 0.5*y2^4",
            "omega": ["4 + (y1*y2)^2", "2 + sin(y1)"],
            "y_star": [1.0, -0.5],
            "p_star": [1.0, 1.2],
            "u_star": [3.0, 2.0],
            "T": 1.0
        }"#,
    )
    .unwrap();
    let out_file = tmp("from_file.csv");
    let out_builtin = tmp("from_builtin.csv");
    for (model, out) in [(path.to_str().unwrap(), &out_file), ("builtin:test", &out_builtin)] {
        let res = run(&[
            "simulate", "--model", model, "--pipeline", "homog",
            "--dt", "0.01", "--T", "1", "--out", out.to_str().unwrap(),
        ]);
        assert!(res.status.success());
    }
    assert_eq!(
        std::fs::read(&out_file).unwrap(),
        std::fs::read(&out_builtin).unwrap(),
        "file config must reproduce the builtin model"
    );
}

#[test]
fn sweep_reports_two_slopes() {
    let out = tmp("sweep.json");
    let res = run(&[
        "sweep", "--model", "builtin:test", "--eps", "0.125,0.0625,0.03125",
        "--T", "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let lead = v["slope_leading"].as_f64().unwrap();
    let second = v["slope_second"].as_f64().unwrap();
    assert!(lead > 1.0 && lead < 3.0, "leading slope {lead}");
    assert!(second > lead, "second slope {second} not steeper than {lead}");
}

#[test]
fn stepsize_reports_dt_max_in_grid() {
    let out = tmp("stepsize.json");
    let res = run(&[
        "stepsize", "--model", "builtin:test", "--eps", "0.125",
        "--pipeline", "slow", "--criterion", "leading",
        "--T", "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "stderr: {}", String::from_utf8_lossy(&res.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let dt_max = v["dt_max"].as_f64().unwrap();
    let dts: Vec<f64> = v["dts"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(dts.contains(&dt_max), "dt_max {dt_max} not in grid");
}

#[test]
fn bench_counts_steps() {
    let out = tmp("bench.json");
    let res = run(&[
        "bench", "--model", "builtin:test", "--eps", "0.125", "--T", "1",
        "--dt-full", "0.001", "--dt-slow", "0.01", "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["steps_full"], 1000);
    assert_eq!(v["steps_slow"], 100);
}

#[test]
fn thermo_emits_observable_columns() {
    let out = tmp("thermo.csv");
    let res = run(&[
        "thermo", "--model", "builtin:test", "--pipeline", "homog",
        "--dt", "0.01", "--T", "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("e0_perp") && header.contains("s0") && header.contains("f0_1"));
    // Leading-order temperature at t=0 is 3.25.
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    let t0_idx = header.split(',').position(|c| c == "t0").unwrap();
    let t0: f64 = first[t0_idx].parse().unwrap();
    assert!((t0 - 3.25).abs() < 1e-12);
}

#[test]
fn check_passes_on_reference_model() {
    let res = run(&["check", "--model", "builtin:test", "--T", "1"]);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(res.status.code(), Some(0), "stdout: {stdout}");
    assert!(stdout.contains("all checks passed"));
}
