use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[network]
width = 8
depth = 6
eps = 0.5
kappa = 2.0
rho = 0.3

[ensemble]
members = 300
checkpoints = 3

[flow.quadrature]
order = 64
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_resnet-eft"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_writes_a_run_directory() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let out = run(&["simulate", "--config", &cfg, "--out", "sim"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["estimates.csv", "sums.bin", "manifest.json"] {
        assert!(tmp.path().join("sim").join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(tmp.path().join("sim/estimates.csv")).unwrap();
    assert!(csv.starts_with("t,ell,component,estimate,std_error,estimator\n"), "{csv}");
}

#[test]
fn estimates_are_byte_identical_across_reruns_and_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "1", "4"].iter().enumerate() {
        let dir = format!("run{i}");
        let out = run(&["--threads", threads, "--seed", "17", "simulate", "--config", &cfg, "--out", &dir], tmp.path());
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let p = tmp.path().join(&dir);
        outputs.push((fs::read(p.join("estimates.csv")).unwrap(), fs::read(p.join("sums.bin")).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let out = run(&["--seed", "18", "simulate", "--config", &cfg, "--out", "other"], tmp.path());
    assert_eq!(code(&out), 0);
    assert_ne!(fs::read(tmp.path().join("other/sums.bin")).unwrap(), outputs[0].1);
}

#[test]
fn config_errors_exit_with_status_two() {
    let tmp = TempDir::new().unwrap();
    let empty = write(tmp.path(), "empty.toml", &TINY.replace("members = 300", "members = 0"));
    let out = run(&["simulate", "--config", &empty], tmp.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let typo = write(tmp.path(), "typo.toml", &TINY.replace("width = 8", "widht = 8"));
    let out = run(&["simulate", "--config", &typo], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("widht") && stderr(&out).contains("line"), "{}", stderr(&out));

    let no_kernel = write(tmp.path(), "nokernel.toml", "[network]\nwidth = 8\ndepth = 4\n");
    let out = run(&["flow", "--config", &no_kernel], tmp.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    let out = run(&["--threads", "0", "simulate", "--config", "tiny.toml"], tmp.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn continuous_flow_requires_unit_alpha() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "a.toml", &TINY.replace("eps = 0.5", "eps = 0.5\nalpha = 0.9"));
    let out = run(&["flow", "--config", &cfg, "--mode", "rk4"], tmp.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = run(&["flow", "--config", &cfg, "--mode", "ladder", "--out", "fl"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(tmp.path().join("fl/theory.csv").is_file());
}

#[test]
fn diagnose_reads_a_simulated_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    assert_eq!(code(&run(&["simulate", "--config", &cfg, "--out", "sim"], tmp.path())), 0);
    assert_eq!(code(&run(&["flow", "--config", &cfg, "--out", "fl"], tmp.path())), 0);
    let out = run(&["diagnose", "sim", "fl", "--out", "diag"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for id in 1..=8 {
        assert!(stdout.contains(&format!("criterion {id} ")), "{stdout}");
    }
    for f in ["residuals.csv", "table2.csv", "summary.json", "manifest.json"] {
        assert!(tmp.path().join("diag").join(f).is_file(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("diag/summary.json")).unwrap()).unwrap();
    assert!(summary["criteria"].as_array().unwrap().len() == 8);

    // strict mode turns any failed criterion into status 4
    let strict = run(&["diagnose", "sim", "--out", "diag2", "--strict"], tmp.path());
    let failed = stdout.contains(": FAIL");
    assert_eq!(code(&strict), if failed { 4 } else { 0 }, "{}", stderr(&strict));
}

#[test]
fn diagnose_rejects_a_flow_for_another_network() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let other = write(tmp.path(), "other.toml", &TINY.replace("width = 8", "width = 16"));
    assert_eq!(code(&run(&["simulate", "--config", &cfg, "--out", "sim"], tmp.path())), 0);
    assert_eq!(code(&run(&["flow", "--config", &other, "--out", "fl"], tmp.path())), 0);
    let out = run(&["diagnose", "sim", "fl"], tmp.path());
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn sweep_writes_points_and_a_summary() {
    let tmp = TempDir::new().unwrap();
    let text = format!("{TINY}\n[sweep]\naxis = \"n\"\nvalues = [4, 8]\n");
    let cfg = write(tmp.path(), "sw.toml", &text);
    let out = run(&["sweep", "--config", &cfg, "--out", "sw"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    assert!(csv.starts_with("value,t,ell,component,estimate,std_error,estimator\n"));
    assert!(tmp.path().join("sw/sweep_summary.json").is_file());
}

#[test]
fn reproduce_validates_its_arguments() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&run(&["reproduce", "fig9"], tmp.path())), 2);
    assert_eq!(code(&run(&["reproduce", "fig1", "--scale", "huge"], tmp.path())), 2);
}

#[test]
fn full_scale_reproduce_only_writes_configs() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["reproduce", "fig2", "--scale", "paper", "--out", "f2"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("warning"));
    let dir = tmp.path().join("f2");
    let mut names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["WARNING.txt", "fig2_eps0.05.toml", "fig2_eps0.07.toml", "fig2_eps0.10.toml", "manifest.json"]
    );
    let text = fs::read_to_string(dir.join("fig2_eps0.05.toml")).unwrap();
    assert!(text.contains("members = 5000000"), "{text}");
}

#[test]
fn reproduce_runs_a_small_table_from_a_config() {
    let tmp = TempDir::new().unwrap();
    let text = TINY.replace("depth = 6", "depth = 200").replace("eps = 0.5", "eps = 0.1");
    let text = text.replace("checkpoints = 3", "checkpoints = [0, 30, 50, 100, 150, 200]");
    let cfg = write(tmp.path(), "t2.toml", &text);
    let out = run(&["reproduce", "table2", "--config", &cfg, "--out", "t2"], tmp.path());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("t2/table2.csv")).unwrap();
    assert!(csv.starts_with("t,sigma_mic,sigma_mic_se,sigma_k0,rel_err,rel_err_se\n"), "{csv}");
    assert_eq!(csv.lines().count(), 6, "{csv}");
}
