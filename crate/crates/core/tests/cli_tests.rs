use std::path::Path;
use std::process::{Command, Output};

use kbandit::config::parse_config;

const MINIMAL: &str = r#"
horizon = 10
seeds = [1]
output_dir = "out"

[kernel]
type = "matern"
nu = 0.5
lengthscale = 0.2

[actions]
d = 1
n_per_axis = 2

[adversary]
type = "best-arm-gap"
B = 1.0
best = 0
gap = 0.4
seed = 1

[policy]
name = "kernel-exp"
tuning = "effdim"
"#;

fn kbandit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kbandit"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_run_writes_one_row_per_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    let o = kbandit(&["run", &cfg, "--dump-gram"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rounds = std::fs::read_to_string(dir.path().join("out/rounds.csv")).unwrap();
    assert_eq!(rounds.lines().count(), 11);
    assert!(rounds.starts_with(
        "seed,t,chosen,realized_loss,expected_instant_regret,cum_expected_regret,max_eta_proxy,q_entropy\n"
    ));
    assert!(dir.path().join("out/gram.csv").exists());
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.starts_with("T,mean_regret,stderr,exponent_partial\n10,"));
}

#[test]
fn out_of_range_gamma_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{MINIMAL}\n[policy.overrides]\ngamma = 1.5\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let o = kbandit(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"));
}

#[test]
fn missing_kernel_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "[kernel]\ntype = \"matern\"\nnu = 0.5\nlengthscale = 0.2\n",
        "",
    );
    let cfg = write_config(dir.path(), "c.toml", &text);
    let o = kbandit(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kernel"));
}

#[test]
fn unreadable_config_is_a_config_error() {
    assert_eq!(
        kbandit(&["run", "/nonexistent/c.toml"]).status.code(),
        Some(2)
    );
}

#[test]
fn sweep_on_zero_losses_reports_no_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "type = \"matern\"\nnu = 0.5\nlengthscale = 0.2",
        "type = \"finite-rank\"\neigenvalues = [0.0, 0.0]",
    );
    let text = text.replace("type = \"best-arm-gap\"", "type = \"random-rkhs\"");
    let text = text.replace("best = 0\ngap = 0.4\n", "");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let o = kbandit(&["sweep", &cfg, "--horizons", "100,200,400"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("exponent=NA"));
}

#[test]
fn two_point_sweep_exponent_is_the_log_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    let o = kbandit(&["sweep", &cfg, "--horizons", "50,100"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("out/sweep_summary.csv")).unwrap();
    let rows: Vec<Vec<String>> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    let r1: f64 = rows[0][1].parse().unwrap();
    let r2: f64 = rows[1][1].parse().unwrap();
    let exponent: f64 = rows[1][3].parse().unwrap();
    assert!((exponent - (r2 / r1).ln() / 2f64.ln()).abs() < 1e-12);
    assert_eq!(rows[0][3], "NA");
}

#[test]
fn one_point_sweep_has_no_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    let o = kbandit(&["sweep", &cfg, "--horizons", "50"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("exponent=NA"));
    assert!(stderr(&o).contains("WARN"));
}

#[test]
fn design_and_effdim_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    assert_eq!(
        kbandit(&["design", &cfg, "--rho", "0.1"]).status.code(),
        Some(0)
    );
    let design = std::fs::read_to_string(dir.path().join("out/design.csv")).unwrap();
    assert_eq!(design.lines().count(), 3);
    assert_eq!(
        kbandit(&["effdim", &cfg, "--rho", "0.01,0.1"])
            .status
            .code(),
        Some(0)
    );
    let eff = std::fs::read_to_string(dir.path().join("out/effdim.csv")).unwrap();
    assert_eq!(eff.lines().count(), 3);
    assert_eq!(
        kbandit(&["effdim", &cfg, "--rho", "-1"]).status.code(),
        Some(2)
    );
}

#[test]
fn verify_exit_codes() {
    assert_eq!(kbandit(&["verify", "--lemmas", ""]).status.code(), Some(2));
    assert_eq!(
        kbandit(&["verify", "--lemmas", "bogus"]).status.code(),
        Some(2)
    );
    let o = kbandit(&["verify", "--lemmas", "cond-mean", "--corrupt-resolvent"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("cond-mean"));
    let o = kbandit(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert_eq!(
        stdout(&o).lines().filter(|l| l.contains(": PASS")).count(),
        8
    );
}

#[test]
fn serialized_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = MINIMAL
        .replace("seeds = [1]", "seeds = [1, 2, 3]")
        .replace("horizon = 10", "horizon = 60");
    let cfg = write_config(dir.path(), "a.toml", &text);
    assert_eq!(kbandit(&["run", &cfg]).status.code(), Some(0));

    let mut parsed = parse_config(&text).unwrap();
    parsed.output_dir = "out_b".into();
    let cfg_b = write_config(dir.path(), "b.toml", &parsed.to_toml().unwrap());
    assert_eq!(kbandit(&["run", &cfg_b]).status.code(), Some(0));
    for f in ["rounds.csv", "summary.csv", "params.csv"] {
        let a = std::fs::read(dir.path().join("out").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("out_b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}
