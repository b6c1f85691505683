use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use enscontrol_cli::commands::{EXIT_CHECK_FAILED, EXIT_INNER_NOT_CONVERGED, EXIT_NOT_CERTIFIED};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enscontrol"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn key_values(path: &Path) -> HashMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn num(kv: &HashMap<String, String>, key: &str) -> f64 {
    kv.get(key).unwrap_or_else(|| panic!("missing {key}")).parse().unwrap()
}

/// Writes the shipped config with `edit` applied.
fn variant(dir: &Path, base: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(shipped(base)).unwrap();
    let p = dir.join(format!("variant-{base}"));
    std::fs::write(&p, edit(text)).unwrap();
    p
}

fn column(csv: &Path, name: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(csv).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn train_scalar_lq_writes_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run("train", &shipped("scalar_lq.toml"), &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.resolved", "convergence.csv", "control_final.csv", "certificate.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let kv = key_values(&out.join("certificate.txt"));
    assert!(num(&kv, "run.final_pmp_residual") <= 1e-6);
    // auto:2 resolves to twice beta0
    assert_eq!(num(&kv, "beta"), 2.0 * num(&kv, "beta0"));
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains(&format!("beta = {}", num(&kv, "beta"))), "{resolved}");
    let header = std::fs::read_to_string(out.join("control_final.csv")).unwrap();
    assert!(header.starts_with("node,u1\n0,"));
    assert_eq!(header.lines().count(), 202);
}

#[test]
fn zero_beta_is_rejected_at_parse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "scalar_lq.toml", |t| t.replace("beta = \"auto:2\"", "beta = 0.0"));
    let o = run("train", &cfg, &tmp.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("beta must be > 0"));
}

#[test]
fn parse_errors_name_line_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "scalar_lq.toml", |t| t.replace("steps = 200", "steps = \"many\""));
    let o = run("certify", &cfg, &tmp.path().join("run"), &[]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(1));
    assert!(err.contains("line") && err.contains("steps"), "{err}");
}

#[test]
fn baseline_matches_train_on_scalar_lq() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("train");
    let b = tmp.path().join("baseline");
    assert!(run("train", &shipped("scalar_lq.toml"), &a, &[]).status.success());
    assert!(run("baseline", &shipped("scalar_lq.toml"), &b, &[]).status.success());
    let ja = num(&key_values(&a.join("certificate.txt")), "run.final_cost");
    let jb = num(&key_values(&b.join("certificate.txt")), "run.final_cost");
    assert!((ja - jb).abs() <= 1e-3 * ja.abs(), "{ja} vs {jb}");
    // same log schema
    let head = |d: &Path| std::fs::read_to_string(d.join("convergence.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(head(&a), head(&b));
}

#[test]
fn baseline_with_zero_step_keeps_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "scalar_lq.toml", |t| {
        t.replace("step_size = 0.05", "step_size = 0.0")
            .replace("max_iters = 200", "max_iters = 5")
            .replace("init = \"zero\"", "init = \"random\"")
            .replace("threshold_sup = 1e-10", "threshold_sup = -1.0")
    });
    let out = tmp.path().join("run");
    assert!(run("baseline", &cfg, &out, &[]).status.success());
    let j = column(&out.join("convergence.csv"), "J");
    assert_eq!(j.len(), 5);
    assert!(j.iter().all(|v| *v == j[0]));
}

#[test]
fn baseline_without_step_size_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "scalar_lq.toml", |t| t.replace("step_size = 0.05\n", ""));
    let o = run("baseline", &cfg, &tmp.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step_size"));
}

#[test]
fn certify_with_zero_alpha_passes_for_any_beta() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "s6_toy.toml", |t| {
        t.replace("alpha = 0.5", "alpha = 0.0").replace("beta = \"auto:1.5\"", "beta = 1e-6")
    });
    let out = tmp.path().join("run");
    let o = run("certify", &cfg, &out, &[]);
    assert!(o.status.success());
    let kv = key_values(&out.join("certificate.txt"));
    assert_eq!(num(&kv, "beta0"), 0.0);
    assert_eq!(num(&kv, "M_P"), 0.0);
}

#[test]
fn certify_exits_nonzero_below_beta0() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "s6_toy.toml", |t| t.replace("beta = \"auto:1.5\"", "beta = 1.0"));
    let o = run("certify", &cfg, &tmp.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(EXIT_NOT_CERTIFIED));
}

#[test]
fn certify_hand_evaluable_instance() {
    // scalar linear model frozen at u = 0 with zero input: M_A = G_B = 0,
    // G_A = 1, M_X = x0 = 1, M_P = 2 alpha T |C| M_X = 1 -> C_X = 1, C_E = 0.75
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hand.toml");
    std::fs::write(
        &cfg,
        r#"
[model]
kind = "linear"
state = 1
input = 1
x0 = [1.0]

[grid]
horizon = 1.0
steps = 10

[ensemble]
constant_input = [0.0]
target = { kind = "linear", matrix = [[0.0]] }

[weights]
alpha = 0.5
beta = 1.0

[control_set]
lower = 0.0
upper = 0.0
"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    let o = run("certify", &cfg, &out, &[]);
    assert!(o.status.success());
    let kv = key_values(&out.join("certificate.txt"));
    assert_eq!(num(&kv, "C_X"), 1.0);
    assert_eq!(num(&kv, "C_E"), 0.75);
    assert_eq!(num(&kv, "beta0"), 0.75);
    assert!(String::from_utf8_lossy(&o.stdout).contains("beta0 = 7.500000e-1"));
}

#[test]
fn sampled_bounds_are_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "s6_toy.toml", |t| t + "\n[bounds]\nmode = \"sampled\"\nsamples = 50\n");
    let out = tmp.path().join("run");
    run("certify", &cfg, &out, &[]);
    let kv = key_values(&out.join("certificate.txt"));
    assert_eq!(kv["bounds_sampled_not_certified"], "true");
    assert!(kv["bounds_source"].starts_with("sampled"));
}

#[test]
fn check_passes_on_linear_toy_with_zero_direction() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "linear_toy.toml", |t| t + "\n[check]\nzero_direction = true\n");
    let out = tmp.path().join("run");
    let o = run("check", &cfg, &out, &[]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    for name in ["fd_gradient", "variational_state", "variational_adjoint", "bounds_audit", "hessian_definite"] {
        assert!(stdout.contains(name), "{name} missing from\n{stdout}");
    }
}

#[test]
fn corrupted_gradient_fails_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run("check", &shipped("scalar_lq.toml"), &out, &["--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(EXIT_CHECK_FAILED));
    let kv = key_values(&out.join("certificate.txt"));
    assert_eq!(kv["check.fd_gradient.pass"], "false");
}

#[test]
fn optional_dumps_are_written_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "linear_toy.toml", |t| t + "\n[output]\ntrajectories = true\nensemble = true\n");
    let out = tmp.path().join("run");
    assert!(run("train", &cfg, &out, &[]).status.success());
    let traj = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    assert!(traj.starts_with("member,t,x1,x2,p1,p2\n"));
    // 8 members x 201 lattice points + header
    assert_eq!(traj.lines().count(), 8 * 201 + 1);
    assert!(out.join("ensemble.csv").exists());
}

#[test]
fn fresh_run_directories_do_not_collide() {
    let tmp = tempfile::tempdir().unwrap();
    let parent = tmp.path().join("runs");
    let cfg = variant(tmp.path(), "scalar_lq.toml", |t| {
        t + &format!("\n[output]\ndir = {:?}\n", parent.to_str().unwrap())
    });
    for _ in 0..2 {
        let o = Command::new(env!("CARGO_BIN_EXE_enscontrol"))
            .args(["certify", "--config"])
            .arg(&cfg)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(o.status.success());
    }
    assert!(parent.join("certify-000/certificate.txt").exists());
    assert!(parent.join("certify-001/certificate.txt").exists());
}

#[test]
fn inner_failure_exits_3_and_keeps_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "linear_toy.toml", |t| t.replace("init_seed = 5\n", "init_seed = 5\ntol_u = 1e-15\nmax_inner = 1\n"));
    let out = tmp.path().join("run");
    let o = run("train", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(EXIT_INNER_NOT_CONVERGED));
    for f in ["convergence.csv", "control_final.csv", "certificate.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let kv = key_values(&out.join("certificate.txt"));
    assert!(kv["run.outcome"].starts_with("failed(inner"));
    // the baseline only logs the residual, so the same budget is not fatal
    let b = tmp.path().join("baseline");
    let o = run("baseline", &cfg, &b, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lower bound"));
}
