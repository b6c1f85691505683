//! The four subcommands and their run-directory outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use enscontrol::{
    baseline_gd_run, bounds_audit, concavity_margin_sampled, fd_gradient_check, hessian_definiteness_sampled, interior_smooth_control,
    msa_run, random_smooth_directions, remainder_order_ratio, sample_inputs, variational_fd_check,
    write_convergence_csv, write_trajectories_csv, CheckResult, ControlTrajectory, Error, InputSignal, MsaOutput,
    Outcome,
};
use log::info;

use crate::config::{Instance, RunConfig};

pub const EXIT_OK: i32 = 0;
/// Config, I/O or solver errors.
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DESCENT_VIOLATED: i32 = 2;
pub const EXIT_INNER_NOT_CONVERGED: i32 = 3;
/// `certify`: `beta <= beta0`.
pub const EXIT_NOT_CERTIFIED: i32 = 4;
/// `check`: at least one check outside its tolerance.
pub const EXIT_CHECK_FAILED: i32 = 5;

/// Strong-concavity slack.
pub const CONCAVITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Baseline,
    Certify,
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Baseline => "baseline",
            Command::Certify => "certify",
            Command::Check => "check",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    /// Test hook: scale the adjoint gradient before comparing it with finite differences.
    pub corrupt_gradient: bool,
}

/// Runs `cmd` and returns the process exit code.
pub fn run(cmd: Command, opts: &RunOptions) -> anyhow::Result<i32> {
    let cfg = RunConfig::load(&opts.config)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.workers {
        if n == 0 {
            bail!("--workers must be >= 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building the worker pool")?;
    pool.install(|| execute(cmd, &cfg, opts))
}

fn execute(cmd: Command, cfg: &RunConfig, opts: &RunOptions) -> anyhow::Result<i32> {
    let inst = Instance::build(cfg)?;
    let dir = match &opts.out {
        Some(d) => {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            d.clone()
        }
        None => fresh_run_dir(&cfg.output.dir, cmd.name())?,
    };
    info!("{} -> {}", cmd.name(), dir.display());
    info!(
        "beta = {} (beta0 = {}, alpha = {})",
        inst.weights.beta(),
        inst.report.constants.beta0,
        inst.weights.alpha()
    );
    fs::write(dir.join("config.resolved"), cfg.resolved_toml(inst.weights.beta())?)?;
    if cfg.output.ensemble {
        inst.batch.write_csv(create(&dir, "ensemble.csv")?)?;
    }
    match cmd {
        Command::Train | Command::Baseline => train(cmd, cfg, &inst, &dir),
        Command::Certify => certify(&inst, &dir),
        Command::Check => check(cfg, &inst, &dir, opts.corrupt_gradient),
    }
}

/// First unused `<parent>/<name>-NNN`.
fn fresh_run_dir(parent: &Path, name: &str) -> anyhow::Result<PathBuf> {
    for i in 0..10_000 {
        let d = parent.join(format!("{name}-{i:03}"));
        if !d.exists() {
            fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
            return Ok(d);
        }
    }
    bail!("no free run directory under {}", parent.display())
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let p = dir.join(name);
    Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
}

fn write_control(dir: &Path, u: &ControlTrajectory) -> anyhow::Result<()> {
    let mut w = create(dir, "control_final.csv")?;
    let header: Vec<String> = std::iter::once("node".to_string())
        .chain((1..=u.dim()).map(|k| format!("u{k}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, v) in u.nodes().iter().enumerate() {
        let row: Vec<String> = v.iter().map(f64::to_string).collect();
        writeln!(w, "{i},{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn run_training(cmd: Command, cfg: &RunConfig, inst: &Instance) -> anyhow::Result<MsaOutput> {
    let constants = &inst.report.constants;
    let out = match cmd {
        Command::Baseline => {
            let Some(eta) = cfg.msa.step_size else {
                bail!("msa.step_size is required for baseline");
            };
            baseline_gd_run(inst.model.as_ref(), &inst.msa, eta, &inst.batch, &inst.weights, &inst.set, constants)?
        }
        _ => msa_run(inst.model.as_ref(), &inst.msa, &inst.batch, &inst.weights, &inst.set, constants)?,
    };
    Ok(out)
}

fn outcome_exit(outcome: &Outcome) -> i32 {
    match outcome {
        Outcome::Converged | Outcome::IterationLimit => EXIT_OK,
        Outcome::Failed(Error::DescentViolated { .. }) => EXIT_DESCENT_VIOLATED,
        Outcome::Failed(Error::InnerNotConverged { .. }) => EXIT_INNER_NOT_CONVERGED,
        Outcome::Failed(_) => EXIT_ERROR,
    }
}

fn outcome_name(outcome: &Outcome) -> String {
    match outcome {
        Outcome::Converged => "converged".into(),
        Outcome::IterationLimit => "iteration_limit".into(),
        Outcome::Failed(e) => format!("failed({e})"),
    }
}

/// Run-level checks common to `train`, `baseline` and `check`.
fn run_checks(cfg: &RunConfig, inst: &Instance, out: &MsaOutput) -> Vec<CheckResult> {
    let (x_sup, p_sup) = out.state_adjoint_sup();
    let audit = bounds_audit(x_sup, p_sup, &inst.report.constants);
    let ratio = |v: f64, b: f64| if b > 0.0 { v / b } else if v > 0.0 { f64::INFINITY } else { 0.0 };
    let mut audit_check = CheckResult::at_most(
        "bounds_audit",
        ratio(x_sup, audit.m_x).max(ratio(p_sup, audit.m_p)),
        1.0,
    );
    audit_check.pass = audit.pass;
    vec![
        CheckResult::at_most("pmp_residual", out.final_pmp_residual, cfg.check.pmp_tol),
        audit_check,
    ]
}

fn run_summary(out: &MsaOutput) -> String {
    format!(
        "run.outcome = {}\nrun.iterations = {}\nrun.initial_cost = {}\nrun.final_cost = {}\nrun.final_pmp_residual = {}\n",
        outcome_name(&out.outcome),
        out.records.len(),
        out.initial_cost,
        out.final_cost,
        out.final_pmp_residual
    )
}

fn train(cmd: Command, cfg: &RunConfig, inst: &Instance, dir: &Path) -> anyhow::Result<i32> {
    let out = run_training(cmd, cfg, inst)?;
    write_convergence_csv(create(dir, "convergence.csv")?, &out.records)?;
    write_control(dir, &out.control)?;
    if cfg.output.trajectories {
        write_trajectories_csv(create(dir, "trajectories.csv")?, &inst.grid, &out.states, &out.adjoints)?;
    }
    let mut report = inst.report.clone();
    report.checks = run_checks(cfg, inst, &out);
    fs::write(dir.join("certificate.txt"), report.to_key_values() + &run_summary(&out))?;
    print!("{}", report.summary());
    println!(
        "{}: {} after {} iterations, J = {:.10e}, pmp residual = {:.3e}",
        cmd.name(),
        outcome_name(&out.outcome),
        out.records.len(),
        out.final_cost,
        out.final_pmp_residual
    );
    Ok(outcome_exit(&out.outcome))
}

fn certify(inst: &Instance, dir: &Path) -> anyhow::Result<i32> {
    let report = &inst.report;
    fs::write(dir.join("certificate.txt"), report.to_key_values())?;
    print!("{}", report.summary());
    Ok(if report.beta_exceeds_beta0 { EXIT_OK } else { EXIT_NOT_CERTIFIED })
}

fn check(cfg: &RunConfig, inst: &Instance, dir: &Path, corrupt_gradient: bool) -> anyhow::Result<i32> {
    let c = &cfg.check;
    let model = inst.model.as_ref();
    let k = &inst.report.constants;
    let out = run_training(Command::Train, cfg, inst)?;
    write_convergence_csv(create(dir, "convergence.csv")?, &out.records)?;
    write_control(dir, &out.control)?;
    let mut report = inst.report.clone();
    let mut checks = run_checks(cfg, inst, &out);
    if let Outcome::Failed(e) = &out.outcome {
        checks.push(CheckResult {
            name: "training".into(),
            value: 1.0,
            tolerance: 0.0,
            lower: None,
            pass: false,
        });
        log::error!("training failed: {e}");
    }
    let u = &out.control;

    let mut dirs = random_smooth_directions(model.dims().control, &inst.grid, c.directions, c.seed);
    let mut inputs: Vec<InputSignal> =
        sample_inputs(model.dims().input, &inst.grid, 2, 1.0, c.directions.max(1), c.seed.wrapping_add(1))?;
    if c.zero_direction {
        dirs.push(vec![nalgebra::DVector::zeros(model.dims().control); inst.grid.num_nodes()]);
        inputs.push(InputSignal::zeros(&inst.grid, model.dims().input));
    }
    // away from the optimum, where both sides of the comparison are not roundoff
    let probe = interior_smooth_control(&inst.set, &inst.grid, c.seed);
    let mut grad = fd_gradient_check(model, &probe, &inst.batch, &inst.weights, &dirs, c.eps_gradient)?;
    if corrupt_gradient {
        grad = grad.corrupted(2.0);
    }
    checks.push(CheckResult::at_most("fd_gradient", grad.max_rel_error(), c.gradient_tol));

    let coarse = variational_fd_check(model, &probe, &inst.batch, &inst.weights, &inputs, c.eps_variational)?;
    let fine = variational_fd_check(model, &probe, &inst.batch, &inst.weights, &inputs, 0.5 * c.eps_variational)?;
    checks.push(CheckResult::at_most("variational_state", coarse.state_rel, c.variational_tol));
    checks.push(CheckResult::at_most("variational_adjoint", coarse.adjoint_rel, c.variational_tol));
    let [lo, hi] = c.order_ratio;
    let (rs, rp) = remainder_order_ratio(&coarse, &fine);
    // None: the solution is affine in the input and both remainders are roundoff.
    for (name, r) in [("variational_order_state", rs), ("variational_order_adjoint", rp)] {
        match r {
            Some(r) => checks.push(CheckResult::within(name, r, lo, hi)),
            None => info!("{name}: remainders at roundoff level (affine in the input)"),
        }
    }

    let hess = hessian_definiteness_sampled(
        model,
        &inst.batch,
        u,
        &out.states,
        &out.adjoints,
        &inst.weights,
        c.hessian_per_node,
        c.seed,
    )?;
    report.hessian_negative_definite_sampled = Some(hess.pass);
    if report.alpha_exceeds_alpha_min && report.beta_exceeds_beta_min {
        // guaranteed only above both sufficiency thresholds
        let mut h = CheckResult::at_most("hessian_definite", hess.worst, 0.0);
        h.pass = hess.pass;
        checks.push(h);
    }
    if report.beta_exceeds_beta0 {
        let margin = concavity_margin_sampled(
            model,
            &inst.batch,
            u,
            &out.states,
            &out.adjoints,
            &inst.weights,
            k.lambda,
            c.concavity_samples,
            c.seed,
        )?;
        checks.push(CheckResult::at_most("strong_concavity", margin, CONCAVITY_SLACK));
    }

    report.checks = checks;
    fs::write(dir.join("certificate.txt"), report.to_key_values() + &run_summary(&out))?;
    print!("{}", report.summary());
    Ok(if report.all_checks_pass() { EXIT_OK } else { EXIT_CHECK_FAILED })
}
