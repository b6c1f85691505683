//! Successive approximations, the cost functional and a gradient baseline.

use std::io::Write;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::certify::Constants;
use crate::control::{ControlSet, ControlTrajectory, CostWeights};
use crate::dynamics::{backward_batch, forward_batch};
use crate::ensemble::{expectation, EnsembleBatch};
use crate::error::{Error, Result};
use crate::grid::{l2_norm_time, sup_norm_time, AdjointPath, StatePath};
use crate::hamiltonian::{maximize_hamiltonian, projected_ascent, HamiltonianContext, InnerConfig};
use crate::models::DynamicsModel;

#[derive(Debug, Clone, PartialEq)]
pub enum InitialControl {
    Zero,
    /// Independent uniform draws in the box at every node.
    Random(u64),
    Explicit(ControlTrajectory),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsaConfig {
    pub max_iters: usize,
    /// Stop once `|u^{k+1} - u^k|_sup` drops to this value.
    pub threshold_sup: f64,
    pub inner: InnerConfig,
    pub init: InitialControl,
    pub check_descent: bool,
    /// Keep every iterate's control in the output.
    pub record_trajectories: bool,
    /// Fill `wall_ms`; off by default so logs are reproducible byte for byte.
    pub timing: bool,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            threshold_sup: 1e-7,
            inner: InnerConfig::default(),
            init: InitialControl::Zero,
            check_descent: true,
            record_trajectories: false,
            timing: false,
        }
    }
}

/// Metrics of outer iteration `k`, all measured at `u^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub cost: f64,
    pub delta_u_l2: f64,
    pub delta_u_sup: f64,
    /// `max_i [H^k(t_i, u^{k+1}(t_i)) - H^k(t_i, u^k(t_i))]`.
    pub pmp_residual: f64,
    pub inner_residual_max: f64,
    pub x_sup: f64,
    pub p_sup: f64,
    pub wall_ms: f64,
    /// `J(u^{k+1})`; not part of the CSV log.
    pub cost_next: f64,
}

pub const CONVERGENCE_HEADER: [&str; 9] = [
    "iter",
    "J",
    "delta_u_l2",
    "delta_u_sup",
    "pmp_residual",
    "inner_residual_max",
    "x_sup",
    "p_sup",
    "wall_ms",
];

pub fn write_convergence_csv<W: Write>(out: W, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CONVERGENCE_HEADER)?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            r.cost.to_string(),
            r.delta_u_l2.to_string(),
            r.delta_u_sup.to_string(),
            r.pmp_residual.to_string(),
            r.inner_residual_max.to_string(),
            r.x_sup.to_string(),
            r.p_sup.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub enum Outcome {
    /// The sup-norm stopping threshold was met.
    Converged,
    IterationLimit,
    /// Stopped by an error; the output holds the last accepted iterate.
    Failed(Error),
}

#[derive(Debug)]
pub struct MsaOutput {
    pub records: Vec<IterationRecord>,
    pub control: ControlTrajectory,
    pub states: Vec<StatePath>,
    pub adjoints: Vec<AdjointPath>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Lower bound (with a warning) if the inner ascent ran out of steps.
    pub final_pmp_residual: f64,
    /// Every iterate `u^0, u^1, ...` when requested.
    pub history: Vec<ControlTrajectory>,
    pub outcome: Outcome,
}

impl MsaOutput {
    pub fn is_success(&self) -> bool {
        !matches!(self.outcome, Outcome::Failed(_))
    }

    /// Largest `|x|` and `|p|` over all iterations, members and samples.
    pub fn state_adjoint_sup(&self) -> (f64, f64) {
        let x = self.records.iter().map(|r| r.x_sup).fold(max_sup(&self.states), f64::max);
        let p = self.records.iter().map(|r| r.p_sup).fold(max_sup(&self.adjoints), f64::max);
        (x, p)
    }
}

fn max_sup(paths: &[crate::grid::SampledPath]) -> f64 {
    paths.iter().map(|p| p.sup_norm()).fold(0.0, f64::max)
}

/// `J` from already computed states: trapezoid in time of
/// `E[alpha |C x - F|^2] + beta |u|^2`.
pub fn cost_from_states(
    model: &dyn DynamicsModel,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    xs: &[StatePath],
    weights: &CostWeights,
) -> f64 {
    let grid = batch.grid();
    let c = model.readout();
    let integrand: Vec<f64> = (0..grid.num_nodes())
        .map(|i| {
            let fit: Vec<f64> = batch
                .members()
                .iter()
                .zip(xs)
                .map(|(m, x)| (c * x.at_node(i) - &m.target[2 * i]).norm_squared())
                .collect();
            weights.alpha() * expectation(&fit) + weights.beta() * u.at_node(i).norm_squared()
        })
        .collect();
    grid.integrate(&integrand)
}

/// `J(u) = int E[alpha |C x - F(w)|^2 + beta |u|^2] dt`.
pub fn cost_eval(
    model: &dyn DynamicsModel,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    weights: &CostWeights,
) -> Result<f64> {
    let xs = forward_batch(model, u, batch)?;
    Ok(cost_from_states(model, u, batch, &xs, weights))
}

/// Result of maximizing `H^k` at every node.
struct NodeUpdate {
    u_next: ControlTrajectory,
    /// `H(u*) - H(u_i)` per node, clamped at zero.
    gains: Vec<f64>,
    inner_residual_max: f64,
}

/// With `strict`, an unconverged node is an error; otherwise the last ascent
/// iterate is kept and the gain is only a lower bound (see `inner_residual_max`).
#[allow(clippy::too_many_arguments)]
fn maximize_all_nodes(
    model: &dyn DynamicsModel,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    xs: &[StatePath],
    ps: &[AdjointPath],
    weights: &CostWeights,
    set: &ControlSet,
    inner: InnerConfig,
    step: f64,
    strict: bool,
) -> Result<NodeUpdate> {
    let grid = batch.grid();
    let per_node: Vec<(DVector<f64>, f64, f64)> = (0..grid.num_nodes())
        .into_par_iter()
        .map(|i| {
            let ctx = HamiltonianContext::from_solution(model, batch, xs, ps, i, *weights)?;
            let current = u.at_node(i);
            let best = if strict {
                maximize_hamiltonian(&ctx, current, set, inner, step)?
            } else {
                projected_ascent(&ctx, current, set, inner, step)?
            };
            let gain = (ctx.eval(&best.u) - ctx.eval(current)).max(0.0);
            Ok((best.u, gain, best.residual))
        })
        .collect::<Result<_>>()?;
    let inner_residual_max = per_node.iter().map(|n| n.2).fold(0.0, f64::max);
    let gains = per_node.iter().map(|n| n.1).collect();
    let values = per_node.into_iter().map(|n| n.0).collect();
    Ok(NodeUpdate {
        u_next: ControlTrajectory::new(values, grid)?,
        gains,
        inner_residual_max,
    })
}

/// `max_i [max_{v in U} H(t_i, v) - H(t_i, u(t_i))]` for the solves `(xs, ps)` of `u`.
#[allow(clippy::too_many_arguments)]
pub fn pmp_residual(
    model: &dyn DynamicsModel,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    xs: &[StatePath],
    ps: &[AdjointPath],
    weights: &CostWeights,
    set: &ControlSet,
    inner: InnerConfig,
    step: f64,
) -> Result<f64> {
    let upd = maximize_all_nodes(model, u, batch, xs, ps, weights, set, inner, step, true)?;
    Ok(upd.gains.into_iter().fold(0.0, f64::max))
}

/// Diagnostic residual for run logs: never fails on an unconverged inner
/// solve, only warns that the value is then a lower bound.
#[allow(clippy::too_many_arguments)]
fn pmp_residual_best_effort(
    model: &dyn DynamicsModel,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    xs: &[StatePath],
    ps: &[AdjointPath],
    weights: &CostWeights,
    set: &ControlSet,
    inner: InnerConfig,
    step: f64,
) -> Result<f64> {
    let upd = maximize_all_nodes(model, u, batch, xs, ps, weights, set, inner, step, false)?;
    if upd.inner_residual_max > inner.tol_u {
        warn!(
            "pmp residual is a lower bound: inner ascent stopped at residual {:.3e} (tol_u = {:.1e})",
            upd.inner_residual_max, inner.tol_u
        );
    }
    Ok(upd.gains.into_iter().fold(0.0, f64::max))
}

fn initial_control(init: &InitialControl, dim: usize, set: &ControlSet, batch: &EnsembleBatch) -> Result<ControlTrajectory> {
    let grid = batch.grid();
    let u = match init {
        InitialControl::Zero => ControlTrajectory::zeros(dim, grid),
        InitialControl::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            ControlTrajectory::random_in(set, grid, &mut rng)
        }
        InitialControl::Explicit(u) => u.clone(),
    };
    if u.dim() != dim || u.num_nodes() != grid.num_nodes() {
        return Err(Error::DimensionMismatch {
            what: "initial control",
            expected: dim,
            got: u.dim(),
        });
    }
    if !u.is_within(set) {
        return Err(Error::InvalidParameter("initial control leaves the control set".into()));
    }
    Ok(u)
}

fn check_setup(model: &dyn DynamicsModel, set: &ControlSet, batch: &EnsembleBatch, max_iters: usize) -> Result<()> {
    let dims = model.dims();
    if set.dim() != dims.control {
        return Err(Error::DimensionMismatch {
            what: "control set dimension",
            expected: dims.control,
            got: set.dim(),
        });
    }
    if batch.input_dim() != dims.input || batch.output_dim() != dims.output {
        return Err(Error::DimensionMismatch {
            what: "ensemble input/output dimension",
            expected: dims.input,
            got: batch.input_dim(),
        });
    }
    if max_iters == 0 {
        return Err(Error::InvalidParameter("at least one outer iteration is required".into()));
    }
    Ok(())
}

fn sup_over(paths: &[crate::grid::SampledPath]) -> f64 {
    max_sup(paths)
}

/// Slack used in every descent inequality.
pub fn descent_slack(cost: f64) -> f64 {
    1e-8 * (1.0 + cost.abs())
}

/// Runs successive approximations: forward solve, backward solve, nodewise
/// maximization of the Hamiltonian, repeat.
///
/// The inner ascent uses step `1 / L_H`. When `check_descent` is set and
/// `beta > beta0` (i.e. `constants.c > 0`), each step must satisfy
/// `J(u^{k+1}) - J(u^k) <= -c |du|_{L2}^2 + eps`; a violation ends the run
/// with [`Outcome::Failed`].
pub fn msa_run(
    model: &dyn DynamicsModel,
    cfg: &MsaConfig,
    batch: &EnsembleBatch,
    weights: &CostWeights,
    set: &ControlSet,
    constants: &Constants,
) -> Result<MsaOutput> {
    check_setup(model, set, batch, cfg.max_iters)?;
    let grid = batch.grid();
    let step = 1.0 / constants.l_h;
    let enforce = cfg.check_descent && constants.c > 0.0;
    if cfg.check_descent && !enforce {
        warn!("beta does not exceed beta0; descent is monitored but not enforced");
    }

    let mut u = initial_control(&cfg.init, model.dims().control, set, batch)?;
    let mut xs = forward_batch(model, &u, batch)?;
    let mut cost = cost_from_states(model, &u, batch, &xs, weights);
    let initial_cost = cost;
    let mut records = Vec::new();
    let mut history = Vec::new();
    if cfg.record_trajectories {
        history.push(u.clone());
    }
    let mut outcome = Outcome::IterationLimit;

    for k in 0..cfg.max_iters {
        let started = Instant::now();
        let ps = match backward_batch(model, &u, batch, &xs, weights) {
            Ok(ps) => ps,
            Err(e) => {
                outcome = Outcome::Failed(e);
                break;
            }
        };
        let upd = match maximize_all_nodes(model, &u, batch, &xs, &ps, weights, set, cfg.inner, step, true) {
            Ok(upd) => upd,
            Err(e) => {
                outcome = Outcome::Failed(e);
                break;
            }
        };
        let delta = upd.u_next.difference(&u);
        let delta_u_l2 = l2_norm_time(&delta, grid);
        let delta_u_sup = sup_norm_time(&delta);
        let xs_next = match forward_batch(model, &upd.u_next, batch) {
            Ok(xs) => xs,
            Err(e) => {
                outcome = Outcome::Failed(e);
                break;
            }
        };
        let cost_next = cost_from_states(model, &upd.u_next, batch, &xs_next, weights);
        let record = IterationRecord {
            k,
            cost,
            delta_u_l2,
            delta_u_sup,
            pmp_residual: upd.gains.iter().copied().fold(0.0, f64::max),
            inner_residual_max: upd.inner_residual_max,
            x_sup: sup_over(&xs),
            p_sup: sup_over(&ps),
            wall_ms: if cfg.timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            cost_next,
        };
        debug!(
            "iter {k}: J = {cost:.10e}, |du|_L2 = {delta_u_l2:.3e}, |du|_sup = {delta_u_sup:.3e}, pmp = {:.3e}",
            record.pmp_residual
        );
        records.push(record);

        if enforce {
            let lhs = cost_next - cost;
            let rhs = -constants.c * delta_u_l2 * delta_u_l2 + descent_slack(cost);
            if lhs > rhs {
                outcome = Outcome::Failed(Error::DescentViolated { k, lhs, rhs });
                break;
            }
        }
        u = upd.u_next;
        xs = xs_next;
        cost = cost_next;
        if cfg.record_trajectories {
            history.push(u.clone());
        }
        if delta_u_sup <= cfg.threshold_sup {
            outcome = Outcome::Converged;
            break;
        }
    }

    let adjoints = backward_batch(model, &u, batch, &xs, weights)?;
    let final_pmp_residual = pmp_residual_best_effort(model, &u, batch, &xs, &adjoints, weights, set, cfg.inner, step)?;
    info!(
        "successive approximations finished after {} iterations: J = {cost:.10e}, pmp residual = {final_pmp_residual:.3e}",
        records.len()
    );
    Ok(MsaOutput {
        records,
        control: u,
        states: xs,
        adjoints,
        initial_cost,
        final_cost: cost,
        final_pmp_residual,
        history,
        outcome,
    })
}

/// Projected gradient descent on `J` using the adjoint gradient
/// `dJ/du(t) = -grad_u H(t, u(t))`: `u <- Proj(u + eta grad_u H)` nodewise.
///
/// Logs the same metrics as [`msa_run`]; the residual columns are measured
/// with the same inner maximizer.
pub fn baseline_gd_run(
    model: &dyn DynamicsModel,
    cfg: &MsaConfig,
    eta: f64,
    batch: &EnsembleBatch,
    weights: &CostWeights,
    set: &ControlSet,
    constants: &Constants,
) -> Result<MsaOutput> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidParameter(format!("step size must be >= 0, got {eta}")));
    }
    check_setup(model, set, batch, cfg.max_iters)?;
    let grid = batch.grid();
    let step = 1.0 / constants.l_h;
    let mut u = initial_control(&cfg.init, model.dims().control, set, batch)?;
    let mut xs = forward_batch(model, &u, batch)?;
    let mut cost = cost_from_states(model, &u, batch, &xs, weights);
    let initial_cost = cost;
    let mut records = Vec::new();
    let mut history = Vec::new();
    if cfg.record_trajectories {
        history.push(u.clone());
    }
    let mut outcome = Outcome::IterationLimit;

    for k in 0..cfg.max_iters {
        let started = Instant::now();
        let step_result = (|| -> Result<_> {
            let ps = backward_batch(model, &u, batch, &xs, weights)?;
            // diagnostic only: the update below does not use the maximizer
            let residual = maximize_all_nodes(model, &u, batch, &xs, &ps, weights, set, cfg.inner, step, false)?;
            let next: Vec<DVector<f64>> = (0..grid.num_nodes())
                .into_par_iter()
                .map(|i| {
                    let ctx = HamiltonianContext::from_solution(model, batch, &xs, &ps, i, *weights)?;
                    let ui = u.at_node(i);
                    Ok(set.project(&(ui + ctx.grad(ui) * eta)))
                })
                .collect::<Result<_>>()?;
            let u_next = ControlTrajectory::new(next, grid)?;
            let xs_next = forward_batch(model, &u_next, batch)?;
            Ok((ps, residual, u_next, xs_next))
        })();
        let (ps, residual, u_next, xs_next) = match step_result {
            Ok(v) => v,
            Err(e) => {
                outcome = Outcome::Failed(e);
                break;
            }
        };
        let delta = u_next.difference(&u);
        let cost_next = cost_from_states(model, &u_next, batch, &xs_next, weights);
        let delta_u_sup = sup_norm_time(&delta);
        records.push(IterationRecord {
            k,
            cost,
            delta_u_l2: l2_norm_time(&delta, grid),
            delta_u_sup,
            pmp_residual: residual.gains.iter().copied().fold(0.0, f64::max),
            inner_residual_max: residual.inner_residual_max,
            x_sup: sup_over(&xs),
            p_sup: sup_over(&ps),
            wall_ms: if cfg.timing { started.elapsed().as_secs_f64() * 1e3 } else { 0.0 },
            cost_next,
        });
        u = u_next;
        xs = xs_next;
        cost = cost_next;
        if cfg.record_trajectories {
            history.push(u.clone());
        }
        if delta_u_sup <= cfg.threshold_sup {
            outcome = Outcome::Converged;
            break;
        }
    }

    let adjoints = backward_batch(model, &u, batch, &xs, weights)?;
    let final_pmp_residual = pmp_residual_best_effort(model, &u, batch, &xs, &adjoints, weights, set, cfg.inner, step)?;
    Ok(MsaOutput {
        records,
        control: u,
        states: xs,
        adjoints,
        initial_cost,
        final_cost: cost,
        final_pmp_residual,
        history,
        outcome,
    })
}

/// One outer step from `u`: returns `(x^k, p^k, u^{k+1}, record)`.
pub fn msa_step(
    model: &dyn DynamicsModel,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    weights: &CostWeights,
    set: &ControlSet,
    inner: InnerConfig,
    step: f64,
) -> Result<(Vec<StatePath>, Vec<AdjointPath>, ControlTrajectory, IterationRecord)> {
    let grid = batch.grid();
    let xs = forward_batch(model, u, batch)?;
    let cost = cost_from_states(model, u, batch, &xs, weights);
    let ps = backward_batch(model, u, batch, &xs, weights)?;
    let upd = maximize_all_nodes(model, u, batch, &xs, &ps, weights, set, inner, step, true)?;
    let delta = upd.u_next.difference(u);
    let cost_next = cost_eval(model, &upd.u_next, batch, weights)?;
    let record = IterationRecord {
        k: 0,
        cost,
        delta_u_l2: l2_norm_time(&delta, grid),
        delta_u_sup: sup_norm_time(&delta),
        pmp_residual: upd.gains.iter().copied().fold(0.0, f64::max),
        inner_residual_max: upd.inner_residual_max,
        x_sup: sup_over(&xs),
        p_sup: sup_over(&ps),
        wall_ms: 0.0,
        cost_next,
    };
    Ok((xs, ps, upd.u_next, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::compute_constants;
    use crate::ensemble::{build_targets, sample_inputs, InputSignal, TargetMap};
    use crate::grid::TimeGrid;
    use crate::linalg::spectral_norm;
    use crate::models::{declare_or_estimate_bounds, AffineModel, BoundsDomain, LinearSsm};
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn constants_for(model: &dyn DynamicsModel, batch: &EnsembleBatch, set: &ControlSet, w: &CostWeights) -> Constants {
        let dom = BoundsDomain::from_batch(model, batch, set);
        let b = declare_or_estimate_bounds(model, &dom, 10, 1.5, 0).unwrap();
        compute_constants(&b, batch.grid().horizon(), w, spectral_norm(model.readout()))
    }

    fn linear_setup(alpha: f64) -> (LinearSsm, EnsembleBatch, ControlSet) {
        let g = TimeGrid::new(1.0, 40).unwrap();
        let model = LinearSsm::new(2, 1, DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        let inputs = sample_inputs(1, &g, 1, 0.3, 3, 1).unwrap();
        let batch = build_targets(TargetMap::PointwiseLinear(DMatrix::from_element(2, 1, 0.5)), inputs, &g).unwrap();
        let _ = alpha;
        (model, batch, ControlSet::uniform(6, -1.0, 1.0).unwrap())
    }

    #[test]
    fn zero_everything_has_zero_cost() {
        let (model, batch, _) = linear_setup(1.0);
        let g = *batch.grid();
        let zero_batch = build_targets(
            TargetMap::PointwiseLinear(DMatrix::zeros(2, 1)),
            vec![InputSignal::zeros(&g, 1)],
            &g,
        )
        .unwrap();
        let w = CostWeights::new(1.0, 1.0).unwrap();
        assert_eq!(cost_eval(&model, &ControlTrajectory::zeros(6, &g), &zero_batch, &w).unwrap(), 0.0);
    }

    #[test]
    fn constant_control_penalty() {
        let (model, batch, _) = linear_setup(0.0);
        let g = batch.grid();
        let c = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.25]);
        let w = CostWeights::new(0.0, 1.7).unwrap();
        let j = cost_eval(&model, &ControlTrajectory::constant(c.clone(), g), &batch, &w).unwrap();
        let exact = 1.7 * g.horizon() * c.norm_squared();
        assert!((j - exact).abs() <= 1e-10 * exact);
    }

    #[test]
    fn teacher_self_consistency_leaves_only_penalty() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let model = Arc::new(LinearSsm::new(2, 2, DMatrix::identity(2, 2), DVector::zeros(2)).unwrap());
        let set = ControlSet::uniform(8, -1.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let teacher_u = ControlTrajectory::random_in(&set, &g, &mut rng);
        let inputs = sample_inputs(2, &g, 2, 0.4, 4, 2).unwrap();
        let map = TargetMap::Teacher {
            model: model.clone(),
            control: teacher_u.clone(),
        };
        let batch = build_targets(map, inputs, &g).unwrap();
        let w = CostWeights::new(2.0, 0.3).unwrap();
        let j = cost_eval(model.as_ref(), &teacher_u, &batch, &w).unwrap();
        let l2 = teacher_u.l2_norm(&g);
        let exact = 0.3 * l2 * l2;
        assert!((j - exact).abs() <= 1e-10 * exact);
    }

    #[test]
    fn pure_penalty_step_goes_to_zero() {
        let (model, batch, set) = linear_setup(0.0);
        let w = CostWeights::new(0.0, 0.5).unwrap();
        let k = constants_for(&model, &batch, &set, &w);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u0 = ControlTrajectory::random_in(&set, batch.grid(), &mut rng);
        let (_, ps, u1, _) = msa_step(&model, &u0, &batch, &w, &set, InnerConfig::default(), 1.0 / k.l_h).unwrap();
        assert!(ps.iter().all(|p| p.sup_norm() == 0.0));
        assert!(u1.sup_norm() < 1e-9);
        let xs = forward_batch(&model, &u1, &batch).unwrap();
        let ps = backward_batch(&model, &u1, &batch, &xs, &w).unwrap();
        let zero = ControlTrajectory::zeros(6, batch.grid());
        let r = pmp_residual(&model, &zero, &batch, &xs, &ps, &w, &set, InnerConfig::default(), 1.0 / k.l_h).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let (model, batch, set) = linear_setup(1.0);
        let w = CostWeights::new(1.0, 2.0).unwrap();
        let k = constants_for(&model, &batch, &set, &w);
        let cfg = MsaConfig {
            max_iters: 200,
            threshold_sup: 1e-11,
            ..MsaConfig::default()
        };
        let out = msa_run(&model, &cfg, &batch, &w, &set, &k).unwrap();
        assert!(matches!(out.outcome, Outcome::Converged), "{:?}", out.outcome);
        let (_, _, u_next, rec) =
            msa_step(&model, &out.control, &batch, &w, &set, cfg.inner, 1.0 / k.l_h).unwrap();
        assert!(rec.delta_u_sup <= 10.0 * cfg.inner.tol_u, "{}", rec.delta_u_sup);
        assert!(u_next.is_within(&set));
        assert!(out.final_pmp_residual <= 1e-8);
    }

    #[test]
    fn huge_threshold_gives_single_record() {
        let (model, batch, set) = linear_setup(1.0);
        let w = CostWeights::new(1.0, 2.0).unwrap();
        let k = constants_for(&model, &batch, &set, &w);
        let cfg = MsaConfig {
            max_iters: 50,
            threshold_sup: f64::INFINITY,
            ..MsaConfig::default()
        };
        let out = msa_run(&model, &cfg, &batch, &w, &set, &k).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].k, 0);
    }

    #[test]
    fn descent_and_summability_hold_with_large_beta() {
        let (model, batch, set) = linear_setup(1.0);
        let w0 = CostWeights::new(1.0, 1.0).unwrap();
        let b0 = constants_for(&model, &batch, &set, &w0).beta0;
        let w = CostWeights::new(1.0, 2.0 * b0.max(0.1)).unwrap();
        let k = constants_for(&model, &batch, &set, &w);
        assert!(k.c > 0.0);
        let cfg = MsaConfig {
            max_iters: 30,
            threshold_sup: 0.0,
            init: InitialControl::Random(3),
            ..MsaConfig::default()
        };
        let out = msa_run(&model, &cfg, &batch, &w, &set, &k).unwrap();
        assert!(out.is_success(), "{:?}", out.outcome);
        let mut sum = 0.0;
        for r in &out.records {
            assert!(r.cost_next - r.cost <= -k.c * r.delta_u_l2.powi(2) + descent_slack(r.cost));
            sum += r.delta_u_l2.powi(2);
        }
        assert!(sum <= out.initial_cost / k.c + 30.0 * descent_slack(out.initial_cost));
    }

    #[test]
    fn baseline_with_zero_step_keeps_cost() {
        let (model, batch, set) = linear_setup(1.0);
        let w = CostWeights::new(1.0, 1.0).unwrap();
        let k = constants_for(&model, &batch, &set, &w);
        let cfg = MsaConfig {
            max_iters: 4,
            threshold_sup: -1.0,
            init: InitialControl::Random(1),
            ..MsaConfig::default()
        };
        let out = baseline_gd_run(&model, &cfg, 0.0, &batch, &w, &set, &k).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.records.iter().all(|r| r.cost == out.records[0].cost));
    }

    // one inner step cannot reach tol_u = 1e-14 from a random start
    fn starved_inner() -> MsaConfig {
        MsaConfig {
            max_iters: 3,
            threshold_sup: -1.0,
            init: InitialControl::Random(1),
            inner: InnerConfig {
                tol_u: 1e-14,
                max_inner: 1,
            },
            ..MsaConfig::default()
        }
    }

    #[test]
    fn baseline_survives_unconverged_residual_diagnostic() {
        let (model, batch, set) = linear_setup(1.0);
        let w = CostWeights::new(1.0, 1.0).unwrap();
        let k = constants_for(&model, &batch, &set, &w);
        let out = baseline_gd_run(&model, &starved_inner(), 0.1, &batch, &w, &set, &k).unwrap();
        assert!(matches!(out.outcome, Outcome::IterationLimit), "{:?}", out.outcome);
        assert_eq!(out.records.len(), 3);
        assert!(out.records.iter().all(|r| r.inner_residual_max > 1e-14));
        assert!(out.final_pmp_residual.is_finite());
    }

    #[test]
    fn msa_keeps_records_when_inner_solve_fails() {
        let (model, batch, set) = linear_setup(1.0);
        let w = CostWeights::new(1.0, 1.0).unwrap();
        let k = constants_for(&model, &batch, &set, &w);
        let out = msa_run(&model, &starved_inner(), &batch, &w, &set, &k).unwrap();
        assert!(matches!(out.outcome, Outcome::Failed(Error::InnerNotConverged { .. })), "{:?}", out.outcome);
        assert!(out.records.is_empty());
        assert_eq!(out.final_cost, out.initial_cost);
    }

    #[test]
    fn baseline_decays_pure_penalty_geometrically() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let model = AffineModel::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
        )
        .unwrap();
        let batch = build_targets(
            TargetMap::PointwiseLinear(DMatrix::from_element(1, 1, 0.5)),
            vec![InputSignal::constant(&g, DVector::from_element(1, 1.0))],
            &g,
        )
        .unwrap();
        let set = ControlSet::uniform(1, -10.0, 10.0).unwrap();
        let (beta, eta) = (0.5, 0.1);
        let w = CostWeights::new(0.0, beta).unwrap();
        let k = constants_for(&model, &batch, &set, &w);
        let c0 = 3.0;
        let cfg = MsaConfig {
            max_iters: 5,
            threshold_sup: -1.0,
            init: InitialControl::Explicit(ControlTrajectory::constant(DVector::from_element(1, c0), &g)),
            record_trajectories: true,
            ..MsaConfig::default()
        };
        let out = baseline_gd_run(&model, &cfg, eta, &batch, &w, &set, &k).unwrap();
        for (n, u) in out.history.iter().enumerate() {
            let expected = c0 * (1.0 - 2.0 * beta * eta).powi(n as i32);
            assert!(u.nodes().iter().all(|v| (v[0] - expected).abs() < 1e-12));
        }
        assert!(baseline_gd_run(&model, &cfg, -1.0, &batch, &w, &set, &k).is_err());
    }

    #[test]
    fn convergence_log_layout() {
        let rec = IterationRecord {
            k: 3,
            cost: 1.5,
            delta_u_l2: 0.25,
            delta_u_sup: 0.5,
            pmp_residual: 1e-9,
            inner_residual_max: 0.0,
            x_sup: 2.0,
            p_sup: 0.125,
            wall_ms: 0.0,
            cost_next: 1.0,
        };
        let mut buf = Vec::new();
        write_convergence_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,J,delta_u_l2,delta_u_sup,pmp_residual,inner_residual_max,x_sup,p_sup,wall_ms\n3,1.5,0.25,0.5,0.000000001,0,2,0.125,0\n"
        );
    }
}
