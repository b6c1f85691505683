//! Forward state, backward adjoint and first-order variational solves.
//!
//! All solves use classical fixed-step RK4 with step `h = T/N`. Stage times
//! are nodes and half-nodes only, so every coefficient, input, stored state
//! and target is read at an exact lattice point. Half-node values of the
//! solution come from the third-order continuous extension of each step.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::control::{ControlTrajectory, CostWeights};
use crate::ensemble::{EnsembleBatch, InputSignal};
use crate::error::{Error, Result};
use crate::grid::{AdjointPath, SampledPath, StatePath, TimeGrid};
use crate::models::DynamicsModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Direction {
    Forward,
    Backward,
}

/// One RK4 sweep over the refined lattice. `rhs(j, y)` evaluates the vector
/// field at sample `j`. Returns `Err(time)` at the first non-finite value.
pub(crate) fn rk4_sweep<F>(
    y_start: DVector<f64>,
    grid: &TimeGrid,
    direction: Direction,
    rhs: F,
) -> std::result::Result<Vec<DVector<f64>>, f64>
where
    F: Fn(usize, &DVector<f64>) -> DVector<f64>,
{
    let n = grid.steps();
    let mut out = vec![DVector::zeros(y_start.len()); grid.num_samples()];
    let (h, end) = match direction {
        Direction::Forward => (grid.spacing(), 0),
        Direction::Backward => (-grid.spacing(), 2 * n),
    };
    if y_start.iter().any(|v| !v.is_finite()) {
        return Err(grid.sample_time(end));
    }
    out[end] = y_start;
    for step in 0..n {
        let (j0, j1) = match direction {
            Direction::Forward => (2 * step, 2 * step + 2),
            Direction::Backward => (2 * (n - step), 2 * (n - step) - 2),
        };
        let jm = (j0 + j1) / 2;
        let y = &out[j0];
        let k1 = rhs(j0, y);
        let k2 = rhs(jm, &(y + &k1 * (0.5 * h)));
        let k3 = rhs(jm, &(y + &k2 * (0.5 * h)));
        let k4 = rhs(j1, &(y + &k3 * h));
        let mid = y + (&k1 * (5.0 / 24.0) + (&k2 + &k3) * (1.0 / 6.0) - &k4 * (1.0 / 24.0)) * h;
        let next = y + (&k1 + (&k2 + &k3) * 2.0 + &k4) * (h / 6.0);
        if next.iter().chain(mid.iter()).any(|v| !v.is_finite()) {
            return Err(grid.sample_time(j1));
        }
        out[jm] = mid;
        out[j1] = next;
    }
    Ok(out)
}

/// `A` and `B` at every lattice point.
fn coefficients<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    input: &InputSignal,
    grid: &TimeGrid,
) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    (0..grid.num_samples())
        .map(|j| {
            let (t, xi, uj) = (grid.sample_time(j), input.at_sample(j), u.at_sample(j));
            (model.a(t, xi, &uj), model.b(t, xi, &uj))
        })
        .collect()
}

fn check_shapes<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    input: &InputSignal,
    grid: &TimeGrid,
) -> Result<()> {
    let dims = model.dims();
    if u.dim() != dims.control {
        return Err(Error::DimensionMismatch {
            what: "control dimension",
            expected: dims.control,
            got: u.dim(),
        });
    }
    if u.num_nodes() != grid.num_nodes() {
        return Err(Error::DimensionMismatch {
            what: "control node count",
            expected: grid.num_nodes(),
            got: u.num_nodes(),
        });
    }
    if input.dim() != dims.input || input.samples().len() != grid.num_samples() {
        return Err(Error::DimensionMismatch {
            what: "input samples",
            expected: dims.input,
            got: input.dim(),
        });
    }
    Ok(())
}

pub(crate) fn forward_member<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    input: &InputSignal,
    grid: &TimeGrid,
    member: usize,
) -> Result<StatePath> {
    check_shapes(model, u, input, grid)?;
    let coeffs = coefficients(model, u, input, grid);
    let x0 = model.initial_state(input);
    let values = rk4_sweep(x0, grid, Direction::Forward, |j, x| &coeffs[j].0 * x + &coeffs[j].1)
        .map_err(|time| Error::NonFiniteState { member, time })?;
    SampledPath::new(values, grid)
}

/// State `x(t, w)` under control `u`, at nodes and half-nodes.
pub fn forward_solve<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    input: &InputSignal,
    grid: &TimeGrid,
) -> Result<StatePath> {
    forward_member(model, u, input, grid, 0)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_member<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    input: &InputSignal,
    x: &StatePath,
    target: &[DVector<f64>],
    weights: &CostWeights,
    grid: &TimeGrid,
    member: usize,
) -> Result<AdjointPath> {
    check_shapes(model, u, input, grid)?;
    if target.len() != grid.num_samples() || x.samples().len() != grid.num_samples() {
        return Err(Error::DimensionMismatch {
            what: "stored state / target samples",
            expected: grid.num_samples(),
            got: target.len().min(x.samples().len()),
        });
    }
    let c = model.readout();
    let two_alpha = 2.0 * weights.alpha();
    let ats: Vec<DMatrix<f64>> = (0..grid.num_samples())
        .map(|j| {
            let (t, xi, uj) = (grid.sample_time(j), input.at_sample(j), u.at_sample(j));
            model.a(t, xi, &uj).transpose()
        })
        .collect();
    let forcing: Vec<DVector<f64>> = (0..grid.num_samples())
        .map(|j| c.tr_mul(&(c * x.at_sample(j) - &target[j])) * two_alpha)
        .collect();
    let values = rk4_sweep(
        DVector::zeros(model.dims().state),
        grid,
        Direction::Backward,
        |j, p| -(&ats[j] * p) + &forcing[j],
    )
    .map_err(|time| Error::NonFiniteAdjoint { member, time })?;
    SampledPath::new(values, grid)
}

/// Adjoint `dp/dt = -A^T p + 2 alpha C^T (C x - F(w))`, `p(T) = 0`.
pub fn backward_solve<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    input: &InputSignal,
    x: &StatePath,
    target: &[DVector<f64>],
    weights: &CostWeights,
    grid: &TimeGrid,
) -> Result<AdjointPath> {
    backward_member(model, u, input, x, target, weights, grid, 0)
}

/// Input sensitivity of the state: `dz/dt = A z + (d_w A[h]) x + d_w B[h]`,
/// `z(0) = d x0(w)[h]`.
pub fn variational_solve_state<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    input: &InputSignal,
    x: &StatePath,
    h: &InputSignal,
    grid: &TimeGrid,
) -> Result<SampledPath> {
    check_shapes(model, u, input, grid)?;
    let terms: Vec<(DMatrix<f64>, DVector<f64>)> = (0..grid.num_samples())
        .map(|j| {
            let (t, xi, uj, hj) = (grid.sample_time(j), input.at_sample(j), u.at_sample(j), h.at_sample(j));
            let a = model.a(t, xi, &uj);
            let forcing = model.da_input(t, xi, &uj, hj) * x.at_sample(j) + model.db_input(t, xi, &uj, hj);
            (a, forcing)
        })
        .collect();
    let z0 = model.initial_state_derivative(input, h);
    let values = rk4_sweep(z0, grid, Direction::Forward, |j, z| &terms[j].0 * z + &terms[j].1)
        .map_err(|time| Error::NonFiniteVariational { time })?;
    SampledPath::new(values, grid)
}

/// Input sensitivity of the adjoint:
/// `dz/dt = -A^T z - (d_w A[h])^T p + 2 alpha C^T (C z_x - dF(w)[h])`, `z(T) = 0`.
#[allow(clippy::too_many_arguments)]
pub fn variational_solve_adjoint<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    input: &InputSignal,
    p: &AdjointPath,
    z_state: &SampledPath,
    h: &InputSignal,
    target_derivative: &[DVector<f64>],
    weights: &CostWeights,
    grid: &TimeGrid,
) -> Result<SampledPath> {
    check_shapes(model, u, input, grid)?;
    let c = model.readout();
    let two_alpha = 2.0 * weights.alpha();
    let terms: Vec<(DMatrix<f64>, DVector<f64>)> = (0..grid.num_samples())
        .map(|j| {
            let (t, xi, uj, hj) = (grid.sample_time(j), input.at_sample(j), u.at_sample(j), h.at_sample(j));
            let at = model.a(t, xi, &uj).transpose();
            let forcing = -(model.da_input(t, xi, &uj, hj).tr_mul(p.at_sample(j)))
                + c.tr_mul(&(c * z_state.at_sample(j) - &target_derivative[j])) * two_alpha;
            (at, forcing)
        })
        .collect();
    let values = rk4_sweep(
        DVector::zeros(model.dims().state),
        grid,
        Direction::Backward,
        |j, z| -(&terms[j].0 * z) + &terms[j].1,
    )
    .map_err(|time| Error::NonFiniteVariational { time })?;
    SampledPath::new(values, grid)
}

/// Forward solves for every member, in parallel, returned in member order.
pub fn forward_batch<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
) -> Result<Vec<StatePath>> {
    batch
        .members()
        .par_iter()
        .enumerate()
        .map(|(k, m)| forward_member(model, u, &m.input, batch.grid(), k))
        .collect()
}

/// Backward solves for every member, in parallel, returned in member order.
pub fn backward_batch<M: DynamicsModel + ?Sized>(
    model: &M,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    xs: &[StatePath],
    weights: &CostWeights,
) -> Result<Vec<AdjointPath>> {
    batch
        .members()
        .par_iter()
        .zip(xs.par_iter())
        .enumerate()
        .map(|(k, (m, x))| backward_member(model, u, &m.input, x, &m.target, weights, batch.grid(), k))
        .collect()
}

/// Writes `member,t,x_1..x_n,p_1..p_n` at every lattice point.
pub fn write_trajectories_csv<W: Write>(
    out: W,
    grid: &TimeGrid,
    xs: &[StatePath],
    ps: &[AdjointPath],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = xs.first().map_or(0, |x| x.dim());
    let mut header = vec!["member".to_string(), "t".to_string()];
    header.extend((1..=n).map(|k| format!("x{k}")));
    header.extend((1..=n).map(|k| format!("p{k}")));
    w.write_record(&header)?;
    for (k, (x, p)) in xs.iter().zip(ps).enumerate() {
        for (j, t) in grid.sample_times().enumerate() {
            let mut row = vec![k.to_string(), t.to_string()];
            row.extend(x.at_sample(j).iter().map(f64::to_string));
            row.extend(p.at_sample(j).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
