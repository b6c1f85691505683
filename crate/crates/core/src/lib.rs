//! Training state-space models as an ensemble optimal-control problem.
//!
//! A shared control `u(t)` (the model parameters, allowed to vary in time)
//! drives `dx/dt = A(t, w; u) x + B(t, w; u)` for every input `w` of a finite
//! ensemble. The cost
//!
//! ```text
//! J(u) = int_0^T E_w[ alpha |C x(t, w) - F(w)(t)|^2 + beta |u(t)|^2 ] dt
//! ```
//!
//! is minimized by successive approximations: solve the states forward, the
//! adjoints `dp/dt = -A^T p + 2 alpha C^T (C x - F)` backward from `p(T) = 0`,
//! then maximize the ensemble Hamiltonian nodewise over the control box.
//! When `beta` exceeds an explicit threshold `beta0`, every step decreases
//! `J`; [`certify`] computes that threshold and the related constants.
//!
//! ```no_run
//! use enscontrol::*;
//! # fn main() -> Result<()> {
//! let grid = TimeGrid::new(1.0, 200)?;
//! let model = ModelSpec::SelectiveS6 {
//!     state: 4, input: 2, state_per_channel: 2, delta: 1.0,
//!     readout: Readout::Identity, x0: None,
//! }.build()?;
//! let set = ControlSet::uniform(14, -1.0, 1.0)?;
//! let inputs = sample_inputs(2, &grid, 2, 0.1, 16, 7)?;
//! let batch = build_targets(TargetMap::MovingAverage { window: 0.2 }, inputs, &grid)?;
//! let domain = BoundsDomain::from_batch(model.as_ref(), &batch, &set);
//! let bounds = declare_or_estimate_bounds(model.as_ref(), &domain, 200, 1.5, 0)?;
//! let alpha = 0.5;
//! let c_norm = spectral_norm(model.readout());
//! let weights = CostWeights::new(alpha, 1.5 * beta0(&bounds, 1.0, alpha, c_norm))?;
//! let constants = compute_constants(&bounds, 1.0, &weights, c_norm);
//! let out = msa_run(model.as_ref(), &MsaConfig::default(), &batch, &weights, &set, &constants)?;
//! println!("J = {}", out.final_cost);
//! # Ok(()) }
//! ```

pub mod certify;
pub mod control;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod hamiltonian;
pub mod linalg;
pub mod models;
pub mod msa;

pub use certify::{
    beta0, bounds_audit, compute_constants, concavity_margin_sampled, fd_gradient_check, interior_smooth_control, hessian_definiteness_sampled,
    random_smooth_directions, remainder_order_ratio, sufficiency_thresholds, variational_fd_check, BoundsAudit,
    CertificateReport, CheckResult, Constants, GradientCheck, HessianSample, Thresholds, VariationalCheck,
};
pub use control::{project_onto_control_set, ControlSet, ControlTrajectory, CostWeights};
pub use dynamics::{
    backward_batch, backward_solve, forward_batch, forward_solve, variational_solve_adjoint, variational_solve_state,
    write_trajectories_csv,
};
pub use ensemble::{build_targets, expectation, sample_inputs, EnsembleBatch, InputSignal, Member, TargetMap};
pub use error::{Error, Result};
pub use grid::{l2_norm_time, sup_norm_time, AdjointPath, SampledPath, StatePath, TimeGrid};
pub use hamiltonian::{
    hamiltonian_eval, hamiltonian_grad_u, hamiltonian_hess_quadform, maximize_hamiltonian, projected_ascent, HamiltonianContext,
    InnerConfig, Maximizer, MemberSample,
};
pub use linalg::{min_singular_value, spectral_norm};
pub use models::{
    declare_or_estimate_bounds, estimate_bounds_sampled, fd_derivative_fallback, make_model, BoundsDomain,
    BoundsSource, Dims, DynamicsModel, ModelBounds, ModelSpec, Readout,
};
pub use msa::{
    baseline_gd_run, cost_eval, cost_from_states, descent_slack, msa_run, msa_step, pmp_residual,
    write_convergence_csv, InitialControl, IterationRecord, MsaConfig, MsaOutput, Outcome,
};
