//! Ensemble Hamiltonian at one time node and its maximization over the box.

use nalgebra::DVector;

use crate::control::{ControlSet, CostWeights};
use crate::ensemble::{expectation, EnsembleBatch};
use crate::error::{Error, Result};
use crate::grid::{AdjointPath, StatePath};
use crate::models::DynamicsModel;

/// Per-member data entering `H` at one node.
#[derive(Debug, Clone)]
pub struct MemberSample {
    pub x: DVector<f64>,
    pub p: DVector<f64>,
    pub input: DVector<f64>,
    pub target: DVector<f64>,
}

/// Everything `H(t_i, .)` depends on besides `u`.
#[derive(Debug, Clone)]
pub struct HamiltonianContext<'a> {
    model: &'a dyn DynamicsModel,
    node: usize,
    t: f64,
    members: Vec<MemberSample>,
    weights: CostWeights,
}

impl<'a> HamiltonianContext<'a> {
    pub fn new(
        model: &'a dyn DynamicsModel,
        node: usize,
        t: f64,
        members: Vec<MemberSample>,
        weights: CostWeights,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("context needs at least one member".into()));
        }
        let dims = model.dims();
        for s in &members {
            if s.x.len() != dims.state || s.p.len() != dims.state {
                return Err(Error::DimensionMismatch {
                    what: "context state/adjoint",
                    expected: dims.state,
                    got: s.x.len().max(s.p.len()),
                });
            }
            if s.input.len() != dims.input || s.target.len() != dims.output {
                return Err(Error::DimensionMismatch {
                    what: "context input/target",
                    expected: dims.input,
                    got: s.input.len(),
                });
            }
            if s.x.iter().chain(s.p.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite context entry at node {node}")));
            }
        }
        Ok(Self {
            model,
            node,
            t,
            members,
            weights,
        })
    }

    /// Context at node `i` from per-member solves.
    pub fn from_solution(
        model: &'a dyn DynamicsModel,
        batch: &EnsembleBatch,
        xs: &[StatePath],
        ps: &[AdjointPath],
        node: usize,
        weights: CostWeights,
    ) -> Result<Self> {
        let members = batch
            .members()
            .iter()
            .zip(xs.iter().zip(ps))
            .map(|(m, (x, p))| MemberSample {
                x: x.at_node(node).clone(),
                p: p.at_node(node).clone(),
                input: m.input.at_node(node).clone(),
                target: m.target[2 * node].clone(),
            })
            .collect();
        Self::new(model, node, batch.grid().node(node), members, weights)
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn members(&self) -> &[MemberSample] {
        &self.members
    }

    pub fn weights(&self) -> CostWeights {
        self.weights
    }

    pub fn model(&self) -> &dyn DynamicsModel {
        self.model
    }

    /// `H(u) = E[p.(A x + B) - alpha |C x - F|^2] - beta |u|^2`.
    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        let c = self.model.readout();
        let alpha = self.weights.alpha();
        let per_member: Vec<f64> = self
            .members
            .iter()
            .map(|s| {
                let drift = self.model.a(self.t, &s.input, u) * &s.x + self.model.b(self.t, &s.input, u);
                s.p.dot(&drift) - alpha * (c * &s.x - &s.target).norm_squared()
            })
            .collect();
        expectation(&per_member) - self.weights.beta() * u.norm_squared()
    }

    /// `grad_u H(u) = E[p.(D_u A x + D_u B)] - 2 beta u`.
    pub fn grad(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(u.len());
        for s in &self.members {
            acc += self.model.pairing_gradient(self.t, &s.input, u, &s.x, &s.p);
        }
        acc / self.members.len() as f64 - u * (2.0 * self.weights.beta())
    }

    /// `v^T grad_u^2 H(u) v = E[p.(D_u^2 A[v,v] x + D_u^2 B[v,v])] - 2 beta |v|^2`.
    pub fn hess_quadform(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let per_member: Vec<f64> = self
            .members
            .iter()
            .map(|s| {
                let curv = self.model.d2a(self.t, &s.input, u, v) * &s.x + self.model.d2b(self.t, &s.input, u, v);
                s.p.dot(&curv)
            })
            .collect();
        expectation(&per_member) - 2.0 * self.weights.beta() * v.norm_squared()
    }
}

pub fn hamiltonian_eval(ctx: &HamiltonianContext<'_>, u: &DVector<f64>) -> f64 {
    ctx.eval(u)
}

pub fn hamiltonian_grad_u(ctx: &HamiltonianContext<'_>, u: &DVector<f64>) -> DVector<f64> {
    ctx.grad(u)
}

pub fn hamiltonian_hess_quadform(ctx: &HamiltonianContext<'_>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    ctx.hess_quadform(u, v)
}

/// Stopping parameters of the inner ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerConfig {
    pub tol_u: f64,
    pub max_inner: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            tol_u: 1e-10,
            max_inner: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maximizer {
    pub u: DVector<f64>,
    /// Last fixed-point residual `|u - Proj(u + s grad H)|`.
    pub residual: f64,
    pub iterations: usize,
}

/// Projected gradient ascent with constant step `step` (normally `1/L_H`),
/// warm-started from `warm`. Fails with `InnerNotConverged` when
/// `max_inner` steps leave the residual above `tol_u`.
pub fn maximize_hamiltonian(
    ctx: &HamiltonianContext<'_>,
    warm: &DVector<f64>,
    set: &ControlSet,
    cfg: InnerConfig,
    step: f64,
) -> Result<Maximizer> {
    let best = projected_ascent(ctx, warm, set, cfg, step)?;
    if best.residual <= cfg.tol_u {
        Ok(best)
    } else {
        Err(Error::InnerNotConverged {
            node: ctx.node,
            residual: best.residual,
            iterations: best.iterations,
        })
    }
}

/// Same iteration as [`maximize_hamiltonian`], but returns the last iterate
/// when the budget runs out. Callers judge convergence from `residual`.
pub fn projected_ascent(
    ctx: &HamiltonianContext<'_>,
    warm: &DVector<f64>,
    set: &ControlSet,
    cfg: InnerConfig,
    step: f64,
) -> Result<Maximizer> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidParameter(format!("ascent step must be > 0, got {step}")));
    }
    let mut u = set.project(warm);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_inner {
        let next = set.project(&(&u + ctx.grad(&u) * step));
        residual = (&next - &u).norm();
        u = next;
        iterations += 1;
        if residual <= cfg.tol_u {
            break;
        }
    }
    Ok(Maximizer {
        u,
        residual,
        iterations,
    })
}
