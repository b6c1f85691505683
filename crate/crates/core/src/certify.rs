//! Explicit constants, sufficiency thresholds and finite-difference checks.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::control::{ControlSet, ControlTrajectory, CostWeights};
use crate::dynamics::{
    backward_member, forward_batch, backward_batch, forward_member, variational_solve_adjoint,
    variational_solve_state,
};
use crate::ensemble::{EnsembleBatch, InputSignal};
use crate::error::{Error, Result};
use crate::grid::{AdjointPath, SampledPath, StatePath, TimeGrid};
use crate::hamiltonian::HamiltonianContext;
use crate::linalg::{min_singular_value, spectral_norm};
use crate::models::{BoundsSource, DynamicsModel, ModelBounds};
use crate::msa::cost_eval;

/// Constants derived from the model bounds, the horizon and the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    /// State bound `(|x0| + T M_B) e^{T M_A}`.
    pub m_x: f64,
    /// Adjoint bound `2 alpha T |C| (|C| M_X + M_target) e^{T M_A}`.
    pub m_p: f64,
    /// Time-Lipschitz constants of `x` and `p`.
    pub l_x: f64,
    pub l_p: f64,
    pub c_x: f64,
    pub c_e: f64,
    /// Descent threshold for `beta`.
    pub beta0: f64,
    /// Strong-concavity modulus of `H` in `u`.
    pub lambda: f64,
    /// Guaranteed decrease rate `lambda/2 - C_E`.
    pub c: f64,
    /// Gradient Lipschitz constant of `H` in `u`.
    pub l_h: f64,
}

/// Curvature term `M_P (H_A M_X + H_B)` shared by several constants.
fn curvature(b: &ModelBounds, m_x: f64, m_p: f64) -> f64 {
    m_p * (b.h_a * m_x + b.h_b)
}

pub fn compute_constants(bounds: &ModelBounds, horizon: f64, weights: &CostWeights, c_norm: f64) -> Constants {
    let b = bounds;
    let t = horizon;
    let alpha = weights.alpha();
    let growth = (t * b.m_a).exp();
    let m_x = (b.x0_sup + t * b.m_b) * growth;
    let fit = c_norm * m_x + b.m_target;
    let m_p = 2.0 * alpha * t * c_norm * fit * growth;
    let c_x = (b.g_a * m_x + b.g_b) * growth;
    let c_e = 0.5 * c_x * t * (m_p * b.g_a + alpha * c_norm * c_norm * c_x * t);
    let curv = curvature(b, m_x, m_p);
    let beta0 = 0.5 * curv + c_e;
    let lambda = 2.0 * weights.beta() - curv;
    Constants {
        m_x,
        m_p,
        l_x: b.m_a * m_x + b.m_b,
        l_p: b.m_a * m_p + 2.0 * alpha * c_norm * fit,
        c_x,
        c_e,
        beta0,
        lambda,
        c: 0.5 * lambda - c_e,
        l_h: 2.0 * weights.beta() + curv,
    }
}

/// `beta0` alone; it does not depend on `beta`.
pub fn beta0(bounds: &ModelBounds, horizon: f64, alpha: f64, c_norm: f64) -> f64 {
    let w = CostWeights::new(alpha, 1.0).expect("alpha validated by caller");
    compute_constants(bounds, horizon, &w, c_norm).beta0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub alpha_min: f64,
    pub beta_min: f64,
}

/// Weights above which the extremal control is also optimal.
pub fn sufficiency_thresholds(bounds: &ModelBounds, constants: &Constants, c: &DMatrix<f64>) -> Result<Thresholds> {
    let norm = spectral_norm(c);
    // sigma_min over min(d', n) values; a wide C is rank deficient in columns
    let sigma_min = if c.nrows() < c.ncols() { 0.0 } else { min_singular_value(c) };
    if sigma_min * sigma_min <= 1e-12 * norm * norm {
        return Err(Error::RankDeficientReadout { sigma_min });
    }
    let k = constants;
    Ok(Thresholds {
        alpha_min: 1.0 / (2.0 * sigma_min * sigma_min),
        beta_min: 0.5 * curvature(bounds, k.m_x, k.m_p) + k.c_e.max(0.5 * k.m_p * k.m_p * bounds.g_a * bounds.g_a),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianSample {
    pub pass: bool,
    /// Largest sampled value of `Q[y, v]` over nonzero pairs.
    pub worst: f64,
    pub samples: usize,
}

/// Samples the second variation
/// `Q[y,v] = -2 alpha E|C y|^2 + 2 E[p.(D_u A[v] y)] - 2 beta |v|^2 + E[p.(D_u^2 A[v,v] x + D_u^2 B[v,v])]`
/// at every node with `per_node` random `(y, v)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn hessian_definiteness_sampled(
    model: &dyn DynamicsModel,
    batch: &EnsembleBatch,
    u: &ControlTrajectory,
    xs: &[StatePath],
    ps: &[AdjointPath],
    weights: &CostWeights,
    per_node: usize,
    seed: u64,
) -> Result<HessianSample> {
    let grid = batch.grid();
    let dims = model.dims();
    let c = model.readout();
    let alpha = weights.alpha();
    let worst_per_node: Vec<(f64, usize)> = (0..grid.num_nodes())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let ctx = HamiltonianContext::from_solution(model, batch, xs, ps, i, *weights)?;
            let ui = u.at_node(i);
            let t = grid.node(i);
            let mut worst = f64::NEG_INFINITY;
            let mut count = 0;
            for _ in 0..per_node {
                let v = DVector::from_fn(dims.control, |_, _| rng.random_range(-1.0..=1.0));
                let ys: Vec<DVector<f64>> = (0..batch.len())
                    .map(|_| DVector::from_fn(dims.state, |_, _| rng.random_range(-1.0..=1.0)))
                    .collect();
                let mut fit = 0.0;
                let mut cross = 0.0;
                for (s, y) in ctx.members().iter().zip(&ys) {
                    fit += (c * y).norm_squared();
                    cross += s.p.dot(&(model.da(t, &s.input, ui, &v) * y));
                }
                let m = batch.len() as f64;
                // hess_quadform already carries the -2 beta |v|^2 term
                let q = -2.0 * alpha * fit / m + 2.0 * cross / m + ctx.hess_quadform(ui, &v);
                if v.norm() > 0.0 || ys.iter().any(|y| y.norm() > 0.0) {
                    worst = worst.max(q);
                    count += 1;
                }
            }
            Ok((worst, count))
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = worst_per_node.iter().map(|w| w.0).fold(f64::NEG_INFINITY, f64::max);
    let samples = worst_per_node.iter().map(|w| w.1).sum();
    Ok(HessianSample {
        pass: worst < 0.0,
        worst,
        samples,
    })
}

/// Largest sampled `Q_H(u_i)[v] + lambda |v|^2` over `count` draws of a
/// random node `i` and a random unit direction `v`. Strong concavity with
/// modulus `lambda` means this never exceeds zero.
#[allow(clippy::too_many_arguments)]
pub fn concavity_margin_sampled(
    model: &dyn DynamicsModel,
    batch: &EnsembleBatch,
    u: &ControlTrajectory,
    xs: &[StatePath],
    ps: &[AdjointPath],
    weights: &CostWeights,
    lambda: f64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let grid = batch.grid();
    let m = model.dims().control;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(usize, DVector<f64>)> = (0..count)
        .map(|_| {
            let i = rng.random_range(0..grid.num_nodes());
            let v = DVector::from_fn(m, |_, _| rng.random_range(-1.0..=1.0));
            let n = v.norm();
            (i, if n > 0.0 { v / n } else { v })
        })
        .collect();
    let margins: Vec<f64> = draws
        .par_iter()
        .map(|(i, v)| {
            let ctx = HamiltonianContext::from_solution(model, batch, xs, ps, *i, *weights)?;
            Ok(ctx.hess_quadform(u.at_node(*i), v) + lambda * v.norm_squared())
        })
        .collect::<Result<_>>()?;
    Ok(margins.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Smooth random control directions: each component a short Fourier series
/// in time with coefficients in `[-1, 1]`.
pub fn random_smooth_directions(m: usize, grid: &TimeGrid, count: usize, seed: u64) -> Vec<Vec<DVector<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let coeffs: Vec<[f64; 5]> = (0..m)
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
                .collect();
            grid.nodes()
                .map(|t| {
                    let w = 2.0 * std::f64::consts::PI * t / grid.horizon();
                    DVector::from_iterator(
                        m,
                        coeffs.iter().map(|a| {
                            a[0] + a[1] * w.cos() + a[2] * w.sin() + a[3] * (2.0 * w).cos() + a[4] * (2.0 * w).sin()
                        }),
                    )
                })
                .collect()
        })
        .collect()
}

/// A smooth control well inside the box: centre plus a quarter of the
/// half-width times a normalized smooth random direction. Gradient checks
/// at a converged control compare two numbers that are both roundoff.
pub fn interior_smooth_control(set: &ControlSet, grid: &TimeGrid, seed: u64) -> ControlTrajectory {
    let dir = random_smooth_directions(set.dim(), grid, 1, seed).remove(0);
    let scale = dir.iter().map(|d| d.amax()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let centre = (set.lower() + set.upper()) * 0.5;
    let half = (set.upper() - set.lower()) * 0.5;
    let values = dir
        .iter()
        .map(|d| &centre + half.component_mul(d) * (0.25 / scale))
        .collect();
    ControlTrajectory::new(values, grid).expect("one value per node")
}

/// Per-direction values of the adjoint directional derivative and its
/// finite-difference counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
}

fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

impl GradientCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.finite_difference)
            .map(|(a, f)| relative_error(*a, *f))
            .fold(0.0, f64::max)
    }

    /// Same check against a deliberately mis-scaled adjoint gradient.
    pub fn corrupted(&self, factor: f64) -> Self {
        Self {
            analytic: self.analytic.iter().map(|a| a * factor).collect(),
            finite_difference: self.finite_difference.clone(),
        }
    }
}

/// `dJ(u)[du] = int -grad_u H . du dt` against
/// `(J(u + eps du) - J(u - eps du)) / (2 eps)`, for each direction.
pub fn fd_gradient_check(
    model: &dyn DynamicsModel,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    weights: &CostWeights,
    directions: &[Vec<DVector<f64>>],
    eps: f64,
) -> Result<GradientCheck> {
    let grid = batch.grid();
    let xs = forward_batch(model, u, batch)?;
    let ps = backward_batch(model, u, batch, &xs, weights)?;
    let grads: Vec<DVector<f64>> = (0..grid.num_nodes())
        .into_par_iter()
        .map(|i| Ok(HamiltonianContext::from_solution(model, batch, &xs, &ps, i, *weights)?.grad(u.at_node(i))))
        .collect::<Result<_>>()?;
    let mut analytic = Vec::with_capacity(directions.len());
    let mut finite_difference = Vec::with_capacity(directions.len());
    for dir in directions {
        let integrand: Vec<f64> = grads.iter().zip(dir).map(|(g, d)| -g.dot(d)).collect();
        analytic.push(grid.integrate(&integrand));
        let jp = cost_eval(model, &u.offset(dir, eps), batch, weights)?;
        let jm = cost_eval(model, &u.offset(dir, -eps), batch, weights)?;
        finite_difference.push((jp - jm) / (2.0 * eps));
    }
    Ok(GradientCheck {
        analytic,
        finite_difference,
    })
}

/// Worst first-order remainders of the state and adjoint under `w -> w + eps h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalCheck {
    pub eps: f64,
    /// `max |x(w + eps h) - x(w) - eps z_x|_sup / (eps |h|_sup)`.
    pub state_rel: f64,
    pub adjoint_rel: f64,
    /// Unnormalized remainders `max |x(w + eps h) - x(w) - eps z_x|_sup`.
    pub state_remainder: f64,
    pub adjoint_remainder: f64,
    /// Scale of the solutions, for judging roundoff.
    pub state_scale: f64,
    pub adjoint_scale: f64,
}

/// Remainders at or below this multiple of machine epsilon (times the path
/// scale) are indistinguishable from roundoff.
const ROUNDOFF_FLOOR: f64 = 1e4 * f64::EPSILON;

impl VariationalCheck {
    pub fn max_rel(&self) -> f64 {
        self.state_rel.max(self.adjoint_rel)
    }
}

/// Remainder ratio between a check at `eps` and one at `eps / 2`; about 4
/// for a correct first-order expansion. `None` when both remainders sit at
/// the roundoff floor, i.e. the solution is affine in the input.
pub fn remainder_order_ratio(coarse: &VariationalCheck, fine: &VariationalCheck) -> (Option<f64>, Option<f64>) {
    let ratio = |a: f64, b: f64, scale: f64| {
        let floor = ROUNDOFF_FLOOR * (1.0 + scale);
        if a <= floor && b <= floor {
            None
        } else {
            Some(a / b)
        }
    };
    (
        ratio(coarse.state_remainder, fine.state_remainder, coarse.state_scale),
        ratio(coarse.adjoint_remainder, fine.adjoint_remainder, coarse.adjoint_scale),
    )
}

/// Finite-difference check of both variational equations over every member
/// and direction. Needs the batch's target map for `F(w + eps h)`.
pub fn variational_fd_check(
    model: &dyn DynamicsModel,
    u: &ControlTrajectory,
    batch: &EnsembleBatch,
    weights: &CostWeights,
    directions: &[InputSignal],
    eps: f64,
) -> Result<VariationalCheck> {
    let grid = batch.grid();
    let map = batch
        .target_map()
        .ok_or_else(|| Error::InvalidParameter("variational check needs the target map".into()))?;
    let per_member: Vec<[f64; 6]> = batch
        .members()
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            let w = &m.input;
            let x = forward_member(model, u, w, grid, k)?;
            let p = backward_member(model, u, w, &x, &m.target, weights, grid, k)?;
            let mut acc = [0.0f64; 6];
            acc[4] = x.sup_norm();
            acc[5] = p.sup_norm();
            for h in directions {
                let hn = h.sup_norm();
                if hn == 0.0 {
                    continue;
                }
                let z = variational_solve_state(model, u, w, &x, h, grid)?;
                let df = map.derivative(w, h, grid)?;
                let zp = variational_solve_adjoint(model, u, w, &p, &z, h, &df, weights, grid)?;
                let wp = w.perturbed(h, eps);
                let xp = forward_member(model, u, &wp, grid, k)?;
                let target = map.eval(&wp, grid)?;
                let pp = backward_member(model, u, &wp, &xp, &target, weights, grid, k)?;
                let rx = remainder(&xp, &x, &z, eps);
                let rp = remainder(&pp, &p, &zp, eps);
                acc[0] = acc[0].max(rx / (eps * hn));
                acc[1] = acc[1].max(rp / (eps * hn));
                acc[2] = acc[2].max(rx);
                acc[3] = acc[3].max(rp);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let max = |i: usize| per_member.iter().map(|a| a[i]).fold(0.0, f64::max);
    Ok(VariationalCheck {
        eps,
        state_rel: max(0),
        adjoint_rel: max(1),
        state_remainder: max(2),
        adjoint_remainder: max(3),
        state_scale: max(4),
        adjoint_scale: max(5),
    })
}

fn remainder(perturbed: &SampledPath, base: &SampledPath, z: &SampledPath, eps: f64) -> f64 {
    perturbed
        .samples()
        .iter()
        .zip(base.samples())
        .zip(z.samples())
        .map(|((a, b), d)| (a - b - d * eps).norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundsAudit {
    pub pass: bool,
    pub x_sup: f64,
    pub p_sup: f64,
    pub m_x: f64,
    pub m_p: f64,
}

/// Observed state/adjoint maxima against the a priori bounds (equality allowed).
pub fn bounds_audit(x_sup: f64, p_sup: f64, constants: &Constants) -> BoundsAudit {
    let within = |v: f64, bound: f64| v <= bound * (1.0 + 1e-12);
    BoundsAudit {
        pass: within(x_sup, constants.m_x) && within(p_sup, constants.m_p),
        x_sup,
        p_sup,
        m_x: constants.m_x,
        m_p: constants.m_p,
    }
}

/// One named check with its measured value and tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    /// Upper end of the accepted range.
    pub tolerance: f64,
    /// Lower end, for two-sided checks.
    pub lower: Option<f64>,
    pub pass: bool,
}

impl CheckResult {
    /// Passes when `value <= tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance,
            lower: None,
            pass: value <= tolerance,
        }
    }

    /// Passes when `lower <= value <= upper`.
    pub fn within(name: &str, value: f64, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            tolerance: upper,
            lower: Some(lower),
            pass: (lower..=upper).contains(&value),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub alpha: f64,
    pub beta: f64,
    pub horizon: f64,
    pub c_norm: f64,
    pub bounds: ModelBounds,
    pub constants: Constants,
    pub thresholds: Option<Thresholds>,
    pub beta_exceeds_beta0: bool,
    pub alpha_exceeds_alpha_min: bool,
    pub beta_exceeds_beta_min: bool,
    pub hessian_negative_definite_sampled: Option<bool>,
    pub checks: Vec<CheckResult>,
}

impl CertificateReport {
    pub fn new(bounds: ModelBounds, horizon: f64, weights: &CostWeights, c: &DMatrix<f64>) -> Self {
        let c_norm = spectral_norm(c);
        let constants = compute_constants(&bounds, horizon, weights, c_norm);
        let thresholds = sufficiency_thresholds(&bounds, &constants, c).ok();
        Self {
            alpha: weights.alpha(),
            beta: weights.beta(),
            horizon,
            c_norm,
            bounds,
            constants,
            thresholds,
            beta_exceeds_beta0: weights.beta() > constants.beta0,
            alpha_exceeds_alpha_min: thresholds.is_some_and(|t| weights.alpha() > t.alpha_min),
            beta_exceeds_beta_min: thresholds.is_some_and(|t| weights.beta() > t.beta_min),
            hessian_negative_definite_sampled: None,
            checks: Vec::new(),
        }
    }

    pub fn bounds_sampled_not_certified(&self) -> bool {
        self.bounds.is_sampled()
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Machine-readable `key = value` lines.
    pub fn to_key_values(&self) -> String {
        let k = &self.constants;
        let b = &self.bounds;
        let mut s = String::new();
        let mut kv = |key: &str, value: String| {
            let _ = writeln!(s, "{key} = {value}");
        };
        kv("alpha", self.alpha.to_string());
        kv("beta", self.beta.to_string());
        kv("horizon", self.horizon.to_string());
        kv("c_norm", self.c_norm.to_string());
        let source = match b.source {
            BoundsSource::Analytic => "analytic".to_string(),
            BoundsSource::Sampled { samples, safety } => format!("sampled(samples={samples},safety={safety})"),
        };
        kv("bounds_source", source);
        for (name, v) in [
            ("M_A", b.m_a),
            ("M_B", b.m_b),
            ("G_A", b.g_a),
            ("G_B", b.g_b),
            ("H_A", b.h_a),
            ("H_B", b.h_b),
            ("M_target", b.m_target),
            ("x0_sup", b.x0_sup),
            ("M_X", k.m_x),
            ("M_P", k.m_p),
            ("L_X", k.l_x),
            ("L_P", k.l_p),
            ("C_X", k.c_x),
            ("C_E", k.c_e),
            ("beta0", k.beta0),
            ("lambda", k.lambda),
            ("c", k.c),
            ("L_H", k.l_h),
        ] {
            kv(name, v.to_string());
        }
        match self.thresholds {
            Some(t) => {
                kv("alpha_min", t.alpha_min.to_string());
                kv("beta_min_sufficient", t.beta_min.to_string());
            }
            None => {
                kv("alpha_min", "undefined(rank_deficient_readout)".into());
                kv("beta_min_sufficient", "undefined(rank_deficient_readout)".into());
            }
        }
        kv("beta_exceeds_beta0", self.beta_exceeds_beta0.to_string());
        kv("alpha_exceeds_alpha_min", self.alpha_exceeds_alpha_min.to_string());
        kv("beta_exceeds_beta_min", self.beta_exceeds_beta_min.to_string());
        kv(
            "hessian_negative_definite_sampled",
            self.hessian_negative_definite_sampled
                .map_or("not_run".to_string(), |v| v.to_string()),
        );
        kv("bounds_sampled_not_certified", self.bounds_sampled_not_certified().to_string());
        for c in &self.checks {
            kv(&format!("check.{}.value", c.name), c.value.to_string());
            kv(&format!("check.{}.tolerance", c.name), c.tolerance.to_string());
            if let Some(lo) = c.lower {
                kv(&format!("check.{}.lower", c.name), lo.to_string());
            }
            kv(&format!("check.{}.pass", c.name), c.pass.to_string());
        }
        s
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let k = &self.constants;
        let mut s = String::new();
        let _ = writeln!(s, "bounds: {}", if self.bounds.is_sampled() { "sampled (not certified)" } else { "analytic" });
        let _ = writeln!(s, "M_X = {:.6e}   M_P = {:.6e}", k.m_x, k.m_p);
        let _ = writeln!(s, "C_X = {:.6e}   C_E = {:.6e}", k.c_x, k.c_e);
        let _ = writeln!(s, "beta0 = {:.6e}   beta = {:.6e}   -> {}", k.beta0, self.beta,
            if self.beta_exceeds_beta0 { "descent guaranteed" } else { "beta <= beta0: no descent guarantee" });
        let _ = writeln!(s, "lambda = {:.6e}   c = {:.6e}   L_H = {:.6e}", k.lambda, k.c, k.l_h);
        match self.thresholds {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "sufficiency: alpha_min = {:.6e} ({}), beta_min = {:.6e} ({})",
                    t.alpha_min,
                    if self.alpha_exceeds_alpha_min { "ok" } else { "not met" },
                    t.beta_min,
                    if self.beta_exceeds_beta_min { "ok" } else { "not met" }
                );
            }
            None => {
                let _ = writeln!(s, "sufficiency: readout is rank deficient, thresholds undefined");
            }
        }
        if !self.checks.is_empty() {
            let _ = writeln!(s, "{:<28} {:>14} {:>22}  result", "check", "value", "tolerance");
            for c in &self.checks {
                let tol = match c.lower {
                    Some(lo) => format!("[{lo}, {}]", c.tolerance),
                    None => format!("<= {:.3e}", c.tolerance),
                };
                let _ = writeln!(
                    s,
                    "{:<28} {:>14.6e} {:>22}  {}",
                    c.name,
                    c.value,
                    tol,
                    if c.pass { "PASS" } else { "FAIL" }
                );
            }
        }
        s
    }
}
