//! State-space model zoo behind one dynamics interface.
//!
//! Every model is linear in the state: `dx/dt = A(t, w(t); u) x + B(t, w(t); u)`.
//! `A` and `B` see the input only through its current sample `xi = w(t)`.

mod affine;
mod linear;
mod s4;
mod s6;

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use affine::AffineModel;
pub use linear::LinearSsm;
pub use s4::DiagS4;
pub use s6::SelectiveS6;

use crate::control::ControlSet;
use crate::ensemble::{EnsembleBatch, InputSignal};
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

const FD_FIRST: f64 = 1e-6;
const FD_SECOND: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// `n`
    pub state: usize,
    /// `d`
    pub input: usize,
    /// `d'`
    pub output: usize,
    /// `m`
    pub control: usize,
}

/// Evaluators for `A`, `B`, their control derivatives and the fixed readout.
///
/// Only `a`, `b`, `dims`, `readout` and `kind` are required; the derivative
/// methods fall back to finite differences.
pub trait DynamicsModel: Send + Sync + Debug {
    fn kind(&self) -> &'static str;
    fn dims(&self) -> Dims;
    fn readout(&self) -> &DMatrix<f64>;

    fn a(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64>;
    fn b(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn initial_state(&self, _input: &InputSignal) -> DVector<f64> {
        DVector::zeros(self.dims().state)
    }

    /// `d x0(w)[h]`.
    fn initial_state_derivative(&self, input: &InputSignal, h: &InputSignal) -> DVector<f64> {
        let eps = FD_FIRST;
        (self.initial_state(&input.perturbed(h, eps)) - self.initial_state(&input.perturbed(h, -eps)))
            / (2.0 * eps)
    }

    /// `D_u A[v]`.
    fn da(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let (up, um) = (u + v * FD_FIRST, u - v * FD_FIRST);
        (self.a(t, xi, &up) - self.a(t, xi, &um)) / (2.0 * FD_FIRST)
    }

    /// `D_u B[v]`.
    fn db(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (up, um) = (u + v * FD_FIRST, u - v * FD_FIRST);
        (self.b(t, xi, &up) - self.b(t, xi, &um)) / (2.0 * FD_FIRST)
    }

    /// `D_u^2 A[v, v]`.
    fn d2a(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let (up, um) = (u + v * FD_SECOND, u - v * FD_SECOND);
        (self.a(t, xi, &up) - self.a(t, xi, u) * 2.0 + self.a(t, xi, &um)) / (FD_SECOND * FD_SECOND)
    }

    /// `D_u^2 B[v, v]`.
    fn d2b(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (up, um) = (u + v * FD_SECOND, u - v * FD_SECOND);
        (self.b(t, xi, &up) - self.b(t, xi, u) * 2.0 + self.b(t, xi, &um)) / (FD_SECOND * FD_SECOND)
    }

    /// Derivative of `A` along an input perturbation `eta` of the current sample.
    fn da_input(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>, eta: &DVector<f64>) -> DMatrix<f64> {
        let (xp, xm) = (xi + eta * FD_FIRST, xi - eta * FD_FIRST);
        (self.a(t, &xp, u) - self.a(t, &xm, u)) / (2.0 * FD_FIRST)
    }

    fn db_input(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
        let (xp, xm) = (xi + eta * FD_FIRST, xi - eta * FD_FIRST);
        (self.b(t, &xp, u) - self.b(t, &xm, u)) / (2.0 * FD_FIRST)
    }

    /// `grad_u [p . (A(u) x + B(u))]`, the per-member part of the Hamiltonian gradient.
    fn pairing_gradient(
        &self,
        t: f64,
        xi: &DVector<f64>,
        u: &DVector<f64>,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> DVector<f64> {
        let m = self.dims().control;
        DVector::from_iterator(
            m,
            (0..m).map(|k| {
                let e = unit(m, k);
                p.dot(&(self.da(t, xi, u, &e) * x + self.db(t, xi, u, &e)))
            }),
        )
    }

    /// Analytic bounds over the given domain, when the model knows them.
    fn declared_bounds(&self, _domain: &BoundsDomain) -> Option<ModelBounds> {
        None
    }
}

pub(crate) fn unit(m: usize, k: usize) -> DVector<f64> {
    let mut e = DVector::zeros(m);
    e[k] = 1.0;
    e
}

/// Centered differences of `A` and `B` in `u` along `v`.
pub fn fd_derivative_fallback<M: DynamicsModel + ?Sized>(
    model: &M,
    t: f64,
    xi: &DVector<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
    eps: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let (up, um) = (u + v * eps, u - v * eps);
    (
        (model.a(t, xi, &up) - model.a(t, xi, &um)) / (2.0 * eps),
        (model.b(t, xi, &up) - model.b(t, xi, &um)) / (2.0 * eps),
    )
}

/// Where the bounds must hold: control box, per-channel input bound, horizon.
#[derive(Debug, Clone)]
pub struct BoundsDomain {
    pub set: ControlSet,
    /// `max_c |w_c(t)|` over the ensemble.
    pub input_bound: f64,
    pub horizon: f64,
    pub target_sup: f64,
    pub x0_sup: f64,
}

impl BoundsDomain {
    pub fn from_batch<M: DynamicsModel + ?Sized>(model: &M, batch: &EnsembleBatch, set: &ControlSet) -> Self {
        let x0_sup = batch
            .members()
            .iter()
            .map(|m| model.initial_state(&m.input).norm())
            .fold(0.0, f64::max);
        Self {
            set: set.clone(),
            input_bound: batch.input_channel_bound(),
            horizon: batch.grid().horizon(),
            target_sup: batch.target_sup(),
            x0_sup,
        }
    }

    /// Euclidean bound `sqrt(d) W` on `|w(t)|`.
    pub(crate) fn input_norm_bound(&self, d: usize) -> f64 {
        (d as f64).sqrt() * self.input_bound
    }

    /// `l1` bound `d W`.
    pub(crate) fn input_l1_bound(&self, d: usize) -> f64 {
        d as f64 * self.input_bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundsSource {
    Analytic,
    /// Empirical suprema over random samples, inflated by `safety`.
    Sampled { samples: usize, safety: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelBounds {
    pub m_a: f64,
    pub m_b: f64,
    pub g_a: f64,
    pub g_b: f64,
    pub h_a: f64,
    pub h_b: f64,
    pub m_target: f64,
    pub x0_sup: f64,
    pub source: BoundsSource,
}

impl ModelBounds {
    pub fn is_sampled(&self) -> bool {
        matches!(self.source, BoundsSource::Sampled { .. })
    }

    pub fn is_valid(&self) -> bool {
        [self.m_a, self.m_b, self.g_a, self.g_b, self.h_a, self.h_b, self.m_target, self.x0_sup]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Operator bound `sqrt(m) * Gbar` from a bound on every first partial.
pub fn first_order_operator_bound(elementwise: f64, m: usize) -> f64 {
    (m as f64).sqrt() * elementwise
}

/// Operator bound `m * Hbar` from a bound on every second partial.
pub fn second_order_operator_bound(elementwise: f64, m: usize) -> f64 {
    m as f64 * elementwise
}

/// Analytic bounds if the model declares them, otherwise sampled estimates.
pub fn declare_or_estimate_bounds<M: DynamicsModel + ?Sized>(
    model: &M,
    domain: &BoundsDomain,
    budget: usize,
    safety: f64,
    seed: u64,
) -> Result<ModelBounds> {
    match model.declared_bounds(domain) {
        Some(b) => Ok(b),
        None => estimate_bounds_sampled(model, domain, budget, safety, seed),
    }
}

/// Empirical suprema over `budget` random `(t, xi, u)` triples.
///
/// Sampling cannot certify a supremum, so the result is a scaled lower bound.
pub fn estimate_bounds_sampled<M: DynamicsModel + ?Sized>(
    model: &M,
    domain: &BoundsDomain,
    budget: usize,
    safety: f64,
    seed: u64,
) -> Result<ModelBounds> {
    if budget == 0 {
        return Err(Error::InvalidParameter("bounds sampling budget must be >= 1".into()));
    }
    if !(safety.is_finite() && safety >= 1.0) {
        return Err(Error::InvalidParameter(format!("safety factor must be >= 1, got {safety}")));
    }
    let dims = model.dims();
    let m = dims.control;
    let w = domain.input_bound;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut m_a, mut m_b, mut g_a, mut g_b, mut h_a, mut h_b) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..budget {
        let t = rng.random_range(0.0..=domain.horizon);
        let xi = DVector::from_fn(dims.input, |_, _| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 });
        let u = domain.set.sample(&mut rng);
        m_a = m_a.max(spectral_norm(&model.a(t, &xi, &u)));
        m_b = m_b.max(model.b(t, &xi, &u).norm());
        for k in 0..m {
            let e = unit(m, k);
            g_a = g_a.max(spectral_norm(&model.da(t, &xi, &u, &e)));
            g_b = g_b.max(model.db(t, &xi, &u, &e).norm());
            for l in k..m {
                // Mixed partials by polarization of the quadratic form.
                let (ha, hb) = if k == l {
                    (model.d2a(t, &xi, &u, &e), model.d2b(t, &xi, &u, &e))
                } else {
                    let f = unit(m, l);
                    let (sp, sm) = (&e + &f, &e - &f);
                    (
                        (model.d2a(t, &xi, &u, &sp) - model.d2a(t, &xi, &u, &sm)) / 4.0,
                        (model.d2b(t, &xi, &u, &sp) - model.d2b(t, &xi, &u, &sm)) / 4.0,
                    )
                };
                h_a = h_a.max(spectral_norm(&ha));
                h_b = h_b.max(hb.norm());
            }
        }
    }
    Ok(ModelBounds {
        m_a: safety * m_a,
        m_b: safety * m_b,
        g_a: safety * first_order_operator_bound(g_a, m),
        g_b: safety * first_order_operator_bound(g_b, m),
        h_a: safety * second_order_operator_bound(h_a, m),
        h_b: safety * second_order_operator_bound(h_b, m),
        m_target: domain.target_sup,
        x0_sup: domain.x0_sup,
        source: BoundsSource::Sampled { samples: budget, safety },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Readout {
    Identity,
    Matrix(DMatrix<f64>),
}

/// Constructor arguments for the built-in models.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Linear {
        state: usize,
        input: usize,
        readout: Readout,
        x0: Option<DVector<f64>>,
    },
    DiagS4 {
        state: usize,
        input: usize,
        state_per_channel: usize,
        readout: Readout,
        x0: Option<DVector<f64>>,
    },
    SelectiveS6 {
        state: usize,
        input: usize,
        state_per_channel: usize,
        delta: f64,
        readout: Readout,
        x0: Option<DVector<f64>>,
    },
    /// Fixed `A0`, control entering additively: `B = G u + E w`.
    Affine {
        a0: DMatrix<f64>,
        g: DMatrix<f64>,
        e: DMatrix<f64>,
        readout: Readout,
        x0: Option<DVector<f64>>,
    },
}

pub(crate) fn resolve_readout(readout: &Readout, n: usize) -> Result<DMatrix<f64>> {
    match readout {
        Readout::Identity => Ok(DMatrix::identity(n, n)),
        Readout::Matrix(c) => {
            if c.ncols() != n {
                return Err(Error::DimensionMismatch {
                    what: "readout columns",
                    expected: n,
                    got: c.ncols(),
                });
            }
            Ok(c.clone())
        }
    }
}

pub(crate) fn resolve_x0(x0: &Option<DVector<f64>>, n: usize) -> Result<DVector<f64>> {
    match x0 {
        None => Ok(DVector::zeros(n)),
        Some(v) if v.len() == n => Ok(v.clone()),
        Some(v) => Err(Error::DimensionMismatch {
            what: "initial state",
            expected: n,
            got: v.len(),
        }),
    }
}

pub(crate) fn check_channels(state: usize, input: usize, per_channel: usize) -> Result<()> {
    if input == 0 || per_channel == 0 {
        return Err(Error::InvalidParameter("input and per-channel state sizes must be >= 1".into()));
    }
    if state != per_channel * input {
        return Err(Error::DimensionMismatch {
            what: "state dimension (per-channel state x channels)",
            expected: per_channel * input,
            got: state,
        });
    }
    Ok(())
}

impl ModelSpec {
    pub fn build(&self) -> Result<Arc<dyn DynamicsModel>> {
        Ok(match self {
            ModelSpec::Linear { state, input, readout, x0 } => {
                Arc::new(LinearSsm::new(*state, *input, resolve_readout(readout, *state)?, resolve_x0(x0, *state)?)?)
            }
            ModelSpec::DiagS4 {
                state,
                input,
                state_per_channel,
                readout,
                x0,
            } => {
                check_channels(*state, *input, *state_per_channel)?;
                Arc::new(DiagS4::new(
                    *state_per_channel,
                    *input,
                    resolve_readout(readout, *state)?,
                    resolve_x0(x0, *state)?,
                )?)
            }
            ModelSpec::SelectiveS6 {
                state,
                input,
                state_per_channel,
                delta,
                readout,
                x0,
            } => {
                check_channels(*state, *input, *state_per_channel)?;
                Arc::new(SelectiveS6::new(
                    *state_per_channel,
                    *input,
                    *delta,
                    resolve_readout(readout, *state)?,
                    resolve_x0(x0, *state)?,
                )?)
            }
            ModelSpec::Affine { a0, g, e, readout, x0 } => {
                let n = a0.nrows();
                Arc::new(AffineModel::new(
                    a0.clone(),
                    g.clone(),
                    e.clone(),
                    resolve_readout(readout, n)?,
                    resolve_x0(x0, n)?,
                )?)
            }
        })
    }
}

/// Free-function form of [`ModelSpec::build`].
pub fn make_model(spec: &ModelSpec) -> Result<Arc<dyn DynamicsModel>> {
    spec.build()
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remark_operator_bound_factors() {
        assert_eq!(first_order_operator_bound(1.0, 4), 2.0);
        assert_eq!(second_order_operator_bound(1.0, 4), 4.0);
    }

    /// A model with no analytic derivatives, exercising every fallback.
    #[derive(Debug)]
    struct Opaque {
        c: DMatrix<f64>,
    }

    impl DynamicsModel for Opaque {
        fn kind(&self) -> &'static str {
            "opaque"
        }
        fn dims(&self) -> Dims {
            Dims {
                state: 2,
                input: 1,
                output: 2,
                control: 2,
            }
        }
        fn readout(&self) -> &DMatrix<f64> {
            &self.c
        }
        fn a(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[-u[0] * u[0], u[1] * xi[0], 0.0, (u[0] * u[1]).sin()])
        }
        fn b(&self, t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![u[1].powi(3) + t, xi[0] * u[0]])
        }
    }

    fn opaque() -> Opaque {
        Opaque {
            c: DMatrix::identity(2, 2),
        }
    }

    #[test]
    fn fallback_with_zero_direction_is_zero() {
        let m = opaque();
        let xi = DVector::from_element(1, 0.3);
        let u = DVector::from_vec(vec![0.2, -0.4]);
        let (da, db) = fd_derivative_fallback(&m, 0.1, &xi, &u, &DVector::zeros(2), 1e-5);
        assert_eq!(da.norm(), 0.0);
        assert_eq!(db.norm(), 0.0);
    }

    #[test]
    fn sampled_bounds_are_flagged_and_dominate_samples() {
        let m = opaque();
        let dom = testing::domain(2, 0.5);
        assert!(m.declared_bounds(&dom).is_none());
        let b = declare_or_estimate_bounds(&m, &dom, 200, 1.5, 7).unwrap();
        assert!(b.is_sampled() && b.is_valid());
        // second partials are genuinely nonzero here
        assert!(b.h_a > 0.0 && b.h_b > 0.0);
        assert!(estimate_bounds_sampled(&m, &dom, 0, 1.5, 7).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let (t, xi, u, v) = testing::random_point(&mut rng, m.dims(), &dom);
            let nv = v.norm();
            assert!(spectral_norm(&m.da(t, &xi, &u, &v)) <= b.g_a * nv);
            assert!(m.d2b(t, &xi, &u, &v).norm() <= b.h_b * nv * nv);
        }
    }

    #[test]
    fn default_pairing_gradient_matches_definition() {
        let m = opaque();
        let xi = DVector::from_element(1, 0.7);
        let u = DVector::from_vec(vec![0.3, -0.2]);
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let p = DVector::from_vec(vec![0.5, 0.25]);
        let g = m.pairing_gradient(0.0, &xi, &u, &x, &p);
        // hand derivatives of p.(A x + B)
        let exact0 = p[0] * (-2.0 * u[0] * x[0]) + p[1] * ((u[0] * u[1]).cos() * u[1] * x[1] + xi[0]);
        let exact1 = p[0] * (xi[0] * x[1] + 3.0 * u[1] * u[1]) + p[1] * (u[0] * u[1]).cos() * u[0] * x[1];
        assert!((g[0] - exact0).abs() < 1e-8);
        assert!((g[1] - exact1).abs() < 1e-8);
    }

    #[test]
    fn spec_builder_rejects_inconsistent_dims() {
        let bad = ModelSpec::DiagS4 {
            state: 5,
            input: 2,
            state_per_channel: 2,
            readout: Readout::Identity,
            x0: None,
        };
        assert!(matches!(bad.build(), Err(Error::DimensionMismatch { .. })));
        let bad_delta = ModelSpec::SelectiveS6 {
            state: 4,
            input: 2,
            state_per_channel: 2,
            delta: 0.0,
            readout: Readout::Identity,
            x0: None,
        };
        assert!(matches!(bad_delta.build(), Err(Error::InvalidParameter(_))));
        let bad_c = ModelSpec::Linear {
            state: 2,
            input: 1,
            readout: Readout::Matrix(DMatrix::identity(3, 3)),
            x0: None,
        };
        assert!(bad_c.build().is_err());
    }
}
