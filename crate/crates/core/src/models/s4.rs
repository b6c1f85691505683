use nalgebra::{DMatrix, DVector};

use super::{BoundsDomain, BoundsSource, Dims, DynamicsModel, ModelBounds};
use crate::ensemble::InputSignal;
use crate::error::{Error, Result};

/// Diagonal system decoupled by channel: block `i` evolves as
/// `dx_i/dt = diag(a_i) x_i + b w_i(t)` with a projection `b` shared across channels.
///
/// Control layout: the `N_s d` diagonal entries (channel-major), then `b` (`N_s`).
#[derive(Debug, Clone)]
pub struct DiagS4 {
    ns: usize,
    d: usize,
    c: DMatrix<f64>,
    x0: DVector<f64>,
}

impl DiagS4 {
    pub fn new(ns: usize, d: usize, c: DMatrix<f64>, x0: DVector<f64>) -> Result<Self> {
        let n = ns * d;
        if n == 0 {
            return Err(Error::InvalidParameter("state and input dimensions must be >= 1".into()));
        }
        if c.ncols() != n || x0.len() != n {
            return Err(Error::DimensionMismatch {
                what: "diagonal model readout / initial state",
                expected: n,
                got: if c.ncols() != n { c.ncols() } else { x0.len() },
            });
        }
        Ok(Self { ns, d, c, x0 })
    }

    fn n(&self) -> usize {
        self.ns * self.d
    }

    /// `B` for a given shared projection and input sample.
    fn project(&self, bt: &[f64], xi: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n(), |k, _| bt[k % self.ns] * xi[k / self.ns])
    }
}

impl DynamicsModel for DiagS4 {
    fn kind(&self) -> &'static str {
        "s4"
    }

    fn dims(&self) -> Dims {
        Dims {
            state: self.n(),
            input: self.d,
            output: self.c.nrows(),
            control: self.n() + self.ns,
        }
    }

    fn readout(&self) -> &DMatrix<f64> {
        &self.c
    }

    fn initial_state(&self, _input: &InputSignal) -> DVector<f64> {
        self.x0.clone()
    }

    fn initial_state_derivative(&self, _input: &InputSignal, _h: &InputSignal) -> DVector<f64> {
        DVector::zeros(self.n())
    }

    fn a(&self, _t: f64, _xi: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&u.rows(0, self.n()).into_owned())
    }

    fn b(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.project(&u.as_slice()[self.n()..], xi)
    }

    fn da(&self, t: f64, xi: &DVector<f64>, _u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        self.a(t, xi, v)
    }

    fn db(&self, t: f64, xi: &DVector<f64>, _u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.b(t, xi, v)
    }

    fn d2a(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.n(), self.n())
    }

    fn d2b(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n())
    }

    fn da_input(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _eta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.n(), self.n())
    }

    fn db_input(&self, t: f64, _xi: &DVector<f64>, u: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
        self.b(t, eta, u)
    }

    fn pairing_gradient(
        &self,
        _t: f64,
        xi: &DVector<f64>,
        _u: &DVector<f64>,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> DVector<f64> {
        let n = self.n();
        let mut g = DVector::zeros(n + self.ns);
        for k in 0..n {
            g[k] = p[k] * x[k];
            g[n + k % self.ns] += p[k] * xi[k / self.ns];
        }
        g
    }

    fn declared_bounds(&self, domain: &BoundsDomain) -> Option<ModelBounds> {
        let n = self.n();
        let wn = domain.input_norm_bound(self.d);
        let b_max = domain.set.max_abs_in(n..n + self.ns);
        Some(ModelBounds {
            m_a: domain.set.max_abs_in(0..n),
            m_b: (self.ns as f64).sqrt() * b_max * wn,
            g_a: 1.0,
            g_b: wn,
            h_a: 0.0,
            h_b: 0.0,
            m_target: domain.target_sup,
            x0_sup: domain.x0_sup,
            source: BoundsSource::Analytic,
        })
    }
}
