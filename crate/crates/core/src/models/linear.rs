use nalgebra::{DMatrix, DVector};

use super::{BoundsDomain, BoundsSource, Dims, DynamicsModel, ModelBounds};
use crate::ensemble::InputSignal;
use crate::error::{Error, Result};

/// Fully parameterized linear system: `A = mat(u_A)`, `B = mat(u_B) w(t)`.
///
/// Control layout: column-major `vec(A)` (`n^2` entries) followed by
/// column-major `vec(B)` (`n d` entries).
#[derive(Debug, Clone)]
pub struct LinearSsm {
    n: usize,
    d: usize,
    c: DMatrix<f64>,
    x0: DVector<f64>,
}

impl LinearSsm {
    pub fn new(n: usize, d: usize, c: DMatrix<f64>, x0: DVector<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidParameter("state and input dimensions must be >= 1".into()));
        }
        if c.ncols() != n || x0.len() != n {
            return Err(Error::DimensionMismatch {
                what: "linear model readout / initial state",
                expected: n,
                got: if c.ncols() != n { c.ncols() } else { x0.len() },
            });
        }
        Ok(Self { n, d, c, x0 })
    }

    fn split<'a>(&self, u: &'a DVector<f64>) -> (&'a [f64], &'a [f64]) {
        u.as_slice().split_at(self.n * self.n)
    }
}

impl DynamicsModel for LinearSsm {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn dims(&self) -> Dims {
        Dims {
            state: self.n,
            input: self.d,
            output: self.c.nrows(),
            control: self.n * self.n + self.n * self.d,
        }
    }

    fn readout(&self) -> &DMatrix<f64> {
        &self.c
    }

    fn initial_state(&self, _input: &InputSignal) -> DVector<f64> {
        self.x0.clone()
    }

    fn initial_state_derivative(&self, _input: &InputSignal, _h: &InputSignal) -> DVector<f64> {
        DVector::zeros(self.n)
    }

    fn a(&self, _t: f64, _xi: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n, self.n, self.split(u).0)
    }

    fn b(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DMatrix::from_column_slice(self.n, self.d, self.split(u).1) * xi
    }

    fn da(&self, t: f64, xi: &DVector<f64>, _u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        self.a(t, xi, v)
    }

    fn db(&self, t: f64, xi: &DVector<f64>, _u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.b(t, xi, v)
    }

    fn d2a(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.n, self.n)
    }

    fn d2b(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.n)
    }

    fn da_input(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _eta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.n, self.n)
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
        let ga = p * x.transpose();
        let gb = p * xi.transpose();
        DVector::from_iterator(
            self.dims().control,
            ga.as_slice().iter().chain(gb.as_slice()).copied(),
        )
    }

    fn declared_bounds(&self, domain: &BoundsDomain) -> Option<ModelBounds> {
        let nn = self.n * self.n;
        let frob = |range: std::ops::Range<usize>| {
            range
                .map(|k| {
                    let c = domain.set.lower()[k].abs().max(domain.set.upper()[k].abs());
                    c * c
                })
                .sum::<f64>()
                .sqrt()
        };
        let wn = domain.input_norm_bound(self.d);
        Some(ModelBounds {
            m_a: frob(0..nn),
            m_b: frob(nn..self.dims().control) * wn,
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
