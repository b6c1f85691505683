use nalgebra::{DMatrix, DVector};

use super::{BoundsDomain, BoundsSource, Dims, DynamicsModel, ModelBounds};
use crate::ensemble::InputSignal;
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

/// Fixed drift with additive control: `A = A0`, `B = G u + E w(t)`.
///
/// The classic linear-quadratic tracking problem in this framework.
#[derive(Debug, Clone)]
pub struct AffineModel {
    a0: DMatrix<f64>,
    g: DMatrix<f64>,
    e: DMatrix<f64>,
    c: DMatrix<f64>,
    x0: DVector<f64>,
}

impl AffineModel {
    pub fn new(
        a0: DMatrix<f64>,
        g: DMatrix<f64>,
        e: DMatrix<f64>,
        c: DMatrix<f64>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = a0.nrows();
        if n == 0 || a0.ncols() != n {
            return Err(Error::InvalidParameter("drift matrix must be square and nonempty".into()));
        }
        for (what, got) in [
            ("control gain rows", g.nrows()),
            ("input gain rows", e.nrows()),
            ("readout columns", c.ncols()),
            ("initial state", x0.len()),
        ] {
            if got != n {
                return Err(Error::DimensionMismatch { what, expected: n, got });
            }
        }
        if g.ncols() == 0 || e.ncols() == 0 {
            return Err(Error::InvalidParameter("control and input dimensions must be >= 1".into()));
        }
        Ok(Self { a0, g, e, c, x0 })
    }
}

impl DynamicsModel for AffineModel {
    fn kind(&self) -> &'static str {
        "affine"
    }

    fn dims(&self) -> Dims {
        Dims {
            state: self.a0.nrows(),
            input: self.e.ncols(),
            output: self.c.nrows(),
            control: self.g.ncols(),
        }
    }

    fn readout(&self) -> &DMatrix<f64> {
        &self.c
    }

    fn initial_state(&self, _input: &InputSignal) -> DVector<f64> {
        self.x0.clone()
    }

    fn initial_state_derivative(&self, _input: &InputSignal, _h: &InputSignal) -> DVector<f64> {
        DVector::zeros(self.x0.len())
    }

    fn a(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        self.a0.clone()
    }

    fn b(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.g * u + &self.e * xi
    }

    fn da(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.a0.nrows(), self.a0.ncols())
    }

    fn db(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.g * v
    }

    fn d2a(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _v: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.a0.nrows(), self.a0.ncols())
    }

    fn d2b(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.a0.nrows())
    }

    fn da_input(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, _eta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(self.a0.nrows(), self.a0.ncols())
    }

    fn db_input(&self, _t: f64, _xi: &DVector<f64>, _u: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
        &self.e * eta
    }

    fn pairing_gradient(
        &self,
        _t: f64,
        _xi: &DVector<f64>,
        _u: &DVector<f64>,
        _x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> DVector<f64> {
        self.g.tr_mul(p)
    }

    fn declared_bounds(&self, domain: &BoundsDomain) -> Option<ModelBounds> {
        let g = spectral_norm(&self.g);
        Some(ModelBounds {
            m_a: spectral_norm(&self.a0),
            m_b: g * domain.set.max_norm() + spectral_norm(&self.e) * domain.input_norm_bound(self.e.ncols()),
            g_a: 0.0,
            g_b: g,
            h_a: 0.0,
            h_b: 0.0,
            m_target: domain.target_sup,
            x0_sup: domain.x0_sup,
            source: BoundsSource::Analytic,
        })
    }
}
