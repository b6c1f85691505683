use nalgebra::{DMatrix, DVector};

use super::{BoundsDomain, BoundsSource, Dims, DynamicsModel, ModelBounds};
use crate::ensemble::InputSignal;
use crate::error::{Error, Result};
use crate::linalg::{logistic, softplus};

/// Continuous-time selective SSM with input-dependent gates.
///
/// Block `i` (one per input channel) evolves as
/// `dx_i/dt = s_i(t) (diag(a_i) x_i + (P w(t)) w_i(t))` with the gate
/// `s_i = softplus((g_i . w(t) + c_i) / delta)`.
///
/// Control layout, `m = 2 N_s d + d^2 + d`:
/// `[a (N_s d, channel-major) | P (N_s x d, column-major) | g (d x d, one row per channel) | c (d)]`.
#[derive(Debug, Clone)]
pub struct SelectiveS6 {
    ns: usize,
    d: usize,
    delta: f64,
    c: DMatrix<f64>,
    x0: DVector<f64>,
}

/// Gate value and its first two derivatives in the pre-activation.
#[derive(Debug, Clone, Copy)]
struct Gate {
    s: f64,
    ds: f64,
    d2s: f64,
}

impl SelectiveS6 {
    pub fn new(ns: usize, d: usize, delta: f64, c: DMatrix<f64>, x0: DVector<f64>) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::InvalidParameter(format!("gate sharpness must be > 0, got {delta}")));
        }
        let n = ns * d;
        if n == 0 {
            return Err(Error::InvalidParameter("state and input dimensions must be >= 1".into()));
        }
        if c.ncols() != n || x0.len() != n {
            return Err(Error::DimensionMismatch {
                what: "selective model readout / initial state",
                expected: n,
                got: if c.ncols() != n { c.ncols() } else { x0.len() },
            });
        }
        Ok(Self { ns, d, delta, c, x0 })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn n(&self) -> usize {
        self.ns * self.d
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let n = self.n();
        (n, 2 * n, 2 * n + self.d * self.d)
    }

    /// `softplus(z / delta)`.
    pub fn gate_fn(&self, z: f64) -> f64 {
        softplus(z / self.delta)
    }

    fn gate(&self, z: f64) -> Gate {
        let l = logistic(z / self.delta);
        Gate {
            s: softplus(z / self.delta),
            ds: l / self.delta,
            d2s: l * (1.0 - l) / (self.delta * self.delta),
        }
    }

    /// `g_i . xi + c_i` for the gate parameters stored in `u`.
    fn preactivation(&self, u: &DVector<f64>, i: usize, xi: &DVector<f64>) -> f64 {
        let (_, og, oc) = self.offsets();
        let g = &u.as_slice()[og + i * self.d..og + (i + 1) * self.d];
        g.iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>() + u[oc + i]
    }

    fn gates(&self, u: &DVector<f64>, xi: &DVector<f64>) -> Vec<Gate> {
        (0..self.d).map(|i| self.gate(self.preactivation(u, i, xi))).collect()
    }

    /// `P xi`.
    fn projection(&self, u: &DVector<f64>, xi: &DVector<f64>) -> DVector<f64> {
        let (ob, og, _) = self.offsets();
        DMatrix::from_column_slice(self.ns, self.d, &u.as_slice()[ob..og]) * xi
    }
}

impl DynamicsModel for SelectiveS6 {
    fn kind(&self) -> &'static str {
        "s6"
    }

    fn dims(&self) -> Dims {
        Dims {
            state: self.n(),
            input: self.d,
            output: self.c.nrows(),
            control: 2 * self.n() + self.d * self.d + self.d,
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

    fn a(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let gates = self.gates(u, xi);
        DMatrix::from_diagonal(&DVector::from_fn(self.n(), |k, _| u[k] * gates[k / self.ns].s))
    }

    fn b(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let gates = self.gates(u, xi);
        let pxi = self.projection(u, xi);
        DVector::from_fn(self.n(), |k, _| {
            let i = k / self.ns;
            pxi[k % self.ns] * xi[i] * gates[i].s
        })
    }

    fn da(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let gates = self.gates(u, xi);
        let sv: Vec<f64> = (0..self.d).map(|i| self.preactivation(v, i, xi)).collect();
        DMatrix::from_diagonal(&DVector::from_fn(self.n(), |k, _| {
            let i = k / self.ns;
            v[k] * gates[i].s + u[k] * gates[i].ds * sv[i]
        }))
    }

    fn db(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let gates = self.gates(u, xi);
        let sv: Vec<f64> = (0..self.d).map(|i| self.preactivation(v, i, xi)).collect();
        let (pxi, vxi) = (self.projection(u, xi), self.projection(v, xi));
        DVector::from_fn(self.n(), |k, _| {
            let (i, r) = (k / self.ns, k % self.ns);
            xi[i] * (vxi[r] * gates[i].s + pxi[r] * gates[i].ds * sv[i])
        })
    }

    fn d2a(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
        let gates = self.gates(u, xi);
        let sv: Vec<f64> = (0..self.d).map(|i| self.preactivation(v, i, xi)).collect();
        DMatrix::from_diagonal(&DVector::from_fn(self.n(), |k, _| {
            let i = k / self.ns;
            2.0 * v[k] * gates[i].ds * sv[i] + u[k] * gates[i].d2s * sv[i] * sv[i]
        }))
    }

    fn d2b(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let gates = self.gates(u, xi);
        let sv: Vec<f64> = (0..self.d).map(|i| self.preactivation(v, i, xi)).collect();
        let (pxi, vxi) = (self.projection(u, xi), self.projection(v, xi));
        DVector::from_fn(self.n(), |k, _| {
            let (i, r) = (k / self.ns, k % self.ns);
            xi[i] * (2.0 * vxi[r] * gates[i].ds * sv[i] + pxi[r] * gates[i].d2s * sv[i] * sv[i])
        })
    }

    fn da_input(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>, eta: &DVector<f64>) -> DMatrix<f64> {
        let gates = self.gates(u, xi);
        let (_, og, _) = self.offsets();
        let dz: Vec<f64> = (0..self.d)
            .map(|i| (0..self.d).map(|c| u[og + i * self.d + c] * eta[c]).sum())
            .collect();
        DMatrix::from_diagonal(&DVector::from_fn(self.n(), |k, _| {
            let i = k / self.ns;
            u[k] * gates[i].ds * dz[i]
        }))
    }

    fn db_input(&self, _t: f64, xi: &DVector<f64>, u: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
        let gates = self.gates(u, xi);
        let (_, og, _) = self.offsets();
        let (pxi, peta) = (self.projection(u, xi), self.projection(u, eta));
        DVector::from_fn(self.n(), |k, _| {
            let (i, r) = (k / self.ns, k % self.ns);
            let dz: f64 = (0..self.d).map(|c| u[og + i * self.d + c] * eta[c]).sum();
            (peta[r] * xi[i] + pxi[r] * eta[i]) * gates[i].s + pxi[r] * xi[i] * gates[i].ds * dz
        })
    }

    fn pairing_gradient(
        &self,
        _t: f64,
        xi: &DVector<f64>,
        u: &DVector<f64>,
        x: &DVector<f64>,
        p: &DVector<f64>,
    ) -> DVector<f64> {
        let (ob, og, oc) = self.offsets();
        let (ns, d) = (self.ns, self.d);
        let gates = self.gates(u, xi);
        let pxi = self.projection(u, xi);
        let mut g = DVector::zeros(self.dims().control);
        for i in 0..d {
            let gate = gates[i];
            // q_i = p_i . (diag(a_i) x_i + (P xi) xi_i), the gate's cofactor
            let mut q = 0.0;
            for r in 0..ns {
                let k = i * ns + r;
                g[k] = p[k] * x[k] * gate.s;
                q += p[k] * (u[k] * x[k] + pxi[r] * xi[i]);
                for c in 0..d {
                    g[ob + r + ns * c] += xi[i] * gate.s * p[k] * xi[c];
                }
            }
            for c in 0..d {
                g[og + i * d + c] = gate.ds * xi[c] * q;
            }
            g[oc + i] = gate.ds * q;
        }
        g
    }

    fn declared_bounds(&self, domain: &BoundsDomain) -> Option<ModelBounds> {
        let (ob, og, oc) = self.offsets();
        let m = self.dims().control;
        let set = &domain.set;
        let (a_max, b_max) = (set.max_abs_in(0..ob), set.max_abs_in(ob..og));
        let (g_max, c_max) = (set.max_abs_in(og..oc), set.max_abs_in(oc..m));
        let wn = domain.input_norm_bound(self.d);
        let w1 = domain.input_l1_bound(self.d);

        let z_max = g_max * w1 + c_max;
        let s_max = softplus(z_max / self.delta);
        let s1 = logistic(z_max / self.delta) / self.delta;
        let s2 = 0.25 / (self.delta * self.delta);
        // |(v_g, v_c) . (xi, 1)| <= |(v_g, v_c)| * sq
        let sq = (wn * wn + 1.0).sqrt();
        let proj_max = (self.ns as f64).sqrt() * b_max * w1;

        let gb_p = wn * s_max;
        let gb_q = proj_max * s1 * sq;
        Some(ModelBounds {
            m_a: a_max * s_max,
            m_b: proj_max * s_max * wn,
            g_a: (s_max * s_max + a_max * a_max * s1 * s1 * sq * sq).sqrt(),
            g_b: wn * (gb_p * gb_p + gb_q * gb_q).sqrt(),
            h_a: s1 * sq + a_max * s2 * sq * sq,
            h_b: wn * (wn * s1 * sq + proj_max * s2 * sq * sq),
            m_target: domain.target_sup,
            x0_sup: domain.x0_sup,
            source: BoundsSource::Analytic,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing;
    use super::super::{fd_derivative_fallback, ModelSpec, Readout};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(delta: f64) -> SelectiveS6 {
        SelectiveS6::new(2, 2, delta, DMatrix::identity(4, 4), DVector::zeros(4)).unwrap()
    }

    #[test]
    fn control_dimension() {
        let m = ModelSpec::SelectiveS6 {
            state: 4,
            input: 2,
            state_per_channel: 2,
            delta: 1.0,
            readout: Readout::Identity,
            x0: None,
        }
        .build()
        .unwrap();
        assert_eq!(m.dims().control, 14);
    }

    #[test]
    fn zero_gates_give_ln2() {
        let m = model(1.0);
        let mut u = DVector::zeros(14);
        u.rows_mut(0, 4).fill(1.0);
        let xi = DVector::from_vec(vec![0.4, -0.9]);
        let a = m.a(0.0, &xi, &u);
        for k in 0..4 {
            assert!((a[(k, k)] - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_is_positive_and_increasing() {
        let m = model(0.3);
        let mut prev = 0.0;
        for j in -2000..=2000 {
            let s = m.gate_fn(j as f64 * 0.05);
            assert!(s > 0.0 && s > prev, "z = {}", j as f64 * 0.05);
            prev = s;
        }
    }

    #[test]
    fn block_structure_matches_definition() {
        let m = model(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let u = DVector::from_fn(14, |_, _| rng.random_range(-1.0..1.0));
        let xi = DVector::from_vec(vec![0.3, -0.6]);
        let a = m.a(0.0, &xi, &u);
        let b = m.b(0.0, &xi, &u);
        let p = DMatrix::from_column_slice(2, 2, &u.as_slice()[4..8]);
        for i in 0..2 {
            let z = u[8 + 2 * i] * xi[0] + u[9 + 2 * i] * xi[1] + u[12 + i];
            let s = (1.0 + (z / 0.7).exp()).ln();
            let bi = &p * &xi * xi[i] * s;
            for r in 0..2 {
                assert!((a[(2 * i + r, 2 * i + r)] - u[2 * i + r] * s).abs() < 1e-14);
                assert!((b[2 * i + r] - bi[r]).abs() < 1e-14);
            }
        }
        // off-diagonal entries of A are zero
        assert_eq!(a[(0, 1)], 0.0);
        assert_eq!(a[(1, 2)], 0.0);
    }

    #[test]
    fn fallback_matches_analytic_derivative() {
        let m = model(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let u = DVector::from_fn(14, |_, _| rng.random_range(-1.0..1.0));
            let v = DVector::from_fn(14, |_, _| rng.random_range(-1.0..1.0));
            let xi = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let (fa, _) = fd_derivative_fallback(&m, 0.0, &xi, &u, &v, 1e-5);
            let da = m.da(0.0, &xi, &u, &v);
            assert!((&da - fa).norm() <= 1e-6 * da.norm());
        }
    }

    #[test]
    fn interface_invariants() {
        for delta in [1.0, 0.5] {
            let m = model(delta);
            testing::check_linearity(&m, 0.5, 7);
            testing::check_derivatives_against_fd(&m, 0.5, 8, 1e-6);
            testing::check_declared_bounds(&m, 0.5, 9);
        }
    }

    #[test]
    fn declared_bounds_dominate_sampled_estimates() {
        let m = model(1.0);
        let dom = testing::domain(14, 0.5);
        let declared = m.declared_bounds(&dom).unwrap();
        let sampled = super::super::estimate_bounds_sampled(&m, &dom, 50, 1.0, 3).unwrap();
        // the sampled elementwise sups are attained, so they never exceed the analytic sup
        assert!(sampled.m_a <= declared.m_a * (1.0 + 1e-12));
        assert!(sampled.m_b <= declared.m_b * (1.0 + 1e-12));
    }
}
