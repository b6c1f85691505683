//! Control set geometry, shared control trajectories and cost weights.

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{l2_norm_time, sup_norm_time, TimeGrid};

/// Axis-aligned box `[lo, hi]` in control space.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl ControlSet {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                what: "control set bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::InvalidParameter("control dimension must be >= 1".into()));
        }
        for (a, b) in lo.iter().zip(hi.iter()) {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(Error::InvalidParameter(format!(
                    "control box needs finite lo <= hi, got [{a}, {b}]"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// The cube `[lo, hi]^m`.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, lo), DVector::from_element(dim, hi))
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn contains(&self, v: &DVector<f64>) -> bool {
        v.len() == self.dim()
            && v
                .iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(x, (a, b))| *a <= *x && *x <= *b)
    }

    /// Euclidean projection onto the box, i.e. a componentwise clamp.
    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            v.len(),
            v.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .map(|(x, (a, b))| x.clamp(*a, *b)),
        )
    }

    /// `sup |u|` over the box.
    pub fn max_norm(&self) -> f64 {
        self.lo
            .iter()
            .zip(self.hi.iter())
            .map(|(a, b)| {
                let c = a.abs().max(b.abs());
                c * c
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Largest absolute coordinate over a sub-range of components.
    pub(crate) fn max_abs_in(&self, range: std::ops::Range<usize>) -> f64 {
        range
            .map(|k| self.lo[k].abs().max(self.hi[k].abs()))
            .fold(0.0, f64::max)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo
                .iter()
                .zip(self.hi.iter())
                .map(|(a, b)| if a == b { *a } else { rng.random_range(*a..=*b) }),
        )
    }
}

/// Free function form of [`ControlSet::project`].
pub fn project_onto_control_set(v: &DVector<f64>, set: &ControlSet) -> DVector<f64> {
    set.project(v)
}

/// Shared control `u(t)`, stored at the grid nodes and linearly interpolated
/// in between.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    values: Vec<DVector<f64>>,
}

impl ControlTrajectory {
    pub fn new(values: Vec<DVector<f64>>, grid: &TimeGrid) -> Result<Self> {
        if values.len() != grid.num_nodes() {
            return Err(Error::DimensionMismatch {
                what: "control node count",
                expected: grid.num_nodes(),
                got: values.len(),
            });
        }
        let m = values[0].len();
        if let Some(bad) = values.iter().find(|v| v.len() != m) {
            return Err(Error::DimensionMismatch {
                what: "control dimension",
                expected: m,
                got: bad.len(),
            });
        }
        Ok(Self { values })
    }

    pub fn constant(value: DVector<f64>, grid: &TimeGrid) -> Self {
        Self {
            values: vec![value; grid.num_nodes()],
        }
    }

    pub fn zeros(dim: usize, grid: &TimeGrid) -> Self {
        Self::constant(DVector::zeros(dim), grid)
    }

    /// Independent uniform draws in the box at every node.
    pub fn random_in<R: Rng + ?Sized>(set: &ControlSet, grid: &TimeGrid, rng: &mut R) -> Self {
        Self {
            values: (0..grid.num_nodes()).map(|_| set.sample(rng)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn at_node(&self, i: usize) -> &DVector<f64> {
        &self.values[i]
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.values
    }

    /// Value on the refined lattice; half-nodes average their neighbours.
    pub fn at_sample(&self, j: usize) -> DVector<f64> {
        if j.is_multiple_of(2) {
            self.values[j / 2].clone()
        } else {
            let i = j / 2;
            (&self.values[i] + &self.values[i + 1]) * 0.5
        }
    }

    /// Piecewise-linear evaluation at an arbitrary `t` in `[0, T]`.
    pub fn eval(&self, t: f64, grid: &TimeGrid) -> DVector<f64> {
        let s = (t / grid.spacing()).clamp(0.0, grid.steps() as f64);
        let i = (s.floor() as usize).min(grid.steps() - 1);
        let theta = s - i as f64;
        &self.values[i] * (1.0 - theta) + &self.values[i + 1] * theta
    }

    pub fn is_within(&self, set: &ControlSet) -> bool {
        self.values.iter().all(|v| set.contains(v))
    }

    pub fn project_onto(&self, set: &ControlSet) -> Self {
        Self {
            values: self.values.iter().map(|v| set.project(v)).collect(),
        }
    }

    pub fn difference(&self, other: &ControlTrajectory) -> Vec<DVector<f64>> {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect()
    }

    /// `u + s * dir`, nodewise.
    pub fn offset(&self, dir: &[DVector<f64>], s: f64) -> Self {
        Self {
            values: self
                .values
                .iter()
                .zip(dir)
                .map(|(a, d)| a + d * s)
                .collect(),
        }
    }

    pub fn l2_norm(&self, grid: &TimeGrid) -> f64 {
        l2_norm_time(&self.values, grid)
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm_time(&self.values)
    }
}

/// Weights of the data-fit and control-effort terms of the cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    alpha: f64,
    beta: f64,
}

impl CostWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {alpha}")));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_examples() {
        let set = ControlSet::uniform(2, -1.0, 1.0).unwrap();
        let inside = DVector::from_vec(vec![0.3, -0.9]);
        assert_eq!(set.project(&inside), inside);
        let out = project_onto_control_set(&DVector::from_vec(vec![2.0, -3.0]), &set);
        assert_eq!(out, DVector::from_vec(vec![1.0, -1.0]));
    }

    #[test]
    fn projection_is_nearest_point() {
        let set = ControlSet::new(
            DVector::from_vec(vec![-1.0, 0.0, 2.0]),
            DVector::from_vec(vec![1.0, 0.5, 4.0]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = DVector::from_fn(3, |_, _| rng.random_range(-6.0..6.0));
            let r = set.project(&v);
            let d = (&r - &v).norm();
            for _ in 0..1000 {
                let q = set.sample(&mut rng);
                assert!(d <= (&q - &v).norm() + 1e-15);
            }
        }
    }

    #[test]
    fn invalid_boxes_and_weights_are_rejected() {
        assert!(ControlSet::uniform(2, 1.0, -1.0).is_err());
        assert!(ControlSet::new(DVector::zeros(2), DVector::zeros(3)).is_err());
        assert!(CostWeights::new(1.0, 0.0).is_err());
        assert!(CostWeights::new(-1.0, 1.0).is_err());
        assert!(CostWeights::new(0.0, 1e-3).is_ok());
    }

    #[test]
    fn interpolation_matches_nodes_and_midpoints() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let u = ControlTrajectory::new(
            (0..5).map(|i| DVector::from_element(1, i as f64)).collect(),
            &g,
        )
        .unwrap();
        assert_eq!(u.at_sample(3)[0], 1.5);
        assert!((u.eval(0.3, &g)[0] - 1.2).abs() < 1e-14);
        assert_eq!(u.eval(1.0, &g)[0], 4.0);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
            let set = ControlSet::new(
                DVector::from_vec(vec![-1.0, -0.5, 0.0]),
                DVector::from_vec(vec![1.0, 2.0, 0.0]),
            ).unwrap();
            let v = DVector::from_vec(vec![a, b, c]);
            let once = set.project(&v);
            prop_assert!(set.contains(&once));
            prop_assert_eq!(set.project(&once), once);
        }
    }
}
