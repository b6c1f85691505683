//! Uniform time grid, sampled trajectories and time-domain norms.
//!
//! Every trajectory lives on the refined sample lattice `t_j = j * T / (2N)`,
//! `j = 0..=2N`: even indices are the grid nodes, odd indices the half-nodes
//! used as the midpoint stages of the fixed-step RK4 sweeps.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 steps, got {steps}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn spacing(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn num_nodes(&self) -> usize {
        self.steps + 1
    }

    /// Number of points on the refined lattice (nodes plus half-nodes).
    pub fn num_samples(&self) -> usize {
        2 * self.steps + 1
    }

    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.horizon / self.steps as f64
        }
    }

    /// Midpoint `t_{i+1/2}` of interval `i`.
    pub fn half_node(&self, i: usize) -> f64 {
        debug_assert!(i < self.steps);
        (i as f64 + 0.5) * self.horizon / self.steps as f64
    }

    /// Time of refined sample `j`.
    pub fn sample_time(&self, j: usize) -> f64 {
        if j.is_multiple_of(2) {
            self.node(j / 2)
        } else {
            self.half_node(j / 2)
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |i| self.node(i))
    }

    pub fn sample_times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.num_samples()).map(move |j| self.sample_time(j))
    }

    /// Composite trapezoid weights over the nodes.
    pub fn trapezoid_weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i == self.steps {
            0.5 * h
        } else {
            h
        }
    }

    /// Trapezoid rule for node samples of a scalar function.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.num_nodes());
        values
            .iter()
            .enumerate()
            .map(|(i, v)| self.trapezoid_weight(i) * v)
            .sum()
    }
}

/// Pointwise magnitude of a path sample.
pub trait Magnitude {
    fn magnitude(&self) -> f64;
}

impl Magnitude for f64 {
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl Magnitude for DVector<f64> {
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

/// Trapezoidal approximation of `(int_0^T |f(t)|^2 dt)^(1/2)` from node values.
pub fn l2_norm_time<T: Magnitude>(f: &[T], grid: &TimeGrid) -> f64 {
    assert_eq!(f.len(), grid.num_nodes(), "path must be sampled at every node");
    f.iter()
        .enumerate()
        .map(|(i, v)| {
            let m = v.magnitude();
            grid.trapezoid_weight(i) * m * m
        })
        .sum::<f64>()
        .sqrt()
}

/// Maximum of `|f|` over the samples.
pub fn sup_norm_time<T: Magnitude>(f: &[T]) -> f64 {
    f.iter().map(Magnitude::magnitude).fold(0.0, f64::max)
}

/// Vector-valued trajectory on the refined sample lattice (`2N + 1` points).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    values: Vec<DVector<f64>>,
}

/// Per-member forward state `x(., w)`.
pub type StatePath = SampledPath;
/// Per-member adjoint `p(., w)`; vanishes at the terminal node.
pub type AdjointPath = SampledPath;

impl SampledPath {
    pub fn new(values: Vec<DVector<f64>>, grid: &TimeGrid) -> Result<Self> {
        if values.len() != grid.num_samples() {
            return Err(Error::DimensionMismatch {
                what: "sampled path length",
                expected: grid.num_samples(),
                got: values.len(),
            });
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize, grid: &TimeGrid) -> Self {
        Self {
            values: vec![DVector::zeros(dim); grid.num_samples()],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    pub fn at_node(&self, i: usize) -> &DVector<f64> {
        &self.values[2 * i]
    }

    pub fn at_sample(&self, j: usize) -> &DVector<f64> {
        &self.values[j]
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn node_values(&self) -> Vec<DVector<f64>> {
        self.values.iter().step_by(2).cloned().collect()
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.values.last().expect("path is never empty")
    }

    /// Max of `|x(t)|` over nodes and half-nodes.
    pub fn sup_norm(&self) -> f64 {
        sup_norm_time(&self.values)
    }

    /// Sup-norm distance to another path on the same lattice.
    pub fn sup_distance(&self, other: &SampledPath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn into_values(self) -> Vec<DVector<f64>> {
        self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_endpoints_are_exact() {
        let g = TimeGrid::new(0.7, 3).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(3), 0.7);
        assert_eq!(g.sample_time(6), 0.7);
        for i in 0..3 {
            assert!(g.node(i) < g.half_node(i) && g.half_node(i) < g.node(i + 1));
        }
    }

    #[test]
    fn grid_rejects_degenerate_input() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
    }

    #[test]
    fn l2_norm_examples() {
        let g = TimeGrid::new(4.0, 8).unwrap();
        assert_eq!(l2_norm_time(&[0.0; 9], &g), 0.0);
        assert!((l2_norm_time(&[1.0; 9], &g) - 2.0).abs() < 1e-14);

        let g = TimeGrid::new(1.0, 1000).unwrap();
        let f: Vec<f64> = g.nodes().collect();
        assert!((l2_norm_time(&f, &g) - (1.0f64 / 3.0).sqrt()).abs() < 1e-5);
    }

    #[test]
    fn sup_norm_examples() {
        assert_eq!(sup_norm_time(&[0.0; 5]), 0.0);
        assert_eq!(sup_norm_time(&[0.0, 0.0, -5.0, 1.0]), 5.0);
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let f: Vec<f64> = g
            .nodes()
            .map(|t| (2.0 * std::f64::consts::PI * t).sin())
            .collect();
        assert!((sup_norm_time(&f) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn refinement_changes_l2_norm_at_second_order() {
        let f = |t: f64| (3.0 * t).sin() + t * t;
        let norm = |n: usize| {
            let g = TimeGrid::new(1.0, n).unwrap();
            let v: Vec<f64> = g.nodes().map(f).collect();
            l2_norm_time(&v, &g)
        };
        let d1 = (norm(40) - norm(80)).abs();
        let d2 = (norm(80) - norm(160)).abs();
        let ratio = d1 / d2;
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    proptest! {
        #[test]
        fn l2_norm_is_homogeneous(c in -10.0f64..10.0, seed in 0u64..1000) {
            let g = TimeGrid::new(2.0, 17).unwrap();
            let f: Vec<f64> = (0..g.num_nodes())
                .map(|i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 13.0 - 3.0)
                .collect();
            let scaled: Vec<f64> = f.iter().map(|v| c * v).collect();
            let lhs = l2_norm_time(&scaled, &g);
            let rhs = c.abs() * l2_norm_time(&f, &g);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
        }
    }
}
