//! Input ensembles, target maps and the empirical measure over members.
//!
//! The probability measure on inputs is the uniform empirical measure over
//! `M` sampled trajectories, so every expectation is an exact finite average.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::ControlTrajectory;
use crate::dynamics;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::models::DynamicsModel;

/// How a sampled input was generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierDescriptor {
    pub order: usize,
    pub bound: f64,
    pub seed: u64,
}

impl FourierDescriptor {
    /// Per-channel sup bound `R (1 + 2K)` implied by the truncated series.
    pub fn channel_bound(&self) -> f64 {
        self.bound * (1.0 + 2.0 * self.order as f64)
    }
}

/// One input trajectory, pre-sampled at nodes and half-nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSignal {
    samples: Vec<DVector<f64>>,
    generator: Option<FourierDescriptor>,
}

impl InputSignal {
    pub fn new(samples: Vec<DVector<f64>>, grid: &TimeGrid) -> Result<Self> {
        if samples.len() != grid.num_samples() {
            return Err(Error::DimensionMismatch {
                what: "input sample count",
                expected: grid.num_samples(),
                got: samples.len(),
            });
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(Error::Format("input channels differ between samples".into()));
        }
        Ok(Self {
            samples,
            generator: None,
        })
    }

    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> DVector<f64>) -> Self {
        Self {
            samples: grid.sample_times().map(f).collect(),
            generator: None,
        }
    }

    pub fn constant(grid: &TimeGrid, value: DVector<f64>) -> Self {
        Self {
            samples: vec![value; grid.num_samples()],
            generator: None,
        }
    }

    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self::constant(grid, DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn at_sample(&self, j: usize) -> &DVector<f64> {
        &self.samples[j]
    }

    pub fn at_node(&self, i: usize) -> &DVector<f64> {
        &self.samples[2 * i]
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn generator(&self) -> Option<&FourierDescriptor> {
        self.generator.as_ref()
    }

    /// `max_t |w(t)|` (Euclidean over channels).
    pub fn sup_norm(&self) -> f64 {
        self.samples.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }

    /// `max_t max_c |w_c(t)|`.
    pub fn channel_sup(&self) -> f64 {
        self.samples.iter().map(|s| s.amax()).fold(0.0, f64::max)
    }

    /// `w + eps * h`; the generator tag is dropped.
    pub fn perturbed(&self, h: &InputSignal, eps: f64) -> InputSignal {
        InputSignal {
            samples: self
                .samples
                .iter()
                .zip(&h.samples)
                .map(|(a, b)| a + b * eps)
                .collect(),
            generator: None,
        }
    }
}

/// Draws `count` inputs with `d` channels, each channel a truncated Fourier
/// series of order `order` with i.i.d. coefficients uniform in `[-bound, bound]`.
pub fn sample_inputs(
    d: usize,
    grid: &TimeGrid,
    order: usize,
    bound: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<InputSignal>> {
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "coefficient bound must be positive, got {bound}"
        )));
    }
    if count == 0 || d == 0 {
        return Err(Error::InvalidParameter(
            "need at least one member and one channel".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let descriptor = FourierDescriptor {
        order,
        bound,
        seed,
    };
    let horizon = grid.horizon();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        // coeffs[c] = (a0, [(a_k, b_k)])
        let coeffs: Vec<(f64, Vec<(f64, f64)>)> = (0..d)
            .map(|_| {
                let a0 = rng.random_range(-bound..=bound);
                let harmonics = (1..=order)
                    .map(|_| {
                        let a = rng.random_range(-bound..=bound);
                        let b = rng.random_range(-bound..=bound);
                        (a, b)
                    })
                    .collect();
                (a0, harmonics)
            })
            .collect();
        let samples = grid
            .sample_times()
            .map(|t| {
                DVector::from_iterator(
                    d,
                    coeffs.iter().map(|(a0, harmonics)| {
                        let phase = 2.0 * std::f64::consts::PI * t / horizon;
                        harmonics
                            .iter()
                            .enumerate()
                            .fold(*a0, |acc, (k, (a, b))| {
                                let w = phase * (k + 1) as f64;
                                acc + a * w.cos() + b * w.sin()
                            })
                    }),
                )
            })
            .collect();
        out.push(InputSignal {
            samples,
            generator: Some(descriptor),
        });
    }
    Ok(out)
}

/// The input-to-target map being learned.
#[derive(Clone)]
pub enum TargetMap {
    /// Targets produced by a frozen model under a frozen control.
    Teacher {
        model: Arc<dyn DynamicsModel>,
        control: ControlTrajectory,
    },
    /// `F(w)(t) = L w(t)`.
    PointwiseLinear(DMatrix<f64>),
    /// Trailing average over a window of length `window`, reflected at `t = 0`.
    MovingAverage { window: f64 },
}

impl std::fmt::Debug for TargetMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetMap::Teacher { model, .. } => write!(f, "Teacher({})", model.kind()),
            TargetMap::PointwiseLinear(m) => write!(f, "PointwiseLinear({}x{})", m.nrows(), m.ncols()),
            TargetMap::MovingAverage { window } => write!(f, "MovingAverage({window})"),
        }
    }
}

impl TargetMap {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            TargetMap::Teacher { model, .. } => model.dims().output,
            TargetMap::PointwiseLinear(m) => m.nrows(),
            TargetMap::MovingAverage { .. } => input_dim,
        }
    }

    fn validate(&self, input_dim: usize, grid: &TimeGrid) -> Result<()> {
        match self {
            TargetMap::Teacher { model, control } => {
                let dims = model.dims();
                if dims.input != input_dim {
                    return Err(Error::DimensionMismatch {
                        what: "teacher input dimension",
                        expected: dims.input,
                        got: input_dim,
                    });
                }
                if control.dim() != dims.control || control.num_nodes() != grid.num_nodes() {
                    return Err(Error::DimensionMismatch {
                        what: "teacher control",
                        expected: dims.control,
                        got: control.dim(),
                    });
                }
            }
            TargetMap::PointwiseLinear(m) => {
                if m.ncols() != input_dim {
                    return Err(Error::DimensionMismatch {
                        what: "pointwise target matrix columns",
                        expected: input_dim,
                        got: m.ncols(),
                    });
                }
            }
            TargetMap::MovingAverage { window } => {
                if !(*window > 0.0 && *window <= grid.horizon()) {
                    return Err(Error::InvalidParameter(format!(
                        "moving-average window must lie in (0, T], got {window}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Target trajectory on the refined lattice.
    pub fn eval(&self, input: &InputSignal, grid: &TimeGrid) -> Result<Vec<DVector<f64>>> {
        match self {
            TargetMap::Teacher { model, control } => {
                let x = dynamics::forward_solve(model.as_ref(), control, input, grid)?;
                let c = model.readout();
                Ok(x.samples().iter().map(|xi| c * xi).collect())
            }
            TargetMap::PointwiseLinear(m) => Ok(input.samples().iter().map(|w| m * w).collect()),
            TargetMap::MovingAverage { window } => Ok(moving_average(input.samples(), *window, grid)),
        }
    }

    /// Directional derivative `dF(w)[h]` on the refined lattice.
    pub fn derivative(
        &self,
        input: &InputSignal,
        h: &InputSignal,
        grid: &TimeGrid,
    ) -> Result<Vec<DVector<f64>>> {
        match self {
            TargetMap::Teacher { model, control } => {
                let x = dynamics::forward_solve(model.as_ref(), control, input, grid)?;
                let z = dynamics::variational_solve_state(model.as_ref(), control, input, &x, h, grid)?;
                let c = model.readout();
                Ok(z.samples().iter().map(|zi| c * zi).collect())
            }
            // Linear maps are their own derivative.
            TargetMap::PointwiseLinear(_) | TargetMap::MovingAverage { .. } => self.eval(h, grid),
        }
    }
}

fn moving_average(samples: &[DVector<f64>], window: f64, grid: &TimeGrid) -> Vec<DVector<f64>> {
    let dt = 0.5 * grid.spacing();
    let d = samples[0].len();
    // Running trapezoid integral of the piecewise-linear interpolant.
    let mut cumulative = Vec::with_capacity(samples.len());
    cumulative.push(DVector::zeros(d));
    for j in 1..samples.len() {
        let next = &cumulative[j - 1] + (&samples[j - 1] + &samples[j]) * (0.5 * dt);
        cumulative.push(next);
    }
    let last = samples.len() - 1;
    // Antiderivative extended as an odd function, i.e. w reflected about t = 0.
    let primitive = |t: f64| -> DVector<f64> {
        let (s, sign) = if t < 0.0 { (-t, -1.0) } else { (t, 1.0) };
        let pos = (s / dt).min(last as f64);
        let j = (pos.floor() as usize).min(last.saturating_sub(1));
        let tau = pos - j as f64;
        let partial = &samples[j] * (tau * dt)
            + (&samples[j + 1] - &samples[j]) * (0.5 * tau * tau * dt);
        (&cumulative[j] + partial) * sign
    };
    grid.sample_times()
        .map(|t| (primitive(t) - primitive(t - window)) / window)
        .collect()
}

/// One ensemble member with its target trajectory.
#[derive(Debug, Clone)]
pub struct Member {
    pub input: InputSignal,
    pub target: Vec<DVector<f64>>,
}

/// Finite ensemble sharing one grid, weighted uniformly.
#[derive(Debug, Clone)]
pub struct EnsembleBatch {
    grid: TimeGrid,
    members: Vec<Member>,
    target_map: Option<TargetMap>,
}

/// Evaluates the target map on every input.
pub fn build_targets(
    map: TargetMap,
    inputs: Vec<InputSignal>,
    grid: &TimeGrid,
) -> Result<EnsembleBatch> {
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("ensemble needs at least one member".into()));
    }
    let d = inputs[0].dim();
    map.validate(d, grid)?;
    let members = inputs
        .into_iter()
        .map(|input| {
            if input.samples.len() != grid.num_samples() || input.dim() != d {
                return Err(Error::Format("ensemble inputs must share one grid".into()));
            }
            let target = map.eval(&input, grid)?;
            Ok(Member { input, target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleBatch {
        grid: *grid,
        members,
        target_map: Some(map),
    })
}

impl EnsembleBatch {
    /// Batch with externally supplied targets (no map available for derivatives).
    pub fn from_members(members: Vec<Member>, grid: &TimeGrid) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("ensemble needs at least one member".into()));
        }
        let (d, dout) = (members[0].input.dim(), members[0].target[0].len());
        for m in &members {
            if m.input.samples.len() != grid.num_samples()
                || m.target.len() != grid.num_samples()
                || m.input.dim() != d
                || m.target.iter().any(|y| y.len() != dout)
            {
                return Err(Error::Format("ensemble members must share one grid and shape".into()));
            }
        }
        Ok(Self {
            grid: *grid,
            members,
            target_map: None,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn member(&self, k: usize) -> &Member {
        &self.members[k]
    }

    pub fn target_map(&self) -> Option<&TargetMap> {
        self.target_map.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.members[0].target[0].len()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.members.len() as f64
    }

    /// Largest `|F(w)(t)|` over members and samples.
    pub fn target_sup(&self) -> f64 {
        self.members
            .iter()
            .flat_map(|m| m.target.iter().map(|y| y.norm()))
            .fold(0.0, f64::max)
    }

    /// Per-channel input bound: the generator bound when every member carries
    /// one, otherwise the observed maximum.
    pub fn input_channel_bound(&self) -> f64 {
        let declared: Option<Vec<f64>> = self
            .members
            .iter()
            .map(|m| m.input.generator().map(FourierDescriptor::channel_bound))
            .collect();
        match declared {
            Some(bounds) => bounds.into_iter().fold(0.0, f64::max),
            None => self
                .members
                .iter()
                .map(|m| m.input.channel_sup())
                .fold(0.0, f64::max),
        }
    }

    /// Dumps one row per (member, sample point): `member,t,w_1..w_d,y_1..y_d'`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["member".to_string(), "t".to_string()];
        header.extend((1..=self.input_dim()).map(|c| format!("w{c}")));
        header.extend((1..=self.output_dim()).map(|c| format!("y{c}")));
        w.write_record(&header)?;
        for (k, m) in self.members.iter().enumerate() {
            for (j, t) in self.grid.sample_times().enumerate() {
                let mut row = vec![k.to_string(), t.to_string()];
                row.extend(m.input.at_sample(j).iter().map(f64::to_string));
                row.extend(m.target[j].iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reloads a batch written by [`EnsembleBatch::write_csv`].
    pub fn read_csv<R: Read>(input: R, grid: &TimeGrid) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let d = header.iter().filter(|h| h.starts_with('w')).count();
        let dout = header.iter().filter(|h| h.starts_with('y')).count();
        if header.len() != 2 + d + dout || d == 0 || dout == 0 {
            return Err(Error::Format(format!("unexpected ensemble header: {header:?}")));
        }
        let mut rows: Vec<(usize, f64, DVector<f64>, DVector<f64>)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))
            };
            let member = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("bad member id {:?}: {e}", &rec[0])))?;
            let t = parse(&rec[1])?;
            let w = (0..d).map(|c| parse(&rec[2 + c])).collect::<Result<Vec<_>>>()?;
            let y = (0..dout).map(|c| parse(&rec[2 + d + c])).collect::<Result<Vec<_>>>()?;
            rows.push((member, t, DVector::from_vec(w), DVector::from_vec(y)));
        }
        let count = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let mut inputs = vec![Vec::new(); count];
        let mut targets = vec![Vec::new(); count];
        for (member, t, w, y) in rows {
            let j = inputs[member].len();
            if j >= grid.num_samples() || (grid.sample_time(j) - t).abs() > 1e-9 * (1.0 + t.abs()) {
                return Err(Error::Format(format!(
                    "member {member}: sample {j} at t = {t} does not match the grid"
                )));
            }
            inputs[member].push(w);
            targets[member].push(y);
        }
        let members = inputs
            .into_iter()
            .zip(targets)
            .map(|(w, y)| {
                Ok(Member {
                    input: InputSignal::new(w, grid)?,
                    target: y,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members, grid)
    }
}

/// Empirical expectation: the arithmetic mean in member order.
pub fn expectation(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "expectation over an empty ensemble");
    values.iter().sum::<f64>() / values.len() as f64
}
