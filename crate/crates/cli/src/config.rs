//! Run configuration: one TOML file with sectioned key/value pairs.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use enscontrol::{
    build_targets, declare_or_estimate_bounds, estimate_bounds_sampled, sample_inputs, spectral_norm, BoundsDomain,
    CertificateReport, ControlSet, ControlTrajectory, CostWeights, DynamicsModel, EnsembleBatch, InitialControl,
    InnerConfig, InputSignal, ModelBounds, ModelSpec, MsaConfig, Readout, TargetMap, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub ensemble: EnsembleSection,
    pub weights: WeightsSection,
    pub control_set: ControlSetSection,
    #[serde(default)]
    pub msa: MsaSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    S4,
    S6,
    /// Fixed drift, control entering additively.
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReadoutSpec {
    /// Only `"identity"` is accepted.
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

impl Default for ReadoutSpec {
    fn default() -> Self {
        ReadoutSpec::Named("identity".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_per_channel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub readout: ReadoutSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default = "one")]
    pub members: usize,
    #[serde(default)]
    pub fourier_order: usize,
    #[serde(default = "unit_f64")]
    pub coefficient_bound: f64,
    #[serde(default)]
    pub seed: u64,
    /// Replaces the random Fourier inputs by one constant input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_input: Option<Vec<f64>>,
    pub target: TargetSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSection {
    /// Same architecture as the trained model, frozen at a control drawn
    /// uniformly in the control set.
    Teacher { seed: u64 },
    Linear { matrix: Vec<Vec<f64>> },
    MovingAverage { window: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Value(f64),
    /// `"auto:<kappa>"`: `beta = kappa * beta0`, `kappa > 1`.
    Auto(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub alpha: f64,
    pub beta: BetaSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxBound {
    Scalar(f64),
    PerComponent(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSetSection {
    pub lower: BoxBound,
    pub upper: BoxBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitSpec {
    /// `"zero"` or `"random"` (seeded by `init_seed`).
    Named(String),
    /// Explicit node values, one row per node.
    Nodes(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsaSection {
    pub max_iters: usize,
    pub threshold_sup: f64,
    pub tol_u: f64,
    pub max_inner: usize,
    pub init: InitSpec,
    pub init_seed: u64,
    pub check_descent: bool,
    /// Step size of the gradient baseline; required by `baseline`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    /// Fill the `wall_ms` column (breaks byte-reproducibility of the log).
    pub timing: bool,
}

impl Default for MsaSection {
    fn default() -> Self {
        let d = MsaConfig::default();
        Self {
            max_iters: d.max_iters,
            threshold_sup: d.threshold_sup,
            tol_u: d.inner.tol_u,
            max_inner: d.inner.max_inner,
            init: InitSpec::Named("zero".into()),
            init_seed: 0,
            check_descent: true,
            step_size: None,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundsMode {
    /// Analytic bounds when the model declares them, sampled otherwise.
    Auto,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub mode: BoundsMode,
    pub samples: usize,
    pub safety: f64,
    pub seed: u64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            mode: BoundsMode::Auto,
            samples: 200,
            safety: 1.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub directions: usize,
    pub eps_gradient: f64,
    pub gradient_tol: f64,
    pub eps_variational: f64,
    pub variational_tol: f64,
    /// Accepted range of the remainder ratio under eps-halving.
    pub order_ratio: [f64; 2],
    /// Also feed an all-zero direction to both checks.
    pub zero_direction: bool,
    pub hessian_per_node: usize,
    pub concavity_samples: usize,
    pub pmp_tol: f64,
    pub seed: u64,
}

impl Default for CheckSection {
    fn default() -> Self {
        Self {
            directions: 5,
            eps_gradient: 1e-5,
            gradient_tol: 1e-3,
            eps_variational: 1e-4,
            variational_tol: 1e-3,
            order_ratio: [3.0, 6.0],
            zero_direction: false,
            hessian_per_node: 5,
            concavity_samples: 1000,
            pmp_tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Parent of fresh run directories when `--out` is not given.
    pub dir: PathBuf,
    pub trajectories: bool,
    pub ensemble: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            trajectories: false,
            ensemble: false,
        }
    }
}

fn one() -> usize {
    1
}

fn unit_f64() -> f64 {
    1.0
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Parses and validates; TOML errors carry line/column and field names.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        if !(self.weights.alpha.is_finite() && self.weights.alpha >= 0.0) {
            bail!("weights.alpha must be >= 0, got {}", self.weights.alpha);
        }
        match &self.weights.beta {
            BetaSpec::Value(b) if !(b.is_finite() && *b > 0.0) => bail!("weights.beta must be > 0, got {b}"),
            BetaSpec::Value(_) => {}
            BetaSpec::Auto(s) => {
                parse_auto_beta(s)?;
            }
        }
        if self.msa.max_iters == 0 {
            bail!("msa.max_iters must be >= 1");
        }
        if let Some(eta) = self.msa.step_size {
            if !(eta.is_finite() && eta >= 0.0) {
                bail!("msa.step_size must be >= 0, got {eta}");
            }
        }
        if let InitSpec::Named(s) = &self.msa.init {
            if s != "zero" && s != "random" {
                bail!("msa.init must be \"zero\", \"random\" or a list of node values, got {s:?}");
            }
        }
        if let ReadoutSpec::Named(s) = &self.model.readout {
            if s != "identity" {
                bail!("model.readout must be \"identity\" or a matrix, got {s:?}");
            }
        }
        let [lo, hi] = self.check.order_ratio;
        if !(lo > 0.0 && lo <= hi) {
            bail!("check.order_ratio must be an increasing pair of positive numbers");
        }
        Ok(())
    }

    /// The config with `beta` replaced by its numeric value, as TOML.
    pub fn resolved_toml(&self, beta: f64) -> anyhow::Result<String> {
        let mut c = self.clone();
        c.weights.beta = BetaSpec::Value(beta);
        Ok(toml::to_string(&c)?)
    }
}

/// Parses `"auto:<kappa>"`.
pub fn parse_auto_beta(s: &str) -> anyhow::Result<f64> {
    let kappa: f64 = s
        .strip_prefix("auto:")
        .ok_or_else(|| anyhow!("weights.beta must be a number or \"auto:<kappa>\", got {s:?}"))?
        .trim()
        .parse()
        .with_context(|| format!("weights.beta: bad kappa in {s:?}"))?;
    if !(kappa.is_finite() && kappa > 1.0) {
        bail!("weights.beta: auto factor must be > 1, got {kappa}");
    }
    Ok(kappa)
}

fn matrix(rows: &[Vec<f64>], what: &str) -> anyhow::Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        bail!("{what} must be a non-empty rectangular list of rows");
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

fn required<T: Copy>(v: Option<T>, field: &str, kind: ModelKind) -> anyhow::Result<T> {
    v.ok_or_else(|| anyhow!("model.{field} is required for kind {kind:?}"))
}

impl ModelSection {
    pub fn spec(&self) -> anyhow::Result<ModelSpec> {
        let readout = match &self.readout {
            ReadoutSpec::Named(_) => Readout::Identity,
            ReadoutSpec::Matrix(rows) => Readout::Matrix(matrix(rows, "model.readout")?),
        };
        let x0 = self.x0.as_ref().map(|v| DVector::from_column_slice(v));
        let k = self.kind;
        Ok(match k {
            ModelKind::Linear => ModelSpec::Linear {
                state: required(self.state, "state", k)?,
                input: required(self.input, "input", k)?,
                readout,
                x0,
            },
            ModelKind::S4 => ModelSpec::DiagS4 {
                state: required(self.state, "state", k)?,
                input: required(self.input, "input", k)?,
                state_per_channel: required(self.state_per_channel, "state_per_channel", k)?,
                readout,
                x0,
            },
            ModelKind::S6 => ModelSpec::SelectiveS6 {
                state: required(self.state, "state", k)?,
                input: required(self.input, "input", k)?,
                state_per_channel: required(self.state_per_channel, "state_per_channel", k)?,
                delta: required(self.delta, "delta", k)?,
                readout,
                x0,
            },
            ModelKind::Affine => {
                let field = |m: &Option<Vec<Vec<f64>>>, name: &str| {
                    m.as_deref()
                        .ok_or_else(|| anyhow!("model.{name} is required for kind Affine"))
                        .and_then(|rows| matrix(rows, &format!("model.{name}")))
                };
                ModelSpec::Affine {
                    a0: field(&self.a0, "a0")?,
                    g: field(&self.g, "g")?,
                    e: field(&self.e, "e")?,
                    readout,
                    x0,
                }
            }
        })
    }
}

fn box_bound(b: &BoxBound, m: usize, what: &str) -> anyhow::Result<DVector<f64>> {
    match b {
        BoxBound::Scalar(v) => Ok(DVector::from_element(m, *v)),
        BoxBound::PerComponent(v) if v.len() == m => Ok(DVector::from_column_slice(v)),
        BoxBound::PerComponent(v) => bail!("control_set.{what} has {} entries, the control has {m}", v.len()),
    }
}

/// Everything a command needs, built from a validated config.
pub struct Instance {
    pub model: Arc<dyn DynamicsModel>,
    pub grid: TimeGrid,
    pub batch: EnsembleBatch,
    pub set: ControlSet,
    pub bounds: ModelBounds,
    pub weights: CostWeights,
    pub report: CertificateReport,
    pub msa: MsaConfig,
}

impl Instance {
    pub fn build(cfg: &RunConfig) -> anyhow::Result<Self> {
        let grid = TimeGrid::new(cfg.grid.horizon, cfg.grid.steps).context("[grid]")?;
        let model = cfg.model.spec()?.build().context("[model]")?;
        let dims = model.dims();
        let set = ControlSet::new(
            box_bound(&cfg.control_set.lower, dims.control, "lower")?,
            box_bound(&cfg.control_set.upper, dims.control, "upper")?,
        )
        .context("[control_set]")?;

        let e = &cfg.ensemble;
        let inputs = match &e.constant_input {
            Some(v) => {
                if v.len() != dims.input {
                    bail!("ensemble.constant_input has {} entries, the model takes {}", v.len(), dims.input);
                }
                vec![InputSignal::constant(&grid, DVector::from_column_slice(v)); e.members]
            }
            None => sample_inputs(dims.input, &grid, e.fourier_order, e.coefficient_bound, e.members, e.seed)
                .context("[ensemble]")?,
        };
        let map = match &e.target {
            TargetSection::Teacher { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                TargetMap::Teacher {
                    model: model.clone(),
                    control: ControlTrajectory::random_in(&set, &grid, &mut rng),
                }
            }
            TargetSection::Linear { matrix: rows } => TargetMap::PointwiseLinear(matrix(rows, "ensemble.target.matrix")?),
            TargetSection::MovingAverage { window } => TargetMap::MovingAverage { window: *window },
        };
        if map.output_dim(dims.input) != dims.output {
            bail!(
                "target dimension {} does not match the readout output dimension {}",
                map.output_dim(dims.input),
                dims.output
            );
        }
        let batch = build_targets(map, inputs, &grid).context("[ensemble.target]")?;

        let b = &cfg.bounds;
        let domain = BoundsDomain::from_batch(model.as_ref(), &batch, &set);
        let bounds = match b.mode {
            BoundsMode::Auto => declare_or_estimate_bounds(model.as_ref(), &domain, b.samples, b.safety, b.seed),
            BoundsMode::Sampled => estimate_bounds_sampled(model.as_ref(), &domain, b.samples, b.safety, b.seed),
        }
        .context("[bounds]")?;

        let alpha = cfg.weights.alpha;
        let beta = match &cfg.weights.beta {
            BetaSpec::Value(v) => *v,
            BetaSpec::Auto(s) => {
                let kappa = parse_auto_beta(s)?;
                let b0 = enscontrol::beta0(&bounds, grid.horizon(), alpha, spectral_norm(model.readout()));
                if b0 <= 0.0 {
                    bail!("weights.beta = {s:?} resolves to 0 because beta0 = 0; give a number instead");
                }
                kappa * b0
            }
        };
        let weights = CostWeights::new(alpha, beta).context("[weights]")?;
        let report = CertificateReport::new(bounds, grid.horizon(), &weights, model.readout());

        let m = &cfg.msa;
        let init = match &m.init {
            InitSpec::Named(s) if s == "random" => InitialControl::Random(m.init_seed),
            InitSpec::Named(_) => InitialControl::Zero,
            InitSpec::Nodes(rows) => InitialControl::Explicit(
                ControlTrajectory::new(rows.iter().map(|r| DVector::from_column_slice(r)).collect(), &grid)
                    .context("msa.init")?,
            ),
        };
        let msa = MsaConfig {
            max_iters: m.max_iters,
            threshold_sup: m.threshold_sup,
            inner: InnerConfig {
                tol_u: m.tol_u,
                max_inner: m.max_inner,
            },
            init,
            check_descent: m.check_descent,
            record_trajectories: false,
            timing: m.timing,
        };
        Ok(Self {
            model,
            grid,
            batch,
            set,
            bounds,
            weights,
            report,
            msa,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
kind = "affine"
a0 = [[-1.0]]
g = [[1.0]]
e = [[0.0]]

[grid]
horizon = 1.0
steps = 20

[ensemble]
constant_input = [1.0]
target = { kind = "linear", matrix = [[0.5]] }

[weights]
alpha = 1.0
beta = "auto:2"

[control_set]
lower = -1.0
upper = 1.0
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.msa, MsaSection::default());
        assert_eq!(cfg.ensemble.members, 1);
        let inst = Instance::build(&cfg).unwrap();
        assert_eq!(inst.weights.beta(), 2.0 * inst.report.constants.beta0);
    }

    #[test]
    fn zero_beta_is_rejected() {
        let text = MINIMAL.replace("beta = \"auto:2\"", "beta = 0.0");
        let err = format!("{:#}", RunConfig::parse(&text).unwrap_err());
        assert!(err.contains("beta must be > 0"), "{err}");
    }

    #[test]
    fn auto_beta_needs_kappa_above_one() {
        assert!(parse_auto_beta("auto:1").is_err());
        assert!(parse_auto_beta("auto:x").is_err());
        assert!(parse_auto_beta("1.5").is_err());
        assert_eq!(parse_auto_beta("auto:1.5").unwrap(), 1.5);
    }

    #[test]
    fn unknown_field_reports_location() {
        let text = MINIMAL.replace("steps = 20", "steps = 20\nstpes = 3");
        let err = format!("{:#}", RunConfig::parse(&text).unwrap_err());
        assert!(err.contains("stpes") && err.contains("line"), "{err}");
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let text = cfg.resolved_toml(3.25).unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.weights.beta, BetaSpec::Value(3.25));
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.ensemble, cfg.ensemble);
    }

    #[test]
    fn control_bound_length_is_checked() {
        let text = MINIMAL.replace("lower = -1.0", "lower = [-1.0, -1.0]");
        let cfg = RunConfig::parse(&text).unwrap();
        assert!(Instance::build(&cfg).is_err());
    }
}
