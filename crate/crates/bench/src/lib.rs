//! Fixed instances shared by the benchmarks.

use std::sync::Arc;

use enscontrol::*;

pub struct Instance {
    pub model: Arc<dyn DynamicsModel>,
    pub batch: EnsembleBatch,
    pub set: ControlSet,
    pub weights: CostWeights,
    pub constants: Constants,
    pub control: ControlTrajectory,
}

/// Selective S6 toy: 2 channels, 2 states per channel, teacher targets.
pub fn s6_instance(steps: usize, members: usize) -> Instance {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let model = ModelSpec::SelectiveS6 {
        state: 4,
        input: 2,
        state_per_channel: 2,
        delta: 1.0,
        readout: Readout::Identity,
        x0: None,
    }
    .build()
    .unwrap();
    let set = ControlSet::uniform(model.dims().control, -1.0, 1.0).unwrap();
    let inputs = sample_inputs(2, &grid, 2, 0.1, members, 7).unwrap();
    let teacher = TargetMap::Teacher {
        model: model.clone(),
        control: interior_smooth_control(&set, &grid, 11),
    };
    let batch = build_targets(teacher, inputs, &grid).unwrap();
    let domain = BoundsDomain::from_batch(model.as_ref(), &batch, &set);
    let bounds = declare_or_estimate_bounds(model.as_ref(), &domain, 100, 1.5, 0).unwrap();
    let c_norm = spectral_norm(model.readout());
    // same regime as the shipped config: beta = 1.5 beta0
    let weights = CostWeights::new(0.5, 1.5 * beta0(&bounds, 1.0, 0.5, c_norm)).unwrap();
    let constants = compute_constants(&bounds, 1.0, &weights, c_norm);
    let control = interior_smooth_control(&set, &grid, 3);
    Instance {
        model,
        batch,
        set,
        weights,
        constants,
        control,
    }
}
