#![allow(dead_code)]

use msinv_core::assembly::AssemblyParams;
use msinv_core::forward::{integrate_fine, make_observations, ObservationSeries};
use msinv_core::geometry::{FractureNetwork, Segment};
use msinv_core::gmsfem::{Realization, SpaceOptions};

pub fn network(segments: &[[f64; 4]], k_f: f64) -> FractureNetwork {
    FractureNetwork::new(
        segments
            .iter()
            .map(|s| Segment {
                a: [s[0], s[1]],
                b: [s[2], s[3]],
            })
            .collect(),
        k_f,
    )
    .unwrap()
}

/// 2x2 coarse squares, 4x4 refinement, one fracture each in truth and prior.
pub struct SmallPair {
    pub truth: Realization,
    pub prior: Realization,
    pub data: ObservationSeries,
    pub params: AssemblyParams,
}

pub fn small_params() -> AssemblyParams {
    AssemblyParams {
        t_final: 4.0,
        n_t: 4,
        ..AssemblyParams::default()
    }
}

pub fn small_pair(n_b: usize) -> SmallPair {
    let params = small_params();
    let truth_fr = network(&[[0.1, 0.3, 0.9, 0.6]], params.k_f);
    let prior_fr = network(&[[0.1, 0.4, 0.9, 0.55]], params.k_f);
    let truth = Realization::build(2, 4, &truth_fr, &params, SpaceOptions::new(n_b)).unwrap();
    let prior = Realization::build(2, 4, &prior_fr, &params, SpaceOptions::new(n_b)).unwrap();
    let traj = integrate_fine(&truth.fine, &truth.ops).unwrap();
    let cells: Vec<usize> = (0..truth.coarse.num_elements()).collect();
    let data = make_observations(&traj, &truth.fine, &truth.coarse, &truth.ops, &cells, 0.0, 1).unwrap();
    SmallPair {
        truth,
        prior,
        data,
        params,
    }
}
