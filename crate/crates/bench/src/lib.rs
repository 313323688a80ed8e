//! Fixtures shared by the benchmarks.

use relsparse::{
    adaptive_weights, fit_behavioral, maximize_m, simulate, ActiveSet, ObjectiveOptions, SimConfig,
    SolverOptions, TrajectoryDataset,
};

pub struct Fixture {
    pub data: TrajectoryDataset,
    pub b_n: Vec<f64>,
    pub beta_gamma: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Simulated dataset of `n` trajectories with its stage-one solution at `γ = 1`.
pub fn fixture(n: usize) -> Fixture {
    let data = simulate(&SimConfig {
        n,
        seed: 17,
        ..SimConfig::default()
    })
    .expect("default simulation is valid");
    let b_n = fit_behavioral(&data).expect("fit").b_n.as_slice().to_vec();
    let obj = relsparse::Objective::new(
        &data,
        &b_n,
        1.0,
        ActiveSet::full(data.k()),
        ObjectiveOptions::default(),
    )
    .expect("objective");
    let beta_gamma = maximize_m(&obj, &b_n, &SolverOptions::default())
        .expect("stage one")
        .solution
        .as_slice()
        .to_vec();
    let weights = adaptive_weights(&beta_gamma, &b_n, 1.0).expect("weights");
    Fixture {
        data,
        b_n,
        beta_gamma,
        weights,
    }
}
