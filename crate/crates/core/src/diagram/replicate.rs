use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sim::{simulate, SimConfig};

use super::sweep::{sweep, SweepConfig, SweepResult};

/// Across-replicate spread for one `γ`, indexed by grid position.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalPanel {
    pub gamma: f64,
    /// `sd_beta[j][k]`: sample SD of `β_{n,γ,λ_j,k}`.
    pub sd_beta: Vec<Vec<Option<f64>>>,
    pub sd_value: Vec<Option<f64>>,
    pub mean_beta: Vec<Vec<Option<f64>>>,
    /// Mean of the per-replicate theoretical standard errors.
    pub mean_se: Vec<Vec<Option<f64>>>,
    /// Replicates that produced a converged point at each grid position.
    pub successes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalResult {
    pub replicates: usize,
    pub seeds: Vec<u64>,
    pub failed_replicates: Vec<(u64, String)>,
    pub panels: Vec<EmpiricalPanel>,
    /// Sample SD of `b_n` across replicates.
    pub sd_b_n: Vec<Option<f64>>,
    /// The successful sweeps, in seed order.
    #[serde(skip)]
    pub runs: Vec<SweepResult>,
}

/// Per-replicate simulation seeds drawn from `master_seed`.
pub fn replicate_seeds(master_seed: u64, replicates: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..replicates).map(|_| rng.next_u64()).collect()
}

/// Sample standard deviation, `None` below two observations.
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    Some((ss / (n - 1.0)).sqrt())
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Runs `simulate` and `sweep` once per seed and summarizes the spread of
/// each grid point.
///
/// Grid positions are aligned by index, so a relative or auto grid compares
/// each replicate at the same multiple of its own saturation level.
pub fn empirical_variance(
    sim: &SimConfig,
    cfg: &SweepConfig,
    seeds: &[u64],
) -> Result<EmpiricalResult> {
    if seeds.len() < 2 {
        return Err(Error::Parameter(format!(
            "at least two replicates are needed for a standard deviation (got {})",
            seeds.len()
        )));
    }
    sim.validate()?;
    cfg.validate()?;
    let runs: Vec<(u64, Result<SweepResult>)> = seeds
        .par_iter()
        .map(|&seed| {
            let run = simulate(&SimConfig {
                seed,
                ..sim.clone()
            })
            .and_then(|d| sweep(&d, cfg));
            (seed, run)
        })
        .collect();

    let mut failed = Vec::new();
    let mut ok = Vec::new();
    for (seed, run) in runs {
        match run {
            Ok(r) => ok.push(r),
            Err(e) => failed.push((seed, e.to_string())),
        }
    }
    let k = sim.k;
    let grid_len = cfg.lambda_grid.len();
    let panels = cfg
        .gammas
        .iter()
        .enumerate()
        .map(|(g, &gamma)| {
            let mut sd_beta = Vec::with_capacity(grid_len);
            let mut mean_beta = Vec::with_capacity(grid_len);
            let mut mean_se = Vec::with_capacity(grid_len);
            let mut sd_value = Vec::with_capacity(grid_len);
            let mut successes = Vec::with_capacity(grid_len);
            for j in 0..grid_len {
                let pts: Vec<_> = ok
                    .iter()
                    .filter_map(|r| r.panels[g].points.get(j))
                    .filter(|p| p.succeeded() && p.converged)
                    .collect();
                successes.push(pts.len());
                let coord = |c: usize| pts.iter().map(|p| p.beta[c]).collect::<Vec<_>>();
                sd_beta.push((0..k).map(|c| sample_sd(&coord(c))).collect());
                mean_beta.push((0..k).map(|c| mean(&coord(c))).collect());
                mean_se.push(
                    (0..k)
                        .map(|c| mean(&pts.iter().map(|p| p.se[c]).collect::<Vec<_>>()))
                        .collect(),
                );
                let values: Vec<f64> = pts.iter().filter_map(|p| p.value).collect();
                sd_value.push(sample_sd(&values));
            }
            EmpiricalPanel {
                gamma,
                sd_beta,
                sd_value,
                mean_beta,
                mean_se,
                successes,
            }
        })
        .collect();
    let sd_b_n = (0..k)
        .map(|c| sample_sd(&ok.iter().map(|r| r.b_n[c]).collect::<Vec<_>>()))
        .collect();
    Ok(EmpiricalResult {
        replicates: seeds.len(),
        seeds: seeds.to_vec(),
        failed_replicates: failed,
        panels,
        sd_b_n,
        runs: ok,
    })
}
