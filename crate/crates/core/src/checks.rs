//! Self-checks run by the `check` command on a small built-in dataset.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fdcheck::{fd_step, max_relative_error, numeric_derivatives};
use crate::inference::{
    assemble_r, coef_variance_adaptive, coef_variance_baseline, VarianceOptions,
};
use crate::objective::{bernoulli_kl, kl_est, KlDirection, Objective, ObjectiveOptions};
use crate::policy::{active_set, behavioral_influence, fit_behavioral, ActiveSet};
use crate::sim::{simulate, SimConfig};
use crate::solvers::{
    adaptive_weights, maximize_m, maximize_w, prox_shifted, saturation_lambda, SolverOptions,
};
use crate::TrajectoryDataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Added to every analytic gradient entry before comparison. Non-zero
    /// only to confirm that the derivative check can fail.
    pub gradient_perturbation: f64,
    pub derivative_points: usize,
    pub prox_triples: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            gradient_perturbation: 0.0,
            derivative_points: 10,
            prox_triples: 200,
            seed: 20240917,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// The dataset used by the checks: 200 simulated trajectories, `T = 3`, `K = 2`.
pub fn builtin_dataset(seed: u64) -> Result<TrajectoryDataset> {
    simulate(&SimConfig {
        n: 200,
        seed,
        ..SimConfig::default()
    })
}

fn outcome(name: &str, started: Instant, result: Result<(bool, String)>) -> CheckOutcome {
    let (passed, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Worst relative error of the analytic `J`, `H`, `X` against central
/// differences at random points, over both KL directions.
pub fn derivative_check(
    data: &TrajectoryDataset,
    points: usize,
    perturbation: f64,
    seed: u64,
) -> Result<f64> {
    let fit = fit_behavioral(data)?;
    let b = fit.b_n.as_slice().to_vec();
    let k = data.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let direction = if p % 2 == 0 {
            KlDirection::BehavioralToSuggested
        } else {
            KlDirection::SuggestedToBehavioral
        };
        let opts = ObjectiveOptions {
            kl_direction: direction,
            ..ObjectiveOptions::default()
        };
        let gamma = 10f64.powf(rng.random_range(-1.0..1.0));
        let beta: Vec<f64> = b.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        let indices: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.6)).collect();
        let active = ActiveSet::from_indices(k, indices)?;
        let obj = Objective::new(data, &b, gamma, active.clone(), opts)?;
        let analytic = obj.derivatives(&beta)?;
        let j = analytic.j.add_scalar(perturbation);
        let fd = numeric_derivatives(data, &beta, &b, gamma, &active, &opts)?;
        worst = worst
            .max(max_relative_error(j.iter(), fd.j.iter()))
            .max(max_relative_error(analytic.h.iter(), fd.h.iter()))
            .max(max_relative_error(analytic.x.iter(), fd.x.iter()));
    }
    Ok(worst)
}

/// Grid-search minimizer of `(x − ξ)²/2 + τ|x − b|` with spacing at most
/// `spacing`, including `b` itself.
pub fn prox_by_grid(xi: f64, b: f64, tau: f64, spacing: f64) -> f64 {
    let f = |x: f64| 0.5 * (x - xi).powi(2) + tau * (x - b).abs();
    let (lo, hi) = (xi.min(b), xi.max(b));
    let steps = ((hi - lo) / spacing).ceil().max(1.0) as usize;
    let mut best = (f(b), b);
    for s in 0..=steps {
        let x = lo + (hi - lo) * s as f64 / steps as f64;
        let v = f(x);
        if v < best.0 {
            best = (v, x);
        }
    }
    best.1
}

/// Worst gap between `prox_shifted` and the grid minimizer, and whether every
/// dead-zone case returned `b` bitwise.
pub fn prox_check(triples: usize, seed: u64) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..triples {
        let b = rng.random_range(-3.0..3.0);
        let tau = rng.random_range(0.0..2.0);
        let xi = b + rng.random_range(-4.0..4.0);
        let p = prox_shifted(xi, b, tau);
        worst = worst.max((p - prox_by_grid(xi, b, tau, 1e-4)).abs());
        if (xi - b).abs() <= tau && p.to_bits() != b.to_bits() {
            exact = false;
        }
    }
    (worst, exact)
}

fn endpoint_checks(data: &TrajectoryDataset) -> Result<((bool, String), (bool, String))> {
    let fit = fit_behavioral(data)?;
    let b = fit.b_n.as_slice().to_vec();
    let obj = Objective::new(
        data,
        &b,
        1.0,
        ActiveSet::full(data.k()),
        ObjectiveOptions::default(),
    )?;
    let opts = SolverOptions::default();
    let bg = maximize_m(&obj, &b, &opts)?.solution.as_slice().to_vec();
    let w = adaptive_weights(&bg, &b, 1.0)?;
    let at_zero = maximize_w(&obj, 0.0, &w, &bg, &opts)?;
    let gap = at_zero
        .solution
        .as_slice()
        .iter()
        .zip(&bg)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let sat = saturation_lambda(&obj, &w, &bg, &opts)?;
    let at_sat = maximize_w(&obj, sat, &w, &bg, &opts)?;
    let tied = at_sat.solution.as_slice() == b.as_slice()
        && active_set(at_sat.solution.as_slice(), &b, 0.0).is_empty();
    Ok((
        (
            gap <= 1e-6,
            format!("max |beta(0) - beta_gamma| = {gap:.3e}"),
        ),
        (tied, format!("lambda_sat = {sat:.6e}, bitwise tie: {tied}")),
    ))
}

fn reduction_check(data: &TrajectoryDataset) -> Result<(bool, String)> {
    let fit = fit_behavioral(data)?;
    let b = fit.b_n.as_slice().to_vec();
    let q = behavioral_influence(&fit)?;
    let full = ActiveSet::full(data.k());
    let obj = Objective::new(data, &b, 1.0, full.clone(), ObjectiveOptions::default())?;
    let beta = maximize_m(&obj, &b, &SolverOptions::default())?
        .solution
        .as_slice()
        .to_vec();
    let bundle = obj.derivatives(&beta)?;
    let opts = VarianceOptions::default();
    let adaptive = coef_variance_adaptive(&assemble_r(&bundle, &q, &full)?, &bundle, &full, &opts)?;
    let baseline = coef_variance_baseline(&bundle, &q, &opts)?;
    let gap = (adaptive - baseline).amax();
    Ok((gap <= 1e-10, format!("max elementwise gap = {gap:.3e}")))
}

fn kl_check(data: &TrajectoryDataset) -> Result<(bool, String)> {
    let fit = fit_behavioral(data)?;
    let b = fit.b_n.as_slice().to_vec();
    let full = ActiveSet::full(data.k());
    let at_b = kl_est(data, &b, &b, &full, KlDirection::BehavioralToSuggested);
    let pair = (bernoulli_kl(0.5, 0.75) - 0.5 * (4.0f64 / 3.0).ln()).abs();
    Ok((
        at_b <= 1e-14 && pair <= 1e-12,
        format!("KL at b_n = {at_b:.3e}, pair error = {pair:.3e}"),
    ))
}

fn value_gradient_check(data: &TrajectoryDataset) -> Result<(bool, String)> {
    let fit = fit_behavioral(data)?;
    let b = fit.b_n.as_slice().to_vec();
    let active = ActiveSet::from_indices(data.k(), vec![0])?;
    let beta: Vec<f64> = b.iter().map(|v| v + 0.3).collect();
    let opts = ObjectiveOptions::default();
    let analytic = Objective::new(data, &b, 0.0, active.clone(), opts)?
        .value_terms(&beta)?
        .grad_b;
    let mut numeric = DVector::zeros(data.k());
    for c in 0..data.k() {
        let h = fd_step(b[c]);
        let mut up = b.clone();
        let mut down = b.clone();
        up[c] += h;
        down[c] -= h;
        let v = |bb: &[f64]| {
            Objective::new(data, bb, 0.0, active.clone(), opts).map(|o| o.value(&beta))
        };
        numeric[c] = (v(&up)? - v(&down)?) / (2.0 * h);
    }
    let err = max_relative_error(analytic.iter(), numeric.iter());
    Ok((err <= 1e-5, format!("max relative error = {err:.3e}")))
}

/// Runs every check and returns one outcome per check.
pub fn run_checks(opts: &CheckOptions) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let data = match builtin_dataset(opts.seed) {
        Ok(d) => d,
        Err(e) => {
            out.push(CheckOutcome {
                name: "builtin-dataset".into(),
                passed: false,
                detail: e.to_string(),
                seconds: 0.0,
            });
            return out;
        }
    };

    let t = Instant::now();
    let r = derivative_check(
        &data,
        opts.derivative_points,
        opts.gradient_perturbation,
        opts.seed,
    )
    .map(|e| {
        (
            e <= 1e-5,
            format!(
                "max relative error = {e:.3e} over {} points",
                opts.derivative_points
            ),
        )
    });
    out.push(outcome("derivatives-vs-finite-differences", t, r));

    let t = Instant::now();
    let (gap, exact) = prox_check(opts.prox_triples, opts.seed);
    out.push(outcome(
        "prox-vs-grid-search",
        t,
        Ok((
            gap <= 1e-4 && exact,
            format!("max gap = {gap:.3e}, dead zone exact: {exact}"),
        )),
    ));

    let t = Instant::now();
    match endpoint_checks(&data) {
        Ok((zero, sat)) => {
            out.push(outcome("path-endpoint-lambda-zero", t, Ok(zero)));
            out.push(outcome("path-endpoint-saturation", t, Ok(sat)));
        }
        Err(e) => out.push(outcome("path-endpoints", t, Err(e))),
    }

    let t = Instant::now();
    out.push(outcome(
        "full-selection-reduces-to-baseline",
        t,
        reduction_check(&data),
    ));
    let t = Instant::now();
    out.push(outcome("kl-identities", t, kl_check(&data)));
    let t = Instant::now();
    out.push(outcome(
        "value-gradient-vs-finite-differences",
        t,
        value_gradient_check(&data),
    ));
    out
}
