//! Two-stage estimation of the suggested policy coefficients.
//!
//! Stage one maximizes the smooth objective `M_n` by gradient ascent. Stage
//! two maximizes the adaptively penalized objective
//!
//! ```text
//! W_n(β) = M_n(β) − λ Σ_k w_k |β_k − b_k|
//! ```
//!
//! by proximal gradient ascent. The proximal map shrinks each coordinate
//! toward its behavioral counterpart and returns it *exactly* once inside the
//! dead zone, so inactive coordinates are bitwise ties and an active set with
//! zero tolerance is well defined.
//!
//! Both solvers use a Barzilai-Borwein trial step followed by halving
//! backtracking, and only accept steps that do not decrease their objective.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::Objective;
use crate::policy::{CoefficientRole, CoefficientVector};

const MIN_STEP: f64 = 1e-20;
const STEP_BOUNDS: (f64, f64) = (1e-10, 1e6);

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: CoefficientVector,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_step_size: f64,
    pub trace: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Stage one stops once `‖J_n‖_∞` reaches this.
    pub gradient_tolerance: f64,
    pub max_ascent_iterations: usize,
    /// Sufficient-increase constant of the Armijo test.
    pub armijo: f64,
    /// Stage two stops once an accepted step moves no coordinate further than this.
    pub displacement_tolerance: f64,
    pub max_prox_iterations: usize,
    /// Random restarts added to stage one; the best objective wins.
    pub extra_starts: usize,
    /// Standard deviation of the restart perturbation around `b_n`.
    pub start_spread: f64,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-7,
            max_ascent_iterations: 5000,
            armijo: 1e-4,
            displacement_tolerance: 1e-9,
            max_prox_iterations: 10_000,
            extra_starts: 1,
            start_spread: 1.0,
            record_trace: false,
        }
    }
}

fn bb_step(s: &DVector<f64>, y: &DVector<f64>, fallback: f64) -> f64 {
    // Ascent on M: curvature along s is -sᵀy.
    let sy = s.dot(y);
    let ss = s.dot(s);
    let step = if sy < 0.0 && ss > 0.0 {
        ss / -sy
    } else {
        fallback * 2.0
    };
    step.clamp(STEP_BOUNDS.0, STEP_BOUNDS.1)
}

fn report(
    beta: DVector<f64>,
    value: f64,
    iterations: usize,
    converged: bool,
    step: f64,
    trace: Option<Vec<f64>>,
) -> Result<SolveReport> {
    Ok(SolveReport {
        solution: CoefficientVector::new(beta, CoefficientRole::Suggested)?,
        objective_value: value,
        iterations,
        converged,
        final_step_size: step,
        trace,
    })
}

/// Gradient ascent on `M_n` with backtracking line search, from `init`.
pub fn maximize_m(obj: &Objective<'_>, init: &[f64], opts: &SolverOptions) -> Result<SolveReport> {
    let mut beta = DVector::from_column_slice(init);
    let (mut m, mut g) = obj.objective_and_gradient(beta.as_slice());
    if !m.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iterations: 0,
            last: init.to_vec(),
        });
    }
    let mut trace = opts.record_trace.then(|| vec![m]);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < opts.max_ascent_iterations {
        if g.amax() <= opts.gradient_tolerance {
            return report(beta, m, iterations, true, step, trace);
        }
        iterations += 1;
        let g2 = g.norm_squared();
        let mut eta = step;
        let accepted = loop {
            let trial = &beta + &g * eta;
            let (mt, gt) = obj.objective_and_gradient(trial.as_slice());
            if mt.is_finite() && mt >= m + opts.armijo * eta * g2 {
                break Some((trial, mt, gt));
            }
            eta *= 0.5;
            if eta < MIN_STEP {
                break None;
            }
        };
        let Some((trial, mt, gt)) = accepted else {
            // no ascent step available at machine precision
            let converged = g.amax() <= opts.gradient_tolerance;
            return report(beta, m, iterations, converged, eta, trace);
        };
        if gt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iterations,
                last: beta.as_slice().to_vec(),
            });
        }
        step = bb_step(&(&trial - &beta), &(&gt - &g), eta);
        beta = trial;
        m = mt;
        g = gt;
        if let Some(t) = trace.as_mut() {
            t.push(m);
        }
    }
    let converged = g.amax() <= opts.gradient_tolerance;
    report(beta, m, iterations, converged, step, trace)
}

/// Runs [`maximize_m`] from `init` and from `opts.extra_starts` random
/// perturbations of it, keeping the highest objective. Deterministic in `seed`.
pub fn maximize_m_multistart(
    obj: &Objective<'_>,
    init: &[f64],
    seed: u64,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let mut best = maximize_m(obj, init, opts)?;
    if opts.extra_starts == 0 {
        return Ok(best);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0, opts.start_spread)
        .map_err(|e| Error::Parameter(format!("start_spread: {e}")))?;
    for _ in 0..opts.extra_starts {
        let start: Vec<f64> = init.iter().map(|v| v + spread.sample(&mut rng)).collect();
        let Ok(candidate) = maximize_m(obj, &start, opts) else {
            continue;
        };
        let better = match (candidate.converged, best.converged) {
            (true, false) => true,
            (false, true) => false,
            _ => candidate.objective_value > best.objective_value,
        };
        if better {
            best = candidate;
        }
    }
    Ok(best)
}

/// `w_k = 1 / |β_{γ,k} − b_k|^δ` with the difference floored at `1e-10`.
pub fn adaptive_weights(beta_gamma: &[f64], b_n: &[f64], delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Parameter(format!(
            "delta must be positive (got {delta})"
        )));
    }
    if beta_gamma.len() != b_n.len() {
        return Err(Error::Shape("weight inputs differ in length".into()));
    }
    Ok(beta_gamma
        .iter()
        .zip(b_n)
        .map(|(x, b)| (x - b).abs().max(1e-10).powf(-delta))
        .collect())
}

/// Proximal map of `τ |u − b_k|`: `b_k + soft(ξ − b_k, τ)`.
///
/// Returns `b_k` itself whenever `|ξ − b_k| ≤ τ`.
#[inline]
pub fn prox_shifted(xi: f64, b_k: f64, tau: f64) -> f64 {
    let diff = xi - b_k;
    if diff.abs() <= tau {
        b_k
    } else {
        b_k + diff.signum() * (diff.abs() - tau)
    }
}

/// `λ Σ_k w_k |β_k − b_k|`.
pub fn penalty(beta: &[f64], b_n: &[f64], lambda: f64, weights: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((x, b), w) in beta.iter().zip(b_n).zip(weights) {
        acc += w * (x - b).abs();
    }
    lambda * acc
}

/// `W_n(β) = M_n(β) − λ Σ_k w_k |β_k − b_k|`.
pub fn penalized_objective(obj: &Objective<'_>, beta: &[f64], lambda: f64, weights: &[f64]) -> f64 {
    obj.objective(beta) - penalty(beta, obj.b(), lambda, weights)
}

/// Proximal gradient ascent on `W_n`, from `init`.
pub fn maximize_w(
    obj: &Objective<'_>,
    lambda: f64,
    weights: &[f64],
    init: &[f64],
    opts: &SolverOptions,
) -> Result<SolveReport> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!(
            "lambda must be finite and >= 0 (got {lambda})"
        )));
    }
    let k = obj.k();
    if weights.len() != k || init.len() != k {
        return Err(Error::Shape("weights and init must have length K".into()));
    }
    let mut state = ProxState::start(obj, lambda, weights, init)?;
    let mut trace = opts.record_trace.then(|| vec![state.w_val]);
    let mut iterations = 0;
    let mut snaps = 0;
    loop {
        let run = state.ascend(
            opts.max_prox_iterations - iterations,
            opts.displacement_tolerance,
            &mut trace,
        )?;
        iterations += run.iterations;
        if !run.converged {
            let beta = state.beta.clone();
            return report(beta, state.w_val, iterations, false, run.step, trace);
        }
        let snapped = state.snap_ties(opts.displacement_tolerance);
        if snapped {
            if let Some(t) = trace.as_mut() {
                t.push(state.w_val);
            }
        }
        // A tie on the dead-zone boundary can be left again by one ulp, so
        // the snapped point is final once the budget is spent.
        if !snapped || snaps >= MAX_SNAPS || iterations >= opts.max_prox_iterations {
            let beta = state.beta.clone();
            return report(beta, state.w_val, iterations, true, run.step, trace);
        }
        snaps += 1;
    }
}

const MAX_SNAPS: usize = 8;
const KKT_SLACK: f64 = 1e-9;

struct ProxRun {
    iterations: usize,
    converged: bool,
    step: f64,
}

struct ProxState<'o, 'a> {
    obj: &'o Objective<'a>,
    lambda: f64,
    weights: &'o [f64],
    b: Vec<f64>,
    beta: DVector<f64>,
    m: f64,
    g: DVector<f64>,
    w_val: f64,
    step: f64,
}

impl<'o, 'a> ProxState<'o, 'a> {
    fn start(
        obj: &'o Objective<'a>,
        lambda: f64,
        weights: &'o [f64],
        init: &[f64],
    ) -> Result<Self> {
        let b = obj.b().to_vec();
        let beta = DVector::from_column_slice(init);
        let (m, g) = obj.objective_and_gradient(beta.as_slice());
        if !m.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iterations: 0,
                last: init.to_vec(),
            });
        }
        let w_val = m - penalty(beta.as_slice(), &b, lambda, weights);
        Ok(Self {
            obj,
            lambda,
            weights,
            b,
            beta,
            m,
            g,
            w_val,
            step: 1.0,
        })
    }

    /// Proximal gradient steps until an accepted step moves less than `tol`.
    fn ascend(&mut self, budget: usize, tol: f64, trace: &mut Option<Vec<f64>>) -> Result<ProxRun> {
        let k = self.beta.len();
        let mut iterations = 0;
        while iterations < budget {
            iterations += 1;
            let mut eta = self.step;
            let accepted = loop {
                let trial = DVector::from_iterator(
                    k,
                    (0..k).map(|j| {
                        prox_shifted(
                            self.beta[j] + eta * self.g[j],
                            self.b[j],
                            eta * self.lambda * self.weights[j],
                        )
                    }),
                );
                let d = &trial - &self.beta;
                let (mt, gt) = self.obj.objective_and_gradient(trial.as_slice());
                let wt = mt - penalty(trial.as_slice(), &self.b, self.lambda, self.weights);
                let quadratic_bound = self.m + self.g.dot(&d) - d.norm_squared() / (2.0 * eta);
                if mt.is_finite() && mt >= quadratic_bound && wt >= self.w_val {
                    break Some((trial, d, mt, gt, wt));
                }
                eta *= 0.5;
                if eta < MIN_STEP {
                    break None;
                }
            };
            let Some((trial, d, mt, gt, wt)) = accepted else {
                return Ok(ProxRun {
                    iterations,
                    converged: false,
                    step: eta,
                });
            };
            if gt.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    iterations,
                    last: self.beta.as_slice().to_vec(),
                });
            }
            let displacement = d.amax();
            self.step = bb_step(&d, &(&gt - &self.g), eta);
            self.beta = trial;
            self.m = mt;
            self.g = gt;
            self.w_val = wt;
            if let Some(t) = trace.as_mut() {
                t.push(self.w_val);
            }
            if displacement <= tol {
                return Ok(ProxRun {
                    iterations,
                    converged: true,
                    step: eta,
                });
            }
        }
        Ok(ProxRun {
            iterations,
            converged: false,
            step: self.step,
        })
    }

    /// Ties coordinates that sit within `sqrt(tol)` of their behavioral
    /// value when the tie satisfies the subgradient condition
    /// `|J_k| <= λ w_k` (up to a relative `KKT_SLACK`) and does not lower
    /// `W_n` beyond roundoff.
    ///
    /// Exactly at the saturation level the tie lies on the boundary of the
    /// dead zone and plain proximal steps only approach it geometrically.
    fn snap_ties(&mut self, tol: f64) -> bool {
        let radius = tol.sqrt();
        let mut candidates: Vec<usize> = (0..self.beta.len())
            .filter(|&j| {
                let gap = (self.beta[j] - self.b[j]).abs();
                gap > 0.0 && gap <= radius * self.b[j].abs().max(1.0)
            })
            .collect();
        while !candidates.is_empty() {
            let mut trial = self.beta.clone();
            for &j in &candidates {
                trial[j] = self.b[j];
            }
            let (mt, gt) = self.obj.objective_and_gradient(trial.as_slice());
            let before = candidates.len();
            candidates
                .retain(|&j| gt[j].abs() <= self.lambda * self.weights[j] * (1.0 + KKT_SLACK));
            if candidates.len() != before {
                continue;
            }
            let wt = mt - penalty(trial.as_slice(), &self.b, self.lambda, self.weights);
            let slack = 4.0 * f64::EPSILON * self.w_val.abs().max(1.0);
            if !(mt.is_finite() && wt >= self.w_val - slack) {
                return false;
            }
            self.beta = trial;
            self.m = mt;
            self.g = gt;
            self.w_val = wt;
            return true;
        }
        false
    }
}

pub fn kkt_saturation_bound(obj: &Objective<'_>, weights: &[f64]) -> f64 {
    let j = obj.gradient(obj.b());
    j.iter()
        .zip(weights)
        .map(|(g, w)| g.abs() / w)
        .fold(0.0, f64::max)
}

fn all_tied(report: &SolveReport, b: &[f64]) -> bool {
    report.converged && report.solution.as_slice() == b
}

/// Smallest `λ` whose solution from `init` ties every coordinate to `b_n`,
/// found by bisection to relative precision `1e-6`.
pub fn saturation_lambda(
    obj: &Objective<'_>,
    weights: &[f64],
    init: &[f64],
    opts: &SolverOptions,
) -> Result<f64> {
    let b = obj.b().to_vec();
    let tied = |lambda: f64| -> Result<bool> {
        Ok(all_tied(&maximize_w(obj, lambda, weights, init, opts)?, &b))
    };
    let mut hi = kkt_saturation_bound(obj, weights).max(1e-12);
    let mut doublings = 0;
    while !tied(hi)? {
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::Contract(
                "no penalty level ties all coefficients".into(),
            ));
        }
    }
    let mut lo = 0.0;
    if tied(lo)? {
        return Ok(0.0);
    }
    while hi - lo > 1e-6 * hi {
        let mid = 0.5 * (lo + hi);
        if tied(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
