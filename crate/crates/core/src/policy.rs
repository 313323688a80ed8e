//! Logistic treatment policies and the behavioral maximum-likelihood fit.
//!
//! Both the suggested and the behavioral policy put `P(A = 1 | s) = expit(cᵀ s)`
//! for their coefficient vector `c`. The hybrid policy uses suggested
//! coefficients on the active coordinates and behavioral ones elsewhere.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logits beyond this magnitude are clamped so both action probabilities stay
/// strictly inside (0, 1).
const LOGIT_CLAMP: f64 = 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientRole {
    Behavioral,
    Suggested,
}

/// Policy coefficients tagged with the policy they parameterize.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector {
    values: DVector<f64>,
    role: CoefficientRole,
}

impl CoefficientVector {
    pub fn new(values: DVector<f64>, role: CoefficientRole) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("coefficients must be finite".into()));
        }
        Ok(Self { values, role })
    }

    pub fn behavioral(values: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(values),
            CoefficientRole::Behavioral,
        )
    }

    pub fn suggested(values: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(values),
            CoefficientRole::Suggested,
        )
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn role(&self) -> CoefficientRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Coordinates at which the suggested policy departs from the behavioral one.
///
/// Indices are 0-based and strictly increasing; [`ActiveSet::one_based`] gives
/// the 1-based labels used in output files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSet {
    indices: Vec<usize>,
    dim: usize,
    tolerance: f64,
}

impl ActiveSet {
    pub fn full(dim: usize) -> Self {
        Self {
            indices: (0..dim).collect(),
            dim,
            tolerance: 0.0,
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            dim,
            tolerance: 0.0,
        }
    }

    pub fn from_indices(dim: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.iter().any(|&j| j >= dim) {
            return Err(Error::Parameter(format!(
                "active indices {indices:?} must be strictly increasing and below {dim}"
            )));
        }
        Ok(Self {
            indices,
            dim,
            tolerance: 0.0,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.indices.iter().map(|j| j + 1).collect()
    }

    pub fn complement(&self) -> Vec<usize> {
        (0..self.dim).filter(|j| !self.contains(*j)).collect()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.dim];
        for &j in &self.indices {
            m[j] = true;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.dim
    }
}

/// Membership: `|beta_k - b_k| > tol`. With `tol = 0` only exact ties are inactive.
pub fn active_set(beta: &[f64], b: &[f64], tol: f64) -> ActiveSet {
    debug_assert_eq!(beta.len(), b.len());
    ActiveSet {
        indices: beta
            .iter()
            .zip(b)
            .enumerate()
            .filter(|(_, (x, y))| (*x - *y).abs() > tol)
            .map(|(j, _)| j)
            .collect(),
        dim: beta.len(),
        tolerance: tol,
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln expit(x)` without overflow.
#[inline]
pub fn log_expit(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn dot(coeffs: &[f64], state: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (c, s) in coeffs.iter().zip(state) {
        acc += c * s;
    }
    acc
}

#[inline]
fn prob_from_logit(x: f64, action: u8) -> f64 {
    let p = expit(x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
    if action == 1 {
        p
    } else {
        1.0 - p
    }
}

/// `P(action | state)` under the logistic policy with these coefficients.
pub fn policy_prob(coeffs: &[f64], state: &[f64], action: u8) -> f64 {
    prob_from_logit(dot(coeffs, state), action)
}

/// Logit of the hybrid policy: `betaᵀ(s ⊙ 1_A) + bᵀ(s ⊙ (1 − 1_A))`.
#[inline]
pub(crate) fn hybrid_logit(beta: &[f64], b: &[f64], mask: &[bool], state: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..state.len() {
        acc += if mask[j] { beta[j] } else { b[j] } * state[j];
    }
    acc
}

pub fn hybrid_policy_prob(
    beta: &[f64],
    b: &[f64],
    active: &ActiveSet,
    state: &[f64],
    action: u8,
) -> f64 {
    prob_from_logit(hybrid_logit(beta, b, &active.mask(), state), action)
}

/// Newton iteration limits and the separation guard for [`fit_behavioral`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the infinity norm of the score averaged over
    /// all `n (T + 1)` decisions.
    pub score_tolerance: f64,
    pub separation_cap: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            score_tolerance: 1e-9,
            separation_cap: 30.0,
        }
    }
}

/// Pooled logistic MLE of the behavioral coefficients.
#[derive(Debug, Clone)]
pub struct BehavioralFit {
    pub b_n: CoefficientVector,
    /// Average per-trajectory Fisher information `I₁`.
    pub fisher_per_traj: DMatrix<f64>,
    /// Row `i` is the score of trajectory `i` at `b_n`.
    pub scores_per_traj: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

impl BehavioralFit {
    pub fn n(&self) -> usize {
        self.scores_per_traj.nrows()
    }

    pub fn information_inverse(&self) -> Result<DMatrix<f64>> {
        self.fisher_per_traj
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::SingularInformation)
    }

    /// Model-based standard errors `sqrt(diag(I₁⁻¹) / n)`.
    pub fn model_se(&self) -> Result<Vec<f64>> {
        let inv = self.information_inverse()?;
        let n = self.n() as f64;
        Ok((0..inv.nrows()).map(|k| (inv[(k, k)] / n).sqrt()).collect())
    }
}

struct LogisticPass {
    log_likelihood: f64,
    score: DVector<f64>,
    information: DMatrix<f64>,
}

fn logistic_pass(
    data: &crate::TrajectoryDataset,
    b: &[f64],
    with_information: bool,
) -> LogisticPass {
    let k = data.k();
    let mut ll = 0.0;
    let mut score = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    for i in 0..data.n() {
        for t in 0..data.steps() {
            let s = data.state(i, t);
            let a = data.action(i, t);
            let x = dot(b, s);
            ll += if a == 1 { log_expit(x) } else { log_expit(-x) };
            let p = expit(x);
            let resid = f64::from(a) - p;
            for j in 0..k {
                score[j] += resid * s[j];
            }
            if with_information {
                let w = p * (1.0 - p);
                for r in 0..k {
                    for c in 0..k {
                        info[(r, c)] += w * s[r] * s[c];
                    }
                }
            }
        }
    }
    LogisticPass {
        log_likelihood: ll,
        score,
        information: info,
    }
}

/// Fits `b_n` by damped Newton on the pooled log-likelihood
/// `Σ_i Σ_t log π_b(a_it | s_it)`.
pub fn fit_behavioral(data: &crate::TrajectoryDataset) -> Result<BehavioralFit> {
    fit_behavioral_with(data, &NewtonOptions::default())
}

pub fn fit_behavioral_with(
    data: &crate::TrajectoryDataset,
    opts: &NewtonOptions,
) -> Result<BehavioralFit> {
    let k = data.k();
    let decisions = (data.n() * data.steps()) as f64;

    let ones = data.actions().iter().filter(|&&a| a == 1).count();
    if ones == 0 || ones == data.actions().len() {
        return Err(Error::Separation {
            norm: f64::INFINITY,
            cap: opts.separation_cap,
        });
    }
    let mut gram = DMatrix::<f64>::zeros(k, k);
    for s in data.states().chunks_exact(k) {
        for r in 0..k {
            for c in 0..k {
                gram[(r, c)] += s[r] * s[c];
            }
        }
    }
    let eig = gram.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
        (lo.min(v), hi.max(v.abs()))
    });
    if !(lo > hi * 1e-12) {
        return Err(Error::SingularDesign(format!(
            "state design matrix is rank deficient (eigenvalues in [{lo:.3e}, {hi:.3e}])"
        )));
    }

    let mut b = DVector::<f64>::zeros(k);
    let mut pass = logistic_pass(data, b.as_slice(), true);
    let mut iterations = 0;
    loop {
        let score_norm = pass.score.amax() / decisions;
        if score_norm <= opts.score_tolerance {
            break;
        }
        if iterations >= opts.max_iterations {
            return Err(Error::Convergence {
                iterations,
                score_norm,
                last: b.as_slice().to_vec(),
            });
        }
        iterations += 1;
        let step = pass
            .information
            .clone()
            .cholesky()
            .ok_or_else(|| Error::SingularDesign("information matrix lost definiteness".into()))?
            .solve(&pass.score);
        // Below this predicted gain the log-likelihood is flat to rounding, so
        // a full step is taken whenever it shrinks the score.
        let predicted_gain = 0.5 * pass.score.dot(&step);
        let flat = predicted_gain <= 1e-12 * pass.log_likelihood.abs().max(1.0);
        let mut scale = 1.0;
        let accepted = loop {
            let trial = &b + &step * scale;
            let trial_pass = logistic_pass(data, trial.as_slice(), true);
            let improves = trial_pass.log_likelihood >= pass.log_likelihood
                || (flat && scale == 1.0 && trial_pass.score.amax() < pass.score.amax());
            if improves || scale < 1e-10 {
                break (trial, trial_pass, improves);
            }
            scale *= 0.5;
        };
        if !accepted.2 {
            return Err(Error::Convergence {
                iterations,
                score_norm,
                last: b.as_slice().to_vec(),
            });
        }
        b = accepted.0;
        pass = accepted.1;
        let norm = b.amax();
        if norm > opts.separation_cap {
            return Err(Error::Separation {
                norm,
                cap: opts.separation_cap,
            });
        }
    }

    let separated = (0..data.n()).all(|i| {
        (0..data.steps()).all(|t| {
            let x = dot(b.as_slice(), data.state(i, t));
            if data.action(i, t) == 1 {
                x > 0.0
            } else {
                x < 0.0
            }
        })
    });
    if separated {
        return Err(Error::Separation {
            norm: b.amax(),
            cap: opts.separation_cap,
        });
    }

    let n = data.n();
    let mut scores = DMatrix::zeros(n, k);
    for i in 0..n {
        for t in 0..data.steps() {
            let s = data.state(i, t);
            let resid = f64::from(data.action(i, t)) - expit(dot(b.as_slice(), s));
            for j in 0..k {
                scores[(i, j)] += resid * s[j];
            }
        }
    }
    let fisher = pass.information / n as f64;
    let fisher = (&fisher + fisher.transpose()) * 0.5;

    Ok(BehavioralFit {
        b_n: CoefficientVector::new(b, CoefficientRole::Behavioral)?,
        fisher_per_traj: fisher,
        scores_per_traj: scores,
        converged: true,
        iterations,
        log_likelihood: pass.log_likelihood,
    })
}

/// Per-trajectory influence function of the behavioral MLE, `q_i = I₁⁻¹ s_i(b_n)`,
/// returned as an `n × K` matrix with one row per trajectory.
pub fn behavioral_influence(fit: &BehavioralFit) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(Error::Contract("behavioral fit has not converged".into()));
    }
    let inv = fit.information_inverse()?;
    Ok(&fit.scores_per_traj * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::TrajectoryDataset;
    use proptest::prelude::*;

    #[test]
    fn policy_prob_values() {
        assert_eq!(policy_prob(&[0.0, 0.0], &[3.0, -2.0], 1), 0.5);
        let p = policy_prob(&[1.0], &[3f64.ln()], 1);
        assert!((p - 0.75).abs() < 1e-15);
        for x in [-5.0, -0.3, 0.0, 0.7, 12.0] {
            assert_eq!(
                policy_prob(&[x], &[1.0], 1) + policy_prob(&[x], &[1.0], 0),
                1.0
            );
        }
    }

    #[test]
    fn hybrid_reductions() {
        let beta = [0.3, -1.2, 0.8];
        let b = [-0.4, 0.5, 0.1];
        let s = [1.5, -0.7, 2.0];
        for a in [0, 1] {
            assert_eq!(
                hybrid_policy_prob(&beta, &b, &ActiveSet::full(3), &s, a),
                policy_prob(&beta, &s, a)
            );
            assert_eq!(
                hybrid_policy_prob(&beta, &b, &ActiveSet::empty(3), &s, a),
                policy_prob(&b, &s, a)
            );
        }
        let active = ActiveSet::from_indices(2, vec![0]).unwrap();
        let p = hybrid_policy_prob(&[1.0, 0.0], &[0.0, 1.0], &active, &[1.0, 1.0], 1);
        assert_eq!(p, expit(2.0));
    }

    #[test]
    fn active_set_membership() {
        assert!(active_set(&[0.1, 0.2], &[0.1, 0.2], 0.0).is_empty());
        assert_eq!(
            active_set(&[0.1, 0.5], &[0.1, 0.2], 0.0).one_based(),
            vec![2]
        );
        assert_eq!(
            active_set(&[0.1 + 1e-12, 0.5], &[0.1, 0.2], 1e-9).one_based(),
            vec![2]
        );
        assert!(ActiveSet::from_indices(3, vec![2, 1]).is_err());
        assert!(ActiveSet::from_indices(3, vec![3]).is_err());
    }

    fn symmetric_dataset() -> TrajectoryDataset {
        // states {+s, -s}, each paired with both actions equally often
        let s = [0.8, -1.3];
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for (sign, a) in [(1.0, 1u8), (1.0, 0), (-1.0, 0), (-1.0, 1)] {
            states.extend(s.iter().map(|v| v * sign));
            actions.push(a);
        }
        // add an orthogonal direction so the design has full rank
        for (sign, a) in [(1.0, 1u8), (1.0, 0), (-1.0, 0), (-1.0, 1)] {
            states.extend([1.3 * sign, 0.8 * sign]);
            actions.push(a);
        }
        TrajectoryDataset::new(4, 2, 2, states, actions, vec![0.0; 8]).unwrap()
    }

    #[test]
    fn symmetric_data_gives_zero_coefficients() {
        let fit = fit_behavioral(&symmetric_dataset()).unwrap();
        assert!(fit.b_n.values().amax() <= 1e-8);
    }

    #[test]
    fn constant_action_is_separation() {
        let d = symmetric_dataset();
        let d =
            TrajectoryDataset::new(4, 2, 2, d.states().to_vec(), vec![1; 8], vec![0.0; 8]).unwrap();
        assert!(matches!(fit_behavioral(&d), Err(Error::Separation { .. })));
    }

    #[test]
    fn perfectly_separable_is_separation() {
        let states = vec![1.0, 0.2, 2.0, -0.1, -1.0, 0.3, -2.0, 0.1];
        let d = TrajectoryDataset::new(2, 2, 2, states, vec![1, 1, 0, 0], vec![0.0; 4]).unwrap();
        assert!(matches!(fit_behavioral(&d), Err(Error::Separation { .. })));
    }

    #[test]
    fn rank_deficient_design() {
        let states = vec![1.0, 2.0, 2.0, 4.0, -1.0, -2.0, 0.5, 1.0];
        let d = TrajectoryDataset::new(2, 2, 2, states, vec![1, 0, 0, 1], vec![0.0; 4]).unwrap();
        assert!(matches!(fit_behavioral(&d), Err(Error::SingularDesign(_))));
    }

    #[test]
    fn influence_rows_average_to_zero() {
        let cfg = crate::SimConfig {
            n: 300,
            seed: 3,
            ..crate::SimConfig::default()
        };
        let d = crate::simulate(&cfg).unwrap();
        let fit = fit_behavioral(&d).unwrap();
        let q = behavioral_influence(&fit).unwrap();
        for j in 0..d.k() {
            assert!(q.column(j).mean().abs() <= 1e-8);
            assert!(fit.scores_per_traj.column(j).mean().abs() <= 1e-8);
        }
        let f = &fit.fisher_per_traj;
        assert!((f - f.transpose()).amax() <= 1e-12);
        assert!(f.clone().cholesky().is_some());
    }

    proptest! {
        #[test]
        fn probabilities_are_interior(coeffs in proptest::collection::vec(-50.0f64..50.0, 3),
                                      state in proptest::collection::vec(-50.0f64..50.0, 3),
                                      a in 0u8..2) {
            let p = policy_prob(&coeffs, &state, a);
            prop_assert!(p > 0.0 && p < 1.0);
        }

        #[test]
        fn complement_sums_to_one(x in -36.0f64..36.0) {
            prop_assert_eq!(policy_prob(&[x], &[1.0], 1) + policy_prob(&[x], &[1.0], 0), 1.0);
        }
    }
}
