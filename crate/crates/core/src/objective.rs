//! The base objective `M_n(β, b_n, γ) = V_n(β, b_n) − γ KL_n(β, b_n)` and its
//! analytic derivatives.
//!
//! `V_n` is trajectory-wise importance sampling: each trajectory's summed
//! reward is weighted by the product over steps of the hybrid-to-behavioral
//! action probability ratio. `KL_n` sums a Bernoulli KL divergence over the
//! steps of a trajectory and averages over trajectories, so `M_n` is a sample
//! mean of per-trajectory terms `m_i`.
//!
//! Per step, with hybrid logit `η` (suggested coefficients on the active set,
//! behavioral elsewhere) and behavioral logit `ζ = bᵀs`:
//!
//! ```text
//! ∂/∂β log ρ = Σ_t (a − q) s_A
//! ∂/∂b log ρ = Σ_t (a − q) s_C − (a − p) s
//! ```
//!
//! where `q = expit(η)`, `p = expit(ζ)`, `s_A = s ⊙ 1_A` and `s_C = s − s_A`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{dot, expit, hybrid_logit, log_expit, ActiveSet};
use crate::TrajectoryDataset;

/// Which way the KL penalty points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(π_b ‖ π_β)`, averaged over visited states.
    #[default]
    BehavioralToSuggested,
    /// `KL(π_β ‖ π_b)`.
    SuggestedToBehavioral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceSampling {
    #[default]
    Trajectory,
    /// Not implemented; rejected at construction.
    PerDecision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveOptions {
    pub kl_direction: KlDirection,
    pub importance_sampling: ImportanceSampling,
    /// Upper bound on trajectory importance weights. Exploratory only; every
    /// inference routine refuses to run with a cap.
    pub weight_cap: Option<f64>,
    /// Smallest admissible behavioral probability of an observed action.
    pub positivity_floor: f64,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            kl_direction: KlDirection::default(),
            importance_sampling: ImportanceSampling::default(),
            weight_cap: None,
            positivity_floor: 1e-8,
        }
    }
}

/// Gradient, Hessian and cross derivative of `M_n` at one evaluation point.
#[derive(Debug, Clone)]
pub struct DerivativeBundle {
    pub eval_beta: DVector<f64>,
    pub eval_b: DVector<f64>,
    pub gamma: f64,
    pub active: ActiveSet,
    pub objective: f64,
    /// `J_n = ∇_β M_n`.
    pub j: DVector<f64>,
    /// `H_n = ∇²_β M_n`.
    pub h: DMatrix<f64>,
    /// `X_n = ∂²M_n / ∂b ∂β`; rows index β, columns index b.
    pub x: DMatrix<f64>,
    /// Row `i` is `∇_β m_i`.
    pub z_per_traj: DMatrix<f64>,
}

impl DerivativeBundle {
    pub fn n(&self) -> usize {
        self.z_per_traj.nrows()
    }
}

/// Bernoulli KL divergence `p ln(p/q) + (1−p) ln((1−p)/(1−q))`.
pub fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// KL value and its partials in the hybrid logit `η` and behavioral logit `ζ`.
struct KlTerms {
    d: f64,
    d_eta: f64,
    d_eta_eta: f64,
    d_eta_zeta: f64,
}

#[inline]
fn kl_terms(direction: KlDirection, eta: f64, zeta: f64) -> KlTerms {
    let q = expit(eta);
    let p = expit(zeta);
    let (lq, lq0) = (log_expit(eta), log_expit(-eta));
    let (lp, lp0) = (log_expit(zeta), log_expit(-zeta));
    match direction {
        KlDirection::BehavioralToSuggested => KlTerms {
            d: p * (lp - lq) + (1.0 - p) * (lp0 - lq0),
            d_eta: q - p,
            d_eta_eta: q * (1.0 - q),
            d_eta_zeta: -p * (1.0 - p),
        },
        KlDirection::SuggestedToBehavioral => {
            let v = q * (1.0 - q);
            KlTerms {
                d: q * (lq - lp) + (1.0 - q) * (lq0 - lp0),
                d_eta: v * (eta - zeta),
                d_eta_eta: v * ((1.0 - 2.0 * q) * (eta - zeta) + 1.0),
                d_eta_zeta: -v,
            }
        }
    }
}

#[inline]
fn log_prob(logit: f64, action: u8) -> f64 {
    if action == 1 {
        log_expit(logit)
    } else {
        log_expit(-logit)
    }
}

/// Per-trajectory importance-weighted returns and the b-gradient of `V_n`.
#[derive(Debug, Clone)]
pub struct ValueTerms {
    /// `ρ_i G_i` for each trajectory.
    pub weighted_returns: Vec<f64>,
    pub value: f64,
    /// `∂V_n / ∂b`, including the behavioral slots of the hybrid policy.
    pub grad_b: DVector<f64>,
}

/// `M_n` bound to a dataset, behavioral coefficients, `γ` and an active set.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    data: &'a TrajectoryDataset,
    b: Vec<f64>,
    gamma: f64,
    active: ActiveSet,
    mask: Vec<bool>,
    opts: ObjectiveOptions,
    zeta: Vec<f64>,
    log_pb: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(
        data: &'a TrajectoryDataset,
        b: &[f64],
        gamma: f64,
        active: ActiveSet,
        opts: ObjectiveOptions,
    ) -> Result<Self> {
        let k = data.k();
        if b.len() != k || active.dim() != k {
            return Err(Error::Shape(format!(
                "coefficients of length {} and active set of dimension {} do not match K = {k}",
                b.len(),
                active.dim()
            )));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!(
                "gamma must be finite and >= 0 (got {gamma})"
            )));
        }
        if opts.importance_sampling == ImportanceSampling::PerDecision {
            return Err(Error::Unsupported(
                "per-decision importance sampling is not implemented".into(),
            ));
        }
        if let Some(cap) = opts.weight_cap {
            if !(cap > 0.0) {
                return Err(Error::Parameter("weight cap must be positive".into()));
            }
        }
        let steps = data.steps();
        let mut zeta = Vec::with_capacity(data.n() * steps);
        let mut log_pb = Vec::with_capacity(data.n() * steps);
        for i in 0..data.n() {
            for t in 0..steps {
                let z = dot(b, data.state(i, t));
                let lp = log_prob(z, data.action(i, t));
                let prob = lp.exp();
                if prob < opts.positivity_floor {
                    return Err(Error::Positivity {
                        traj: i,
                        step: t,
                        prob,
                        floor: opts.positivity_floor,
                    });
                }
                zeta.push(z);
                log_pb.push(lp);
            }
        }
        Ok(Self {
            data,
            b: b.to_vec(),
            gamma,
            mask: active.mask(),
            active,
            opts,
            zeta,
            log_pb,
        })
    }

    pub fn data(&self) -> &TrajectoryDataset {
        self.data
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn active(&self) -> &ActiveSet {
        &self.active
    }

    pub fn options(&self) -> &ObjectiveOptions {
        &self.opts
    }

    pub fn k(&self) -> usize {
        self.data.k()
    }

    /// Same objective with another `γ`.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!(
                "gamma must be finite and >= 0 (got {gamma})"
            )));
        }
        Ok(Self {
            gamma,
            ..self.clone()
        })
    }

    #[inline]
    fn weight(&self, log_ratio: f64) -> (f64, bool) {
        let w = log_ratio.exp();
        match self.opts.weight_cap {
            Some(cap) if w > cap => (cap, true),
            _ => (w, false),
        }
    }

    fn require_uncapped(&self) -> Result<()> {
        if self.opts.weight_cap.is_some() {
            return Err(Error::Unsupported(
                "inference requires the importance-weight cap to be off".into(),
            ));
        }
        Ok(())
    }

    /// `(ρ_i, D_i)` for trajectory `i`: importance weight and summed KL.
    #[inline]
    fn trajectory_terms(&self, beta: &[f64], i: usize) -> (f64, f64) {
        let steps = self.data.steps();
        let mut log_ratio = 0.0;
        let mut kl = 0.0;
        for t in 0..steps {
            let cell = i * steps + t;
            let s = self.data.state(i, t);
            let eta = hybrid_logit(beta, &self.b, &self.mask, s);
            log_ratio += log_prob(eta, self.data.action(i, t)) - self.log_pb[cell];
            kl += kl_terms(self.opts.kl_direction, eta, self.zeta[cell]).d;
        }
        (self.weight(log_ratio).0, kl)
    }

    /// Importance-sampling value estimate `V_n(β)`.
    pub fn value(&self, beta: &[f64]) -> f64 {
        let n = self.data.n();
        (0..n)
            .map(|i| self.trajectory_terms(beta, i).0 * self.data.trajectory_return(i))
            .sum::<f64>()
            / n as f64
    }

    /// `KL_n(β)`.
    pub fn kl(&self, beta: &[f64]) -> f64 {
        let n = self.data.n();
        (0..n)
            .map(|i| self.trajectory_terms(beta, i).1)
            .sum::<f64>()
            / n as f64
    }

    /// `M_n(β) = V_n − γ KL_n`.
    pub fn objective(&self, beta: &[f64]) -> f64 {
        let n = self.data.n();
        let mut v = 0.0;
        let mut kl = 0.0;
        for i in 0..n {
            let (rho, d) = self.trajectory_terms(beta, i);
            v += rho * self.data.trajectory_return(i);
            kl += d;
        }
        v / n as f64 - self.gamma * (kl / n as f64)
    }

    /// `M_n(β)` and `J_n(β)` in one pass.
    pub fn objective_and_gradient(&self, beta: &[f64]) -> (f64, DVector<f64>) {
        let k = self.k();
        let steps = self.data.steps();
        let n = self.data.n();
        let mut grad = DVector::zeros(k);
        let mut g_beta = vec![0.0; k];
        let mut d_beta = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..n {
            g_beta.iter_mut().for_each(|v| *v = 0.0);
            d_beta.iter_mut().for_each(|v| *v = 0.0);
            let mut log_ratio = 0.0;
            let mut kl = 0.0;
            for t in 0..steps {
                let cell = i * steps + t;
                let s = self.data.state(i, t);
                let a = self.data.action(i, t);
                let eta = hybrid_logit(beta, &self.b, &self.mask, s);
                log_ratio += log_prob(eta, a) - self.log_pb[cell];
                let q = expit(eta);
                let terms = kl_terms(self.opts.kl_direction, eta, self.zeta[cell]);
                kl += terms.d;
                let resid = f64::from(a) - q;
                for j in 0..k {
                    if self.mask[j] {
                        g_beta[j] += resid * s[j];
                        d_beta[j] += terms.d_eta * s[j];
                    }
                }
            }
            let (rho, capped) = self.weight(log_ratio);
            let ret = self.data.trajectory_return(i);
            total += rho * ret - self.gamma * kl;
            let scale = if capped { 0.0 } else { rho * ret };
            for j in 0..k {
                grad[j] += scale * g_beta[j] - self.gamma * d_beta[j];
            }
        }
        (total / n as f64, grad / n as f64)
    }

    pub fn gradient(&self, beta: &[f64]) -> DVector<f64> {
        self.objective_and_gradient(beta).1
    }

    /// Full derivative bundle at `β`. Refuses to run with a weight cap.
    pub fn derivatives(&self, beta: &[f64]) -> Result<DerivativeBundle> {
        self.require_uncapped()?;
        let k = self.k();
        let steps = self.data.steps();
        let n = self.data.n();
        let gamma = self.gamma;

        let mut z = DMatrix::zeros(n, k);
        let mut h = DMatrix::zeros(k, k);
        let mut x = DMatrix::zeros(k, k);
        let mut total = 0.0;

        let mut g_beta = vec![0.0; k];
        let mut g_b = vec![0.0; k];
        let mut d_beta = vec![0.0; k];
        let mut c_bb = DMatrix::<f64>::zeros(k, k);
        let mut c_bx = DMatrix::<f64>::zeros(k, k);
        let mut d_bb = DMatrix::<f64>::zeros(k, k);
        let mut d_bx = DMatrix::<f64>::zeros(k, k);
        let mut s_a = vec![0.0; k];
        let mut s_c = vec![0.0; k];

        for i in 0..n {
            g_beta.iter_mut().for_each(|v| *v = 0.0);
            g_b.iter_mut().for_each(|v| *v = 0.0);
            d_beta.iter_mut().for_each(|v| *v = 0.0);
            c_bb.fill(0.0);
            c_bx.fill(0.0);
            d_bb.fill(0.0);
            d_bx.fill(0.0);
            let mut log_ratio = 0.0;
            let mut kl = 0.0;
            for t in 0..steps {
                let cell = i * steps + t;
                let s = self.data.state(i, t);
                let a = f64::from(self.data.action(i, t));
                for j in 0..k {
                    (s_a[j], s_c[j]) = if self.mask[j] {
                        (s[j], 0.0)
                    } else {
                        (0.0, s[j])
                    };
                }
                let eta = hybrid_logit(beta, &self.b, &self.mask, s);
                let zeta = self.zeta[cell];
                log_ratio += log_prob(eta, self.data.action(i, t)) - self.log_pb[cell];
                let q = expit(eta);
                let p = expit(zeta);
                let w = q * (1.0 - q);
                let kt = kl_terms(self.opts.kl_direction, eta, zeta);
                kl += kt.d;
                for r in 0..k {
                    g_beta[r] += (a - q) * s_a[r];
                    g_b[r] += (a - q) * s_c[r] - (a - p) * s[r];
                    d_beta[r] += kt.d_eta * s_a[r];
                    for c in 0..k {
                        if c >= r {
                            c_bb[(r, c)] += w * s_a[r] * s_a[c];
                            d_bb[(r, c)] += kt.d_eta_eta * s_a[r] * s_a[c];
                        }
                        c_bx[(r, c)] += w * s_a[r] * s_c[c];
                        d_bx[(r, c)] += s_a[r] * (kt.d_eta_eta * s_c[c] + kt.d_eta_zeta * s[c]);
                    }
                }
            }
            let rho = log_ratio.exp();
            let rg = rho * self.data.trajectory_return(i);
            total += rg - gamma * kl;
            for r in 0..k {
                z[(i, r)] = rg * g_beta[r] - gamma * d_beta[r];
                for c in 0..k {
                    if c >= r {
                        h[(r, c)] +=
                            rg * (g_beta[r] * g_beta[c] - c_bb[(r, c)]) - gamma * d_bb[(r, c)];
                    }
                    x[(r, c)] += rg * (g_beta[r] * g_b[c] - c_bx[(r, c)]) - gamma * d_bx[(r, c)];
                }
            }
        }
        for r in 0..k {
            for c in 0..r {
                h[(r, c)] = h[(c, r)];
            }
        }
        let nf = n as f64;
        let j = DVector::from_iterator(k, (0..k).map(|c| z.column(c).sum() / nf));
        Ok(DerivativeBundle {
            eval_beta: DVector::from_column_slice(beta),
            eval_b: DVector::from_column_slice(&self.b),
            gamma,
            active: self.active.clone(),
            objective: total / nf,
            j,
            h: h / nf,
            x: x / nf,
            z_per_traj: z,
        })
    }

    /// Per-trajectory `ρ_i G_i`, `V_n` and `∂V_n/∂b`.
    pub fn value_terms(&self, beta: &[f64]) -> Result<ValueTerms> {
        self.require_uncapped()?;
        let k = self.k();
        let steps = self.data.steps();
        let n = self.data.n();
        let mut weighted = Vec::with_capacity(n);
        let mut grad_b = DVector::zeros(k);
        let mut g_b = vec![0.0; k];
        for i in 0..n {
            g_b.iter_mut().for_each(|v| *v = 0.0);
            let mut log_ratio = 0.0;
            for t in 0..steps {
                let cell = i * steps + t;
                let s = self.data.state(i, t);
                let a = self.data.action(i, t);
                let eta = hybrid_logit(beta, &self.b, &self.mask, s);
                log_ratio += log_prob(eta, a) - self.log_pb[cell];
                let q = expit(eta);
                let p = expit(self.zeta[cell]);
                let af = f64::from(a);
                for j in 0..k {
                    let sc = if self.mask[j] { 0.0 } else { s[j] };
                    g_b[j] += (af - q) * sc - (af - p) * s[j];
                }
            }
            let rg = log_ratio.exp() * self.data.trajectory_return(i);
            weighted.push(rg);
            for j in 0..k {
                grad_b[j] += rg * g_b[j];
            }
        }
        let nf = n as f64;
        Ok(ValueTerms {
            value: weighted.iter().sum::<f64>() / nf,
            weighted_returns: weighted,
            grad_b: grad_b / nf,
        })
    }
}

/// Importance-sampling estimate of the value of the (hybrid) suggested policy.
pub fn value_is(
    data: &TrajectoryDataset,
    beta: &[f64],
    b_n: &[f64],
    active: &ActiveSet,
    opts: &ObjectiveOptions,
) -> Result<f64> {
    Ok(Objective::new(data, b_n, 0.0, active.clone(), *opts)?.value(beta))
}

/// `KL_n(β, b_n)`, always non-negative.
pub fn kl_est(
    data: &TrajectoryDataset,
    beta: &[f64],
    b_n: &[f64],
    active: &ActiveSet,
    direction: KlDirection,
) -> f64 {
    let mask = active.mask();
    let mut total = 0.0;
    for i in 0..data.n() {
        for t in 0..data.steps() {
            let s = data.state(i, t);
            let eta = hybrid_logit(beta, b_n, &mask, s);
            // Clamp: log-space KL can dip below zero by a rounding error.
            total += kl_terms(direction, eta, dot(b_n, s)).d.max(0.0);
        }
    }
    total / data.n() as f64
}

pub fn objective_m(
    data: &TrajectoryDataset,
    beta: &[f64],
    b_n: &[f64],
    gamma: f64,
    active: &ActiveSet,
    opts: &ObjectiveOptions,
) -> Result<f64> {
    Ok(Objective::new(data, b_n, gamma, active.clone(), *opts)?.objective(beta))
}

pub fn derivatives(
    data: &TrajectoryDataset,
    beta: &[f64],
    b_n: &[f64],
    gamma: f64,
    active: &ActiveSet,
    opts: &ObjectiveOptions,
) -> Result<DerivativeBundle> {
    Objective::new(data, b_n, gamma, active.clone(), *opts)?.derivatives(beta)
}
