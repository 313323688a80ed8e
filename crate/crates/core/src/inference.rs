//! Sandwich variance estimates for the penalized policy coefficients and the
//! value estimate.
//!
//! For a selection `A` the active coefficients get
//!
//! ```text
//! σ²_A = (H_AA)⁻¹ [ (1/n) Σ_i r_i r_iᵀ ] (H_AA)⁻ᵀ
//! ```
//!
//! where each `r_i` combines the trajectory's gradient contribution with the
//! behavioral influence function `q_i`, routed through the Hessian blocks that
//! couple active and behavioral coordinates and through the cross derivative.
//! Behavioral coordinates equal `b_n` exactly, so their variance is the
//! behavioral MLE variance.
//!
//! Conventions:
//! - `H`, `X` and `z` come from the full (non-hybrid) objective evaluated at
//!   the penalized solution, whose behavioral coordinates are `b_n` bitwise.
//! - Asymptotic variances are on the `√n` scale; reported standard errors
//!   divide by `n` before the square root.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{DerivativeBundle, Objective};
use crate::policy::{ActiveSet, BehavioralFit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceOptions {
    /// Center the middle moment matrix. Off: the uncentered second moment.
    pub center_middle: bool,
    /// Hessian blocks with a larger condition number are rejected.
    pub max_condition: f64,
}

impl Default for VarianceOptions {
    fn default() -> Self {
        Self {
            center_middle: false,
            max_condition: 1e12,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientVariance {
    /// `σ²_A`, `|A| × |A|`, ordered like `active.indices()`.
    #[serde(serialize_with = "serialize_matrix")]
    pub active_block: DMatrix<f64>,
    /// `(I₁⁻¹)_kk` for each behavioral coordinate, in `active.complement()` order.
    pub behavioral_diag: Vec<f64>,
    pub active: ActiveSet,
    pub n: usize,
    /// Standard error of each coefficient of `β_{n,γ,λ}`.
    pub per_coordinate_se: Vec<f64>,
}

fn serialize_matrix<S: serde::Serializer>(
    m: &DMatrix<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        seq.serialize_element(&m.row(r).iter().copied().collect::<Vec<_>>())?;
    }
    seq.end()
}

fn check_inputs(bundle: &DerivativeBundle, q: &DMatrix<f64>) -> Result<()> {
    let k = bundle.j.len();
    if q.nrows() != bundle.n() || q.ncols() != k {
        return Err(Error::Shape(format!(
            "influence matrix is {}x{}, expected {}x{k}",
            q.nrows(),
            q.ncols(),
            bundle.n()
        )));
    }
    Ok(())
}

/// Rows `r_i` (one per trajectory, `|A|` columns):
///
/// ```text
/// r_iᵀ = z_{i,A}ᵀ + v_{i,C}ᵀ H_{CA} + v_{i,C}ᵀ (H_{AC})ᵀ + v_{i,A}ᵀ (Xᵀ)_{AA} + v_{i,C}ᵀ (Xᵀ)_{CA}
/// ```
///
/// with `C` the behavioral coordinates and `v_i = q_i`.
pub fn assemble_r(
    bundle: &DerivativeBundle,
    q: &DMatrix<f64>,
    active: &ActiveSet,
) -> Result<DMatrix<f64>> {
    check_inputs(bundle, q)?;
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let a_idx = active.indices();
    let c_idx = active.complement();
    let (h, x, z) = (&bundle.h, &bundle.x, &bundle.z_per_traj);
    let n = bundle.n();
    let mut r = DMatrix::zeros(n, a_idx.len());
    for i in 0..n {
        for (col, &a) in a_idx.iter().enumerate() {
            let mut v = z[(i, a)];
            for &c in &c_idx {
                v += q[(i, c)] * h[(c, a)];
            }
            for &c in &c_idx {
                v += q[(i, c)] * h[(a, c)];
            }
            for &a2 in a_idx {
                v += q[(i, a2)] * x[(a, a2)];
            }
            for &c in &c_idx {
                v += q[(i, c)] * x[(a, c)];
            }
            r[(i, col)] = v;
        }
    }
    Ok(r)
}

/// Inverse of a symmetric matrix through its eigendecomposition, rejecting
/// condition numbers above `max_condition`.
fn guarded_symmetric_inverse(m: &DMatrix<f64>, max_condition: f64) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let hi = abs.iter().copied().fold(0.0, f64::max);
    let lo = abs.iter().copied().fold(f64::INFINITY, f64::min);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= max_condition) {
        return Err(Error::SingularHessian { condition });
    }
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    Ok(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose())
}

fn middle_moment(r: &DMatrix<f64>, center: bool) -> DMatrix<f64> {
    let n = r.nrows() as f64;
    let mut rr = r.clone();
    if center {
        for mut col in rr.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
    rr.transpose() * &rr / n
}

fn sandwich(bread_inv: &DMatrix<f64>, middle: &DMatrix<f64>) -> DMatrix<f64> {
    let s = bread_inv * middle * bread_inv.transpose();
    (&s + s.transpose()) * 0.5
}

/// `σ²_A = (H_AA)⁻¹ (1/n Σ r_i r_iᵀ) (H_AA)⁻ᵀ`.
pub fn coef_variance_adaptive(
    r: &DMatrix<f64>,
    bundle: &DerivativeBundle,
    active: &ActiveSet,
    opts: &VarianceOptions,
) -> Result<DMatrix<f64>> {
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    if r.ncols() != active.len() || r.nrows() != bundle.n() {
        return Err(Error::Shape(
            "r matrix does not match the active set".into(),
        ));
    }
    let idx = active.indices();
    let h_aa = bundle.h.select_rows(idx).select_columns(idx);
    let h_inv = guarded_symmetric_inverse(&h_aa, opts.max_condition)?;
    Ok(sandwich(&h_inv, &middle_moment(r, opts.center_middle)))
}

/// `(I₁⁻¹)_kk` for each `k` in `complement`.
pub fn coef_variance_behavioral(fit: &BehavioralFit, complement: &[usize]) -> Result<Vec<f64>> {
    if complement.is_empty() {
        return Ok(Vec::new());
    }
    if !fit.converged {
        return Err(Error::Contract("behavioral fit has not converged".into()));
    }
    let inv = fit.information_inverse()?;
    Ok(complement.iter().map(|&k| inv[(k, k)].max(0.0)).collect())
}

/// Full-index sandwich `H⁻¹ [1/n Σ (z_i + X q_i)(z_i + X q_i)ᵀ] H⁻ᵀ`, ignoring
/// the selection. Kept for side-by-side comparison.
pub fn coef_variance_baseline(
    bundle: &DerivativeBundle,
    q: &DMatrix<f64>,
    opts: &VarianceOptions,
) -> Result<DMatrix<f64>> {
    check_inputs(bundle, q)?;
    let r = &bundle.z_per_traj + q * bundle.x.transpose();
    let h_inv = guarded_symmetric_inverse(&bundle.h, opts.max_condition)?;
    Ok(sandwich(&h_inv, &middle_moment(&r, opts.center_middle)))
}

/// Combines the active block and the behavioral diagonal into per-coordinate
/// standard errors. `bundle` may be `None` only when `active` is empty.
pub fn coefficient_variance(
    bundle: Option<&DerivativeBundle>,
    q: &DMatrix<f64>,
    fit: &BehavioralFit,
    active: &ActiveSet,
    opts: &VarianceOptions,
) -> Result<CoefficientVariance> {
    let n = fit.n();
    let k = active.dim();
    let complement = active.complement();
    let behavioral_diag = coef_variance_behavioral(fit, &complement)?;
    let active_block = if active.is_empty() {
        DMatrix::zeros(0, 0)
    } else {
        let bundle = bundle.ok_or_else(|| {
            Error::Contract("derivative bundle required for a non-empty active set".into())
        })?;
        let r = assemble_r(bundle, q, active)?;
        coef_variance_adaptive(&r, bundle, active, opts)?
    };
    let mut se = vec![0.0; k];
    for (pos, &j) in active.indices().iter().enumerate() {
        se[j] = (active_block[(pos, pos)].max(0.0) / n as f64).sqrt();
    }
    for (pos, &j) in complement.iter().enumerate() {
        se[j] = (behavioral_diag[pos] / n as f64).sqrt();
    }
    Ok(CoefficientVariance {
        active_block,
        behavioral_diag,
        active: active.clone(),
        n,
        per_coordinate_se: se,
    })
}

/// Influence-function variance of `V_n`: `(1/n²) Σ_i c_i²` with
/// `c_i = (ρ_i G_i − V_n) + (∂V_n/∂b)ᵀ q_i`.
///
/// `obj` should carry the selected active set so the behavioral slots of the
/// hybrid policy move with `b`.
pub fn value_variance(obj: &Objective<'_>, beta: &[f64], q: &DMatrix<f64>) -> Result<f64> {
    let terms = obj.value_terms(beta)?;
    let n = terms.weighted_returns.len();
    if q.nrows() != n || q.ncols() != obj.k() {
        return Err(Error::Shape(
            "influence matrix does not match the dataset".into(),
        ));
    }
    let mut acc = 0.0;
    for (i, wr) in terms.weighted_returns.iter().enumerate() {
        let c = (wr - terms.value) + (q.row(i) * &terms.grad_b)[0];
        acc += c * c;
    }
    Ok(acc / (n as f64 * n as f64))
}
