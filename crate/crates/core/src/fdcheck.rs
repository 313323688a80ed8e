//! Central finite differences of `M_n`, used to verify the analytic
//! derivative bundle.
//!
//! Every derivative here is formed from evaluations of `M_n` alone; nothing
//! reuses the analytic gradient code.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::objective::{Objective, ObjectiveOptions};
use crate::policy::ActiveSet;
use crate::TrajectoryDataset;

/// `1e-5 · max(1, |x|)`, for first differences.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// `1e-4 · max(1, |x|)`, for second differences. Near `ε^{1/4}`: a smaller
/// step lets rounding in `M_n` dominate the `1/h²` quotient.
pub fn fd_step2(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// `|a − b| / max(|a|, |b|, 1)`: relative error with a unit floor so entries
/// that vanish analytically are compared on an absolute scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone)]
pub struct NumericDerivatives {
    pub j: DVector<f64>,
    pub h: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

/// Finite-difference `J_n`, `H_n` and `X_n` at `(beta, b)`.
pub fn numeric_derivatives(
    data: &TrajectoryDataset,
    beta: &[f64],
    b: &[f64],
    gamma: f64,
    active: &ActiveSet,
    opts: &ObjectiveOptions,
) -> Result<NumericDerivatives> {
    let k = beta.len();
    let base = Objective::new(data, b, gamma, active.clone(), *opts)?;
    let m = |x: &[f64]| base.objective(x);
    let shifted = |v: &[f64], j: usize, h: f64| {
        let mut out = v.to_vec();
        out[j] += h;
        out
    };

    let mut j = DVector::zeros(k);
    for r in 0..k {
        let h = fd_step(beta[r]);
        j[r] = (m(&shifted(beta, r, h)) - m(&shifted(beta, r, -h))) / (2.0 * h);
    }

    let mut hess = DMatrix::zeros(k, k);
    for r in 0..k {
        for c in r..k {
            let (hr, hc) = (fd_step2(beta[r]), fd_step2(beta[c]));
            let at = |sr: f64, sc: f64| m(&shifted(&shifted(beta, r, sr * hr), c, sc * hc));
            let v =
                (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * hr * hc);
            hess[(r, c)] = v;
            hess[(c, r)] = v;
        }
    }

    let mut cross = DMatrix::zeros(k, k);
    for c in 0..k {
        let hb = fd_step2(b[c]);
        let plus = Objective::new(data, &shifted(b, c, hb), gamma, active.clone(), *opts)?;
        let minus = Objective::new(data, &shifted(b, c, -hb), gamma, active.clone(), *opts)?;
        for r in 0..k {
            let h = fd_step2(beta[r]);
            let up = shifted(beta, r, h);
            let down = shifted(beta, r, -h);
            cross[(r, c)] = (plus.objective(&up) - minus.objective(&up) - plus.objective(&down)
                + minus.objective(&down))
                / (4.0 * h * hb);
        }
    }
    Ok(NumericDerivatives {
        j,
        h: hess,
        x: cross,
    })
}

/// Largest [`relative_error`] between corresponding entries.
pub fn max_relative_error<'a>(
    analytic: impl IntoIterator<Item = &'a f64>,
    numeric: impl IntoIterator<Item = &'a f64>,
) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, b)| relative_error(*a, *b))
        .fold(0.0, f64::max)
}
