use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    coef_variance_baseline, coefficient_variance, value_variance, CoefficientVariance,
    VarianceOptions,
};
use crate::objective::{KlDirection, Objective, ObjectiveOptions};
use crate::policy::{active_set, behavioral_influence, fit_behavioral, ActiveSet, BehavioralFit};
use crate::solvers::{
    adaptive_weights, maximize_m_multistart, maximize_w, saturation_lambda, SolverOptions,
};
use crate::TrajectoryDataset;

/// Penalty levels visited for each `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LambdaGrid {
    /// `0` followed by `count` log-spaced points from `1e-4·λ_sat` to `λ_sat`.
    Auto { count: usize },
    /// The same absolute values for every `γ`.
    Explicit { values: Vec<f64> },
    /// Multiples of each panel's own `λ_sat`.
    Relative { fractions: Vec<f64> },
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto { count: 40 }
    }
}

impl LambdaGrid {
    /// Fractions of `λ_sat` for the auto grid.
    pub fn auto_fractions(count: usize) -> Vec<f64> {
        let mut out = vec![0.0];
        match count {
            0 => {}
            1 => out.push(1.0),
            _ => out
                .extend((0..count).map(|j| 10f64.powf(-4.0 + 4.0 * j as f64 / (count - 1) as f64))),
        }
        out
    }

    /// Fractions of `λ_sat`, or `None` for absolute grids.
    pub fn fractions(&self) -> Option<Vec<f64>> {
        match self {
            LambdaGrid::Auto { count } => Some(Self::auto_fractions(*count)),
            LambdaGrid::Relative { fractions } => Some(fractions.clone()),
            LambdaGrid::Explicit { .. } => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LambdaGrid::Auto { count } => Self::auto_fractions(*count).len(),
            LambdaGrid::Explicit { values } => values.len(),
            LambdaGrid::Relative { fractions } => fractions.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let values = match self {
            LambdaGrid::Auto { .. } => return Ok(()),
            LambdaGrid::Explicit { values } => values,
            LambdaGrid::Relative { fractions } => fractions,
        };
        if values.is_empty() {
            return Err(Error::Config("lambda grid is empty".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "lambda grid entries must be finite and >= 0".into(),
            ));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "lambda grid must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub lambda_grid: LambdaGrid,
    pub delta: f64,
    /// Seed of the stage-one restarts; panel `g` uses `start_seed + g`.
    pub start_seed: u64,
    /// Also compute the full-index sandwich at every point.
    pub baseline_variance: bool,
    pub objective: ObjectiveOptions,
    pub solver: SolverOptions,
    pub variance: VarianceOptions,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.1, 1.0, 10.0],
            lambda_grid: LambdaGrid::default(),
            delta: 1.0,
            start_seed: 0,
            baseline_variance: false,
            objective: ObjectiveOptions::default(),
            solver: SolverOptions::default(),
            variance: VarianceOptions::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() {
            return Err(Error::Config("gamma grid is empty".into()));
        }
        if self.gammas.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Config(
                "gamma grid entries must be finite and > 0".into(),
            ));
        }
        if self.gammas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "gamma grid must be strictly increasing".into(),
            ));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::Config(format!(
                "delta must be positive (got {})",
                self.delta
            )));
        }
        self.lambda_grid.validate()
    }

    /// Labels describing which estimators produced the output.
    pub fn variant_tags(&self) -> BTreeMap<String, String> {
        let mut tags = BTreeMap::new();
        let mut put = |k: &str, v: &str| {
            tags.insert(k.to_string(), v.to_string());
        };
        put("coefficient_variance", "adaptive-sandwich");
        put("behavioral_variance", "inverse-fisher");
        put(
            "middle_moment",
            if self.variance.center_middle {
                "centered"
            } else {
                "uncentered"
            },
        );
        put("derivative_point", "penalized-solution");
        put("importance_sampling", "trajectory");
        put(
            "kl_direction",
            match self.objective.kl_direction {
                KlDirection::BehavioralToSuggested => "behavioral-to-suggested",
                KlDirection::SuggestedToBehavioral => "suggested-to-behavioral",
            },
        );
        put("value_variance", "delta-method-reconstruction");
        if self.baseline_variance {
            put("baseline_variance", "full-sandwich-reconstruction");
        }
        tags
    }
}

/// One `(γ, λ)` grid point.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub lambda: f64,
    /// `β_{n,γ,λ}`; empty when the solver failed.
    pub beta: Vec<f64>,
    /// 0-based indices of coordinates that differ from `b_n`.
    pub active: Vec<usize>,
    pub se: Vec<f64>,
    pub se_baseline: Option<Vec<f64>>,
    pub value: Option<f64>,
    pub value_se: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
    #[serde(skip)]
    pub variance: Option<CoefficientVariance>,
}

impl SweepPoint {
    fn failed(gamma: f64, lambda: f64, error: String) -> Self {
        Self {
            gamma,
            lambda,
            beta: Vec::new(),
            active: Vec::new(),
            se: Vec::new(),
            se_baseline: None,
            value: None,
            value_se: None,
            converged: false,
            error: Some(error),
            variance: None,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// All grid points for one `γ`.
#[derive(Debug, Clone, Serialize)]
pub struct GammaPanel {
    pub gamma: f64,
    pub start_seed: u64,
    /// `β_{n,γ}`, the unpenalized maximizer.
    pub beta_gamma: Vec<f64>,
    pub stage_one_converged: bool,
    pub weights: Vec<f64>,
    pub lambda_sat: Option<f64>,
    pub lambdas: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub n: usize,
    pub k: usize,
    pub delta: f64,
    pub fingerprint: String,
    pub b_n: Vec<f64>,
    pub behavioral_se: Vec<f64>,
    pub behavioral_converged: bool,
    pub tags: BTreeMap<String, String>,
    pub panels: Vec<GammaPanel>,
}

impl SweepResult {
    pub fn points(&self) -> impl Iterator<Item = &SweepPoint> {
        self.panels.iter().flat_map(|p| p.points.iter())
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.panels.iter().map(|p| p.gamma).collect()
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.panels {
            if let Some(e) = &p.error {
                out.push(format!("gamma={}: {e}", p.gamma));
            }
            for pt in &p.points {
                if let Some(e) = &pt.error {
                    out.push(format!("gamma={} lambda={}: {e}", pt.gamma, pt.lambda));
                }
            }
        }
        out
    }
}

struct Shared<'a> {
    data: &'a TrajectoryDataset,
    fit: &'a BehavioralFit,
    b: &'a [f64],
    q: &'a DMatrix<f64>,
    cfg: &'a SweepConfig,
}

/// Fits `b_n` and traces the penalized path for every `γ`.
///
/// Failures inside a panel or at a single point are recorded and the sweep
/// continues; only the behavioral fit is fatal.
pub fn sweep(data: &TrajectoryDataset, cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let fit = fit_behavioral(data)?;
    sweep_with_fit(data, &fit, cfg)
}

pub fn sweep_with_fit(
    data: &TrajectoryDataset,
    fit: &BehavioralFit,
    cfg: &SweepConfig,
) -> Result<SweepResult> {
    cfg.validate()?;
    let b = fit.b_n.as_slice().to_vec();
    let q = behavioral_influence(fit)?;
    let behavioral_se = fit.model_se()?;
    let shared = Shared {
        data,
        fit,
        b: &b,
        q: &q,
        cfg,
    };
    let panels = cfg
        .gammas
        .par_iter()
        .enumerate()
        .map(|(g, &gamma)| run_panel(&shared, gamma, cfg.start_seed.wrapping_add(g as u64)))
        .collect();
    Ok(SweepResult {
        n: data.n(),
        k: data.k(),
        delta: cfg.delta,
        fingerprint: data.fingerprint(),
        b_n: b,
        behavioral_se,
        behavioral_converged: fit.converged,
        tags: cfg.variant_tags(),
        panels,
    })
}

fn run_panel(s: &Shared<'_>, gamma: f64, seed: u64) -> GammaPanel {
    let mut panel = GammaPanel {
        gamma,
        start_seed: seed,
        beta_gamma: Vec::new(),
        stage_one_converged: false,
        weights: Vec::new(),
        lambda_sat: None,
        lambdas: Vec::new(),
        points: Vec::new(),
        error: None,
    };
    let k = s.data.k();
    let obj = match Objective::new(s.data, s.b, gamma, ActiveSet::full(k), s.cfg.objective) {
        Ok(o) => o,
        Err(e) => {
            panel.error = Some(e.to_string());
            return panel;
        }
    };
    let stage_one = maximize_m_multistart(&obj, s.b, seed, &s.cfg.solver).and_then(|r| {
        Ok((
            adaptive_weights(r.solution.as_slice(), s.b, s.cfg.delta)?,
            r,
        ))
    });
    let (weights, stage_one) = match stage_one {
        Ok(v) => v,
        Err(e) => {
            panel.error = Some(e.to_string());
            return panel;
        }
    };
    let beta_gamma = stage_one.solution.as_slice().to_vec();
    panel.stage_one_converged = stage_one.converged;
    panel.beta_gamma = beta_gamma.clone();
    panel.weights = weights.clone();

    let lambda_sat = saturation_lambda(&obj, &weights, &beta_gamma, &s.cfg.solver);
    let lambdas = match (&s.cfg.lambda_grid, lambda_sat) {
        (LambdaGrid::Explicit { values }, sat) => {
            panel.lambda_sat = sat.ok();
            values.clone()
        }
        (grid, Ok(sat)) => {
            panel.lambda_sat = Some(sat);
            let mut lambdas: Vec<f64> = grid
                .fractions()
                .unwrap_or_default()
                .iter()
                .map(|f| f * sat)
                .collect();
            lambdas.dedup();
            lambdas
        }
        (_, Err(e)) => {
            panel.error = Some(format!("saturation search failed: {e}"));
            return panel;
        }
    };
    panel.lambdas = lambdas.clone();

    let mut init = beta_gamma;
    let mut path = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        match maximize_w(&obj, lambda, &weights, &init, &s.cfg.solver) {
            Ok(r) => {
                init = r.solution.as_slice().to_vec();
                path.push(Ok((init.clone(), r.converged)));
            }
            Err(e) => path.push(Err(e.to_string())),
        }
    }
    panel.points = lambdas
        .par_iter()
        .zip(path.into_par_iter())
        .map(|(&lambda, solved)| match solved {
            Ok((beta, converged)) => match infer_point(s, &obj, &beta) {
                Ok(mut point) => {
                    point.gamma = gamma;
                    point.lambda = lambda;
                    point.converged = converged;
                    point
                }
                Err(e) => {
                    let mut p = SweepPoint::failed(gamma, lambda, e.to_string());
                    p.beta = beta;
                    p.converged = converged;
                    p
                }
            },
            Err(e) => SweepPoint::failed(gamma, lambda, e),
        })
        .collect();
    panel
}

fn infer_point(s: &Shared<'_>, obj: &Objective<'_>, beta: &[f64]) -> Result<SweepPoint> {
    let n = s.data.n() as f64;
    let active = active_set(beta, s.b, 0.0);
    let bundle = if !active.is_empty() || s.cfg.baseline_variance {
        Some(obj.derivatives(beta)?)
    } else {
        None
    };
    let variance = coefficient_variance(bundle.as_ref(), s.q, s.fit, &active, &s.cfg.variance)?;
    let se_baseline = match (&bundle, s.cfg.baseline_variance) {
        (Some(bundle), true) => coef_variance_baseline(bundle, s.q, &s.cfg.variance)
            .ok()
            .map(|m| {
                m.diagonal()
                    .iter()
                    .map(|v| (v.max(0.0) / n).sqrt())
                    .collect()
            }),
        _ => None,
    };
    let hybrid = Objective::new(s.data, s.b, obj.gamma(), active.clone(), s.cfg.objective)?;
    let value = hybrid.value(beta);
    let value_se = value_variance(&hybrid, beta, s.q)?.sqrt();
    Ok(SweepPoint {
        gamma: obj.gamma(),
        lambda: 0.0,
        beta: beta.to_vec(),
        active: active.indices().to_vec(),
        se: variance.per_coordinate_se.clone(),
        se_baseline,
        value: Some(value),
        value_se: Some(value_se),
        converged: true,
        error: None,
        variance: Some(variance),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::penalized_objective;
    use crate::{simulate, SimConfig};

    fn data(n: usize, seed: u64) -> TrajectoryDataset {
        simulate(&SimConfig {
            n,
            seed,
            ..SimConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn auto_fractions_shape() {
        let f = LambdaGrid::auto_fractions(40);
        assert_eq!(f.len(), 41);
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 1e-4).abs() < 1e-18);
        assert_eq!(f[40], 1.0);
        assert_eq!(LambdaGrid::auto_fractions(1), vec![0.0, 1.0]);
    }

    #[test]
    fn grid_validation() {
        let bad = SweepConfig {
            lambda_grid: LambdaGrid::Explicit {
                values: vec![0.1, 0.05],
            },
            ..SweepConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SweepConfig {
            gammas: vec![],
            ..SweepConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SweepConfig {
            gammas: vec![0.0],
            ..SweepConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn sweep_shape_and_endpoints() {
        let d = data(500, 3);
        let cfg = SweepConfig {
            lambda_grid: LambdaGrid::Auto { count: 19 },
            ..SweepConfig::default()
        };
        let r = sweep(&d, &cfg).unwrap();
        assert_eq!(r.panels.len(), 3);
        assert_eq!(r.points().count(), 60);
        for p in &r.panels {
            assert!(p.error.is_none());
            let first = &p.points[0];
            assert_eq!(first.lambda, 0.0);
            for (a, b) in first.beta.iter().zip(&p.beta_gamma) {
                assert!((a - b).abs() <= 1e-6);
            }
            let last = p.points.last().unwrap();
            assert_eq!(last.lambda, p.lambda_sat.unwrap());
            assert_eq!(last.beta, r.b_n);
            assert!(last.active.is_empty());
            assert_eq!(last.se, r.behavioral_se);
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let d = data(300, 8);
        let cfg = SweepConfig {
            lambda_grid: LambdaGrid::Auto { count: 5 },
            ..SweepConfig::default()
        };
        let a = serde_json::to_string(&sweep(&d, &cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&sweep(&d, &cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warm_path_matches_cold_solves() {
        let d = data(500, 12);
        let cfg = SweepConfig {
            gammas: vec![1.0],
            lambda_grid: LambdaGrid::Auto { count: 4 },
            ..SweepConfig::default()
        };
        let r = sweep(&d, &cfg).unwrap();
        let panel = &r.panels[0];
        assert_eq!(panel.points.len(), 5);
        let obj = Objective::new(
            &d,
            &r.b_n,
            1.0,
            ActiveSet::full(2),
            ObjectiveOptions::default(),
        )
        .unwrap();
        for p in &panel.points {
            let cold = maximize_w(&obj, p.lambda, &panel.weights, &r.b_n, &cfg.solver).unwrap();
            let warm = penalized_objective(&obj, &p.beta, p.lambda, &panel.weights);
            assert!(
                (cold.objective_value - warm).abs() <= 1e-6,
                "{} vs {warm}",
                cold.objective_value
            );
        }
    }

    #[test]
    fn every_sandwich_is_symmetric_psd() {
        let d = data(400, 21);
        let r = sweep(&d, &SweepConfig::default()).unwrap();
        let mut checked = 0;
        for p in r.points() {
            let v = p.variance.as_ref().unwrap();
            let m = &v.active_block;
            if m.nrows() == 0 {
                continue;
            }
            assert!((m - m.transpose()).amax() <= 1e-10);
            let min = m.clone().symmetric_eigen().eigenvalues.min();
            assert!(min >= -1e-10 * m.trace());
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn failures_are_recorded_per_point() {
        let d = data(200, 5);
        let cfg = SweepConfig {
            gammas: vec![1.0],
            lambda_grid: LambdaGrid::Explicit {
                values: vec![0.0, 0.5],
            },
            objective: ObjectiveOptions {
                weight_cap: Some(10.0),
                ..ObjectiveOptions::default()
            },
            ..SweepConfig::default()
        };
        let r = sweep(&d, &cfg).unwrap();
        let p = &r.panels[0];
        assert_eq!(p.points.len(), 2);
        for pt in &p.points {
            if !pt.active.is_empty() || pt.error.is_some() {
                assert!(
                    pt.error.as_deref().unwrap_or("").contains("cap"),
                    "{:?}",
                    pt.error
                );
            }
        }
        assert!(!r.failures().is_empty());
    }
}
