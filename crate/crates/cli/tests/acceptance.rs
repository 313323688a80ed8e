//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use relsparse::checks::{builtin_dataset, derivative_check, prox_check};
use relsparse::diagram::read_diagram_csv;
use relsparse::{
    active_set, adaptive_weights, bernoulli_kl, coef_variance_baseline, empirical_variance,
    fit_behavioral, kl_est, maximize_m, maximize_w, replicate_seeds, saturation_lambda, simulate,
    sweep, value_is, ActiveSet, KlDirection, LambdaGrid, Objective, ObjectiveOptions, SimConfig,
    SolverOptions, SweepConfig, TrajectoryDataset, VarianceOptions,
};

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn derivative_correctness() -> Check {
    let started = Instant::now();
    let data = builtin_dataset(2024).map_err(err)?;
    let worst = derivative_check(&data, 60, 0.0, 7).map_err(err)?;
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-5 && secs < 30.0,
        format!("60 points, max relative error {worst:.2e}, {secs:.1} s"),
    ))
}

fn prox_correctness() -> Check {
    let (gap, exact) = prox_check(1000, 99);
    Ok((
        gap <= 1e-4 && exact,
        format!("1000 triples, max gap to grid argmin {gap:.2e}, dead zone bitwise: {exact}"),
    ))
}

fn path_endpoints() -> Check {
    let opts = SolverOptions::default();
    let mut worst_zero: f64 = 0.0;
    let mut all_tied = true;
    for seed in 301..306 {
        let data = simulate(&SimConfig {
            n: 500,
            seed,
            ..SimConfig::default()
        })
        .map_err(err)?;
        let b = fit_behavioral(&data).map_err(err)?.b_n.as_slice().to_vec();
        for gamma in [0.1, 1.0, 10.0] {
            let obj = Objective::new(
                &data,
                &b,
                gamma,
                ActiveSet::full(2),
                ObjectiveOptions::default(),
            )
            .map_err(err)?;
            let bg = maximize_m(&obj, &b, &opts)
                .map_err(err)?
                .solution
                .as_slice()
                .to_vec();
            let w = adaptive_weights(&bg, &b, 1.0).map_err(err)?;
            let zero = maximize_w(&obj, 0.0, &w, &bg, &opts).map_err(err)?;
            for (x, y) in zero.solution.as_slice().iter().zip(&bg) {
                worst_zero = worst_zero.max((x - y).abs());
            }
            let sat = saturation_lambda(&obj, &w, &bg, &opts).map_err(err)?;
            for mult in [1.0, 2.0, 10.0] {
                let s = maximize_w(&obj, sat * mult, &w, &bg, &opts).map_err(err)?;
                let beta = s.solution.as_slice();
                let bitwise = beta.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
                all_tied &= bitwise && active_set(beta, &b, 0.0).is_empty();
            }
        }
    }
    Ok((
        worst_zero <= 1e-6 && all_tied,
        format!("5 datasets x 3 gammas, max |beta(0) - beta_gamma| {worst_zero:.2e}, tied at 1, 2, 10 x lambda_sat: {all_tied}"),
    ))
}

fn default_sweep() -> Result<(TrajectoryDataset, relsparse::SweepResult), String> {
    let data = simulate(&SimConfig::default()).map_err(err)?;
    let result = sweep(&data, &SweepConfig::default()).map_err(err)?;
    Ok((data, result))
}

fn estimator_reduction(data: &TrajectoryDataset, result: &relsparse::SweepResult) -> Check {
    let fit = fit_behavioral(data).map_err(err)?;
    let q = relsparse::behavioral_influence(&fit).map_err(err)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for p in result.points().filter(|p| p.active.len() == data.k()) {
        let var = p
            .variance
            .as_ref()
            .ok_or("full-selection point without variance")?;
        let obj = Objective::new(
            data,
            &result.b_n,
            p.gamma,
            ActiveSet::full(data.k()),
            ObjectiveOptions::default(),
        )
        .map_err(err)?;
        let bundle = obj.derivatives(&p.beta).map_err(err)?;
        let baseline =
            coef_variance_baseline(&bundle, &q, &VarianceOptions::default()).map_err(err)?;
        worst = worst.max((&var.active_block - baseline).amax());
        checked += 1;
    }
    Ok((
        checked > 0 && worst <= 1e-10,
        format!("{checked} full-selection points, max elementwise gap {worst:.2e}"),
    ))
}

fn sandwich_structure(result: &relsparse::SweepResult) -> Check {
    let mut worst_asym: f64 = 0.0;
    let mut worst_eig: f64 = 0.0;
    let mut count = 0;
    for p in result.points() {
        if !p.converged || p.error.is_some() {
            return Ok((
                false,
                format!("point gamma={} lambda={} failed", p.gamma, p.lambda),
            ));
        }
        let Some(v) = p.variance.as_ref() else {
            continue;
        };
        let m = &v.active_block;
        if m.nrows() == 0 {
            continue;
        }
        count += 1;
        worst_asym = worst_asym.max((m - m.transpose()).amax());
        let min_eig = m.clone().symmetric_eigenvalues().min();
        worst_eig = worst_eig.max(-min_eig / m.trace().abs().max(f64::MIN_POSITIVE));
    }
    Ok((
        count > 0 && worst_asym <= 1e-10 && worst_eig <= 1e-10,
        format!("{count} matrices, max asymmetry {worst_asym:.2e}, worst -min_eig/trace {worst_eig:.2e}"),
    ))
}

fn monte_carlo_calibration() -> Check {
    let started = Instant::now();
    let sim = SimConfig::default();
    let cfg = SweepConfig {
        gammas: vec![1.0],
        lambda_grid: LambdaGrid::Relative {
            fractions: vec![0.0, 1.0],
        },
        ..SweepConfig::default()
    };
    let seeds = replicate_seeds(2718, 200);
    let emp = empirical_variance(&sim, &cfg, &seeds).map_err(err)?;
    let panel = &emp.panels[0];
    let mut ok = emp.failed_replicates.is_empty();
    let mut parts = Vec::new();
    for k in 0..2 {
        let ratio = panel.mean_se[0][k]
            .zip(panel.sd_beta[0][k])
            .map(|(se, sd)| se / sd);
        ok &= ratio.is_some_and(|r| (0.5..=2.0).contains(&r));
        parts.push(format!(
            "lambda=0 k={}: {:.2}",
            k + 1,
            ratio.unwrap_or(f64::NAN)
        ));
    }
    // Independent Fisher-based SE per replicate, compared bitwise.
    let exact = seeds
        .par_iter()
        .zip(&emp.runs)
        .map(|(&seed, run)| -> Result<bool, String> {
            let data = simulate(&SimConfig {
                seed,
                ..sim.clone()
            })
            .map_err(err)?;
            let se = fit_behavioral(&data)
                .map_err(err)?
                .model_se()
                .map_err(err)?;
            let last = run.panels[0].points.last().ok_or("empty panel")?;
            Ok(last.active.is_empty()
                && last
                    .se
                    .iter()
                    .zip(&se)
                    .all(|(a, b)| a.to_bits() == b.to_bits()))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|&e| e)
        .count();
    ok &= exact == seeds.len();
    for k in 0..2 {
        let ratio = panel.mean_se[1][k]
            .zip(emp.sd_b_n[k])
            .map(|(se, sd)| se / sd);
        ok &= ratio.is_some_and(|r| (0.5..=2.0).contains(&r));
        parts.push(format!(
            "lambda_sat k={}: {:.2}",
            k + 1,
            ratio.unwrap_or(f64::NAN)
        ));
    }
    Ok((
        ok,
        format!(
            "200 replicates, SE/SD {}; behavioral SE exact in {exact}/200; {:.0} s",
            parts.join(", "),
            started.elapsed().as_secs_f64()
        ),
    ))
}

fn relsparse_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_relsparse"))
        .args(args)
        .output()
        .map_err(err)?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "relsparse {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn behavioral_region_control(result: &relsparse::SweepResult) -> Check {
    let max_behavioral = result.behavioral_se.iter().copied().fold(0.0, f64::max);
    let mut bounded = true;
    for panel in &result.panels {
        let last = panel.points.last().ok_or("empty panel")?;
        let max_se = last.se.iter().copied().fold(0.0, f64::max);
        bounded &= max_se <= max_behavioral + 1e-12;
    }

    let dir = tempfile::tempdir().map_err(err)?;
    let data = dir.path().join("d.csv");
    relsparse_bin(&["simulate", "--seed", "41", "--n", "1000", "--out", p(&data)])?;
    let out = dir.path().join("sweep");
    relsparse_bin(&[
        "sweep",
        "--data",
        p(&data),
        "--out-dir",
        p(&out),
        "--gammas",
        "1",
        "--lambda-count",
        "10",
        "--baseline-variance",
        "--format",
        "csv",
    ])?;
    let header = fs::read_to_string(out.join("diagram.csv")).map_err(err)?;
    let header = header.lines().next().unwrap_or_default().to_string();
    let columns = header.contains(",se_theoretical,") && header.ends_with(",se_baseline");
    let (rows, _) = read_diagram_csv(&out.join("diagram.csv")).map_err(err)?;
    let top = rows.iter().map(|r| r.lambda).fold(0.0, f64::max);
    let at_sat: Vec<_> = rows.iter().filter(|r| r.lambda == top && r.k > 0).collect();
    let adaptive = at_sat
        .iter()
        .filter_map(|r| r.se_theoretical)
        .fold(0.0, f64::max);
    let baseline = at_sat
        .iter()
        .filter_map(|r| r.se_baseline)
        .fold(0.0, f64::max);
    Ok((
        bounded && columns && !at_sat.is_empty() && baseline > 0.0,
        format!(
            "max SE at lambda_sat <= behavioral {max_behavioral:.4} in every panel: {bounded}; \
             CSV at lambda_sat: adaptive max {adaptive:.4}, baseline max {baseline:.4}"
        ),
    ))
}

// Two-state toy system: s = (1, x), x in {0, 1}, two steps per trajectory.
const TOY_B: [f64; 2] = [-0.2, 0.6];
const TOY_BETA: [f64; 2] = [0.8, -1.0];

fn toy_p1(coef: [f64; 2], x: u8) -> f64 {
    1.0 / (1.0 + (-(coef[0] + coef[1] * x as f64)).exp())
}

fn toy_flip(a: u8) -> f64 {
    if a == 1 {
        0.8
    } else {
        0.1
    }
}

fn toy_reward(x: u8, a: u8) -> f64 {
    a as f64 * (2.0 * x as f64 - 1.0) + 0.5 * x as f64
}

fn toy_exact(coef: [f64; 2]) -> f64 {
    let pa = |x: u8, a: u8| {
        if a == 1 {
            toy_p1(coef, x)
        } else {
            1.0 - toy_p1(coef, x)
        }
    };
    let mut v = 0.0;
    for x0 in 0..2u8 {
        for a0 in 0..2u8 {
            for x1 in 0..2u8 {
                let pt = if x1 != x0 {
                    toy_flip(a0)
                } else {
                    1.0 - toy_flip(a0)
                };
                for a1 in 0..2u8 {
                    let prob = 0.5 * pa(x0, a0) * pt * pa(x1, a1);
                    v += prob * (toy_reward(x0, a0) + toy_reward(x1, a1));
                }
            }
        }
    }
    v
}

fn toy_dataset(n: usize, rng: &mut ChaCha8Rng) -> relsparse::Result<TrajectoryDataset> {
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let mut x = rng.random_bool(0.5) as u8;
        for _ in 0..2 {
            let a = rng.random_bool(toy_p1(TOY_B, x)) as u8;
            states.extend_from_slice(&[1.0, x as f64]);
            actions.push(a);
            rewards.push(toy_reward(x, a));
            if rng.random_bool(toy_flip(a)) {
                x = 1 - x;
            }
        }
    }
    TrajectoryDataset::new(n, 2, 2, states, actions, rewards)
}

fn importance_sampling_oracle() -> Check {
    let datasets = 10_000;
    let mut parts = Vec::new();
    let mut ok = true;
    // Full suggested policy, then the hybrid using TOY_B on the intercept.
    for (active, target) in [
        (ActiveSet::full(2), TOY_BETA),
        (
            ActiveSet::from_indices(2, vec![1]).map_err(err)?,
            [TOY_B[0], TOY_BETA[1]],
        ),
    ] {
        let exact = toy_exact(target);
        let estimates = (0..datasets)
            .into_par_iter()
            .map(|d| {
                let mut rng = ChaCha8Rng::seed_from_u64(90_000 + d as u64);
                let data = toy_dataset(40, &mut rng)?;
                value_is(
                    &data,
                    &TOY_BETA,
                    &TOY_B,
                    &active,
                    &ObjectiveOptions::default(),
                )
            })
            .collect::<relsparse::Result<Vec<f64>>>()
            .map_err(err)?;
        let n = estimates.len() as f64;
        let mean = estimates.iter().sum::<f64>() / n;
        let sd = (estimates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let z = (mean - exact) / (sd / n.sqrt());
        ok &= z.abs() <= 3.0;
        parts.push(format!(
            "|A|={}: exact {exact:.5}, mean {mean:.5}, z {z:+.2}",
            active.len()
        ));
    }
    Ok((ok, format!("10000 datasets; {}", parts.join("; "))))
}

fn kl_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut at_b: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for draw in 0..1000 {
        let data = simulate(&SimConfig {
            n: 20,
            seed: 7000 + draw,
            ..SimConfig::default()
        })
        .map_err(err)?;
        let b = fit_behavioral(&data).map_err(err)?.b_n.as_slice().to_vec();
        let beta: Vec<f64> = b.iter().map(|v| v + rng.random_range(-3.0..3.0)).collect();
        let active = ActiveSet::from_indices(2, (0..2).filter(|_| rng.random_bool(0.5)).collect())
            .map_err(err)?;
        for dir in [
            KlDirection::BehavioralToSuggested,
            KlDirection::SuggestedToBehavioral,
        ] {
            at_b = at_b.max(kl_est(&data, &b, &b, &ActiveSet::full(2), dir));
            min_kl = min_kl.min(kl_est(&data, &beta, &b, &active, dir));
        }
    }
    let pair = (bernoulli_kl(0.5, 0.75) - 0.5 * (4.0f64 / 3.0).ln()).abs();
    // One trajectory, one state with p = 1/2 under b and q = 3/4 under beta.
    let one = TrajectoryDataset::new(1, 1, 1, vec![1.0], vec![0], vec![0.0]).map_err(err)?;
    let logit = kl_est(
        &one,
        &[3f64.ln()],
        &[0.0],
        &ActiveSet::full(1),
        KlDirection::BehavioralToSuggested,
    );
    let logit_gap = (logit - 0.5 * (4.0f64 / 3.0).ln()).abs();
    Ok((
        at_b <= 1e-14 && min_kl >= 0.0 && pair <= 1e-12 && logit_gap <= 1e-12,
        format!("KL at b_n {at_b:.1e}, min over 1000 draws {min_kl:.2e}, pair error {pair:.1e}, logit path error {logit_gap:.1e}"),
    ))
}

fn end_to_end_determinism() -> Check {
    let root = tempfile::tempdir().map_err(err)?;
    let run = |name: &str| -> Result<Vec<Vec<u8>>, String> {
        let dir = root.path().join(name);
        fs::create_dir_all(&dir).map_err(err)?;
        let data = dir.join("d.csv");
        let out = dir.join("out");
        relsparse_bin(&[
            "simulate",
            "--seed",
            "13",
            "--n",
            "400",
            "--out",
            p(&data),
            "--threads",
            "3",
        ])?;
        relsparse_bin(&[
            "sweep",
            "--data",
            p(&data),
            "--out-dir",
            p(&out),
            "--lambda-count",
            "8",
            "--threads",
            "3",
        ])?;
        let swept = fs::read(out.join("diagram.csv")).map_err(err)?;
        relsparse_bin(&[
            "replicate",
            "--out-dir",
            p(&out),
            "--lambda-count",
            "8",
            "--replicates",
            "6",
            "--master-seed",
            "5",
            "--n",
            "400",
            "--threads",
            "3",
        ])?;
        Ok(vec![
            fs::read(&data).map_err(err)?,
            swept,
            fs::read(out.join("diagram.csv")).map_err(err)?,
            fs::read(out.join("empirical.csv")).map_err(err)?,
        ])
    };
    let (a, b) = (run("a")?, run("b")?);
    let same = a == b;
    let bytes: usize = a.iter().map(Vec::len).sum();
    Ok((
        same,
        format!("4 CSVs ({bytes} bytes) byte-identical across two pipelines: {same}"),
    ))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    results.push((1, "derivative correctness", derivative_correctness()));
    results.push((2, "prox correctness", prox_correctness()));
    results.push((3, "path endpoints", path_endpoints()));
    match default_sweep() {
        Ok((data, sweep)) => {
            results.push((4, "estimator reduction", estimator_reduction(&data, &sweep)));
            results.push((5, "sandwich structure", sandwich_structure(&sweep)));
            results.push((6, "monte carlo calibration", monte_carlo_calibration()));
            results.push((
                7,
                "behavioral-region control",
                behavioral_region_control(&sweep),
            ));
        }
        Err(e) => {
            for (i, name) in [
                (4, "estimator reduction"),
                (5, "sandwich structure"),
                (7, "behavioral-region control"),
            ] {
                results.push((i, name, Err(e.clone())));
            }
            results.push((6, "monte carlo calibration", monte_carlo_calibration()));
        }
    }
    results.push((
        8,
        "importance-sampling oracle",
        importance_sampling_oracle(),
    ));
    results.push((9, "kl identities", kl_identities()));
    results.push((10, "end-to-end determinism", end_to_end_determinism()));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (i, name, check) in &results {
        let (pass, detail) = match check {
            Ok((pass, detail)) => (*pass, detail.clone()),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "criterion {i:>2} {} {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
