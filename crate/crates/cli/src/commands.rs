use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use relsparse::checks::{run_checks, CheckOptions};
use relsparse::diagram::{
    emit_diagram, read_diagram_csv, render_panel_svg, replicate_seeds, svg_name, write_diagram_csv,
    DiagramRow, EmpiricalResult, Format, Manifest,
};
use relsparse::objective::KlDirection;
use relsparse::{
    empirical_variance, load_trajectories, simulate as run_simulation, standardize_states,
    LambdaGrid,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::{
    CheckArgs, Common, FormatArg, GridArgs, KlArg, ReplicateArgs, SimArgs, SimulateArgs, SweepArgs,
};

pub enum Outcome {
    Success,
    Failed,
}

pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(anyhow::Error),
    /// Data, numerical or I/O failure; exit code 1.
    Failure(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> std::result::Result<T, CliError>;
    fn failure(self) -> std::result::Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn usage(self) -> std::result::Result<T, CliError> {
        self.map_err(|e| CliError::Usage(e.into()))
    }

    fn failure(self) -> std::result::Result<T, CliError> {
        self.map_err(|e| CliError::Failure(e.into()))
    }
}

type CmdResult = std::result::Result<Outcome, CliError>;

fn base_config(common: &Common) -> std::result::Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref()).usage()?;
    if let Some(t) = common.threads {
        cfg.run.threads = Some(t as usize);
    }
    Ok(cfg)
}

fn apply_sim(cfg: &mut RunConfig, sim: &SimArgs) {
    if let Some(seed) = sim.seed {
        cfg.simulate.seed = seed;
    }
    if let Some(n) = sim.n {
        cfg.simulate.n = n;
    }
    if let Some(h) = sim.horizon {
        cfg.simulate.horizon = h;
    }
}

fn apply_grid(cfg: &mut RunConfig, grid: &GridArgs) {
    let s = &mut cfg.sweep;
    if let Some(g) = &grid.gammas {
        s.gammas = g.clone();
    }
    if let Some(values) = &grid.lambdas {
        s.lambda_grid = LambdaGrid::Explicit {
            values: values.clone(),
        };
    }
    if let Some(fractions) = &grid.lambda_fractions {
        s.lambda_grid = LambdaGrid::Relative {
            fractions: fractions.clone(),
        };
    }
    if let Some(count) = grid.lambda_count {
        s.lambda_grid = LambdaGrid::Auto { count };
    }
    if let Some(d) = grid.delta {
        s.delta = d;
    }
    if let Some(kl) = grid.kl_direction {
        s.objective.kl_direction = match kl {
            KlArg::BehavioralToSuggested => KlDirection::BehavioralToSuggested,
            KlArg::SuggestedToBehavioral => KlDirection::SuggestedToBehavioral,
        };
    }
    if grid.center_middle {
        s.variance.center_middle = true;
    }
    if let Some(seed) = grid.start_seed {
        s.start_seed = seed;
    }
    if let Some(formats) = &grid.format {
        cfg.run.formats = formats
            .iter()
            .map(|f| match f {
                FormatArg::Csv => Format::Csv,
                FormatArg::Svg => Format::Svg,
            })
            .collect();
        cfg.run.formats.dedup();
    }
}

fn thread_pool(cfg: &RunConfig) -> std::result::Result<(rayon::ThreadPool, usize), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.run.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .context("starting the worker pool")
        .failure()?;
    let threads = pool.current_num_threads();
    Ok((pool, threads))
}

fn config_json(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

pub fn simulate(args: SimulateArgs) -> CmdResult {
    let mut cfg = base_config(&args.common)?;
    apply_sim(&mut cfg, &args.sim);
    cfg.io.out = Some(args.out.clone());
    cfg.simulate.validate().usage()?;
    let (pool, threads) = thread_pool(&cfg)?;
    let data = pool.install(|| run_simulation(&cfg.simulate)).failure()?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .failure()?;
    }
    data.save_csv(&args.out).failure()?;

    let mut manifest = Manifest::new("simulate");
    manifest.dataset_fingerprint = Some(data.fingerprint());
    manifest
        .seeds
        .insert("simulation".into(), json!(cfg.simulate.seed));
    manifest.config = config_json(&cfg).failure()?;
    manifest.config["run"]["threads_resolved"] = json!(threads);
    let base = args.out.parent().unwrap_or(Path::new(""));
    manifest.record_output(base, &args.out).failure()?;
    let manifest_path = sidecar(&args.out, "manifest.json");
    manifest.write(&manifest_path).failure()?;
    cfg.write(&sidecar(&args.out, "run_config.toml"))
        .failure()?;
    println!(
        "wrote {} trajectories ({} rows) to {}",
        data.n(),
        data.n() * data.steps(),
        args.out.display()
    );
    Ok(Outcome::Success)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

pub fn sweep(args: SweepArgs) -> CmdResult {
    let mut cfg = base_config(&args.common)?;
    apply_grid(&mut cfg, &args.grid);
    if let Some(d) = &args.data {
        cfg.io.data = Some(d.clone());
    }
    if let Some(o) = &args.out_dir {
        cfg.io.out_dir = Some(o.clone());
    }
    if args.baseline_variance {
        cfg.sweep.baseline_variance = true;
    }
    if args.standardize {
        cfg.data.standardize = true;
    }
    if let Some(cap) = args.weight_cap {
        cfg.sweep.objective.weight_cap = Some(cap);
    }
    let data_path = cfg
        .io
        .data
        .clone()
        .ok_or_else(|| anyhow!("a dataset is required (--data or [io] data)"))
        .usage()?;
    let out_dir = cfg
        .io
        .out_dir
        .clone()
        .ok_or_else(|| anyhow!("an output directory is required (--out-dir or [io] out_dir)"))
        .usage()?;
    cfg.sweep.validate().usage()?;
    if cfg.run.formats.is_empty() {
        return Err(CliError::Usage(anyhow!(
            "at least one output format is required"
        )));
    }

    let (pool, threads) = thread_pool(&cfg)?;
    let raw = load_trajectories(&data_path, &cfg.data.schema)
        .with_context(|| format!("loading {}", data_path.display()))
        .failure()?;
    let (data, standardization) = if cfg.data.standardize {
        let (d, s) = standardize_states(&raw).failure()?;
        (d, Some(s))
    } else {
        (raw, None)
    };
    let result = pool
        .install(|| relsparse::sweep(&data, &cfg.sweep))
        .failure()?;
    let baseline = cfg.sweep.baseline_variance;
    let mut written =
        emit_diagram(&result, None, &out_dir, &cfg.run.formats, baseline).failure()?;

    let sweep_json = out_dir.join("sweep.json");
    write_json(&sweep_json, &result).failure()?;
    written.push(sweep_json);
    let config_path = out_dir.join("run_config.toml");
    cfg.write(&config_path).failure()?;
    written.push(config_path);

    let mut manifest = Manifest::new("sweep");
    manifest.dataset_fingerprint = Some(result.fingerprint.clone());
    manifest
        .seeds
        .insert("start_seed".into(), json!(cfg.sweep.start_seed));
    manifest.seeds.insert(
        "panel_start_seeds".into(),
        json!(result
            .panels
            .iter()
            .map(|p| p.start_seed)
            .collect::<Vec<_>>()),
    );
    manifest.variant_tags = result.tags.clone();
    manifest.failures = result.failures();
    manifest.config = config_json(&cfg).failure()?;
    manifest.config["run"]["threads_resolved"] = json!(threads);
    if let Some(s) = &standardization {
        manifest.config["data"]["standardization"] = serde_json::to_value(s).failure()?;
    }
    for path in &written {
        manifest.record_output(&out_dir, path).failure()?;
    }
    manifest.write(&out_dir.join("manifest.json")).failure()?;

    let total = result.points().count();
    let ok = result.points().filter(|p| p.succeeded()).count();
    println!(
        "swept {} gamma values, {ok}/{total} grid points succeeded; wrote {}",
        result.panels.len(),
        out_dir.display()
    );
    for f in manifest.failures.iter().take(10) {
        eprintln!("failed: {f}");
    }
    Ok(if ok > 0 {
        Outcome::Success
    } else {
        Outcome::Failed
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Copies across-replicate SDs into diagram rows, matching `γ` by value and
/// `λ` by its position within the `γ` block.
fn merge_empirical(rows: &mut [DiagramRow], empirical: &EmpiricalResult) -> Result<()> {
    let mut positions: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for row in rows.iter() {
        let lambdas = positions.entry(row.gamma.to_bits()).or_default();
        if lambdas.last() != Some(&row.lambda) {
            lambdas.push(row.lambda);
        }
    }
    for (bits, lambdas) in &positions {
        let gamma = f64::from_bits(*bits);
        let panel = empirical
            .panels
            .iter()
            .find(|p| p.gamma == gamma)
            .ok_or_else(|| anyhow!("gamma {gamma} in diagram.csv is not in the replicate grid"))?;
        if panel.sd_value.len() != lambdas.len() {
            bail!(
                "gamma {gamma}: diagram.csv has {} lambda values but the replicate grid has {}",
                lambdas.len(),
                panel.sd_value.len()
            );
        }
    }
    for row in rows.iter_mut() {
        let j = positions[&row.gamma.to_bits()]
            .iter()
            .position(|l| *l == row.lambda)
            .expect("lambda indexed above");
        let panel = empirical
            .panels
            .iter()
            .find(|p| p.gamma == row.gamma)
            .expect("gamma checked above");
        row.se_empirical = if row.k == 0 {
            panel.sd_value[j]
        } else {
            panel.sd_beta[j].get(row.k - 1).copied().flatten()
        };
    }
    Ok(())
}

fn empirical_csv(empirical: &EmpiricalResult) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out =
        String::from("gamma,grid_index,k,sd,mean_estimate,mean_se_theoretical,successes\n");
    for p in &empirical.panels {
        for j in 0..p.sd_value.len() {
            let _ = writeln!(
                out,
                "{},{j},0,{},,,{}",
                p.gamma,
                cell(p.sd_value[j]),
                p.successes[j]
            );
            for (c, sd) in p.sd_beta[j].iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{j},{},{},{},{},{}",
                    p.gamma,
                    c + 1,
                    cell(*sd),
                    cell(p.mean_beta[j][c]),
                    cell(p.mean_se[j][c]),
                    p.successes[j]
                );
            }
        }
    }
    out
}

pub fn replicate(args: ReplicateArgs) -> CmdResult {
    let mut cfg = base_config(&args.common)?;
    apply_sim(&mut cfg, &args.sim);
    apply_grid(&mut cfg, &args.grid);
    if let Some(o) = &args.out_dir {
        cfg.io.out_dir = Some(o.clone());
    }
    if let Some(r) = args.replicates {
        cfg.replicate.replicates = r as usize;
    }
    if let Some(s) = args.master_seed {
        cfg.replicate.master_seed = s;
    }
    if args.baseline_variance {
        cfg.sweep.baseline_variance = true;
    }
    let out_dir = cfg
        .io
        .out_dir
        .clone()
        .ok_or_else(|| anyhow!("an output directory is required (--out-dir or [io] out_dir)"))
        .usage()?;
    cfg.validate().usage()?;

    let (pool, threads) = thread_pool(&cfg)?;
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .failure()?;
    let diagram_path = out_dir.join("diagram.csv");
    let mut manifest = Manifest::new("replicate");
    let mut written = Vec::new();

    // Without an earlier sweep, the reference diagram comes from one
    // simulated dataset at the configured seed.
    if !diagram_path.exists() {
        let data = pool.install(|| run_simulation(&cfg.simulate)).failure()?;
        let reference = pool
            .install(|| relsparse::sweep(&data, &cfg.sweep))
            .failure()?;
        emit_diagram(
            &reference,
            None,
            &out_dir,
            &[Format::Csv],
            cfg.sweep.baseline_variance,
        )
        .failure()?;
        manifest.dataset_fingerprint = Some(reference.fingerprint.clone());
        manifest
            .seeds
            .insert("reference_simulation".into(), json!(cfg.simulate.seed));
        manifest.failures.extend(reference.failures());
        manifest.variant_tags = reference.tags.clone();
    } else {
        manifest.variant_tags = cfg.sweep.variant_tags();
    }
    let (mut rows, baseline) = read_diagram_csv(&diagram_path).failure()?;

    let seeds = replicate_seeds(cfg.replicate.master_seed, cfg.replicate.replicates);
    let empirical = pool
        .install(|| empirical_variance(&cfg.simulate, &cfg.sweep, &seeds))
        .failure()?;
    merge_empirical(&mut rows, &empirical).failure()?;

    let file = fs::File::create(&diagram_path)
        .with_context(|| format!("writing {}", diagram_path.display()))
        .failure()?;
    write_diagram_csv(&rows, baseline, std::io::BufWriter::new(file)).failure()?;
    written.push(diagram_path);
    let emp_path = out_dir.join("empirical.csv");
    fs::write(&emp_path, empirical_csv(&empirical))
        .with_context(|| format!("writing {}", emp_path.display()))
        .failure()?;
    written.push(emp_path);
    if cfg.run.formats.contains(&Format::Svg) {
        let mut gammas: Vec<f64> = Vec::new();
        for r in &rows {
            if !gammas.contains(&r.gamma) {
                gammas.push(r.gamma);
            }
        }
        let k = rows.iter().map(|r| r.k).max().unwrap_or(0);
        for g in gammas {
            let panel: Vec<&DiagramRow> = rows.iter().filter(|r| r.gamma == g).collect();
            let path = out_dir.join(svg_name(g));
            fs::write(&path, render_panel_svg(g, k, &panel))
                .with_context(|| format!("writing {}", path.display()))
                .failure()?;
            written.push(path);
        }
    }
    let config_path = out_dir.join("run_config.toml");
    cfg.write(&config_path).failure()?;
    written.push(config_path);

    manifest
        .seeds
        .insert("master_seed".into(), json!(cfg.replicate.master_seed));
    manifest
        .seeds
        .insert("replicate_seeds".into(), json!(seeds));
    manifest.failures.extend(
        empirical
            .failed_replicates
            .iter()
            .map(|(s, e)| format!("replicate seed {s}: {e}")),
    );
    manifest.config = config_json(&cfg).failure()?;
    manifest.config["run"]["threads_resolved"] = json!(threads);
    for path in &written {
        manifest.record_output(&out_dir, path).failure()?;
    }
    manifest.write(&out_dir.join("manifest.json")).failure()?;

    let ok = empirical.replicates - empirical.failed_replicates.len();
    println!(
        "{ok}/{} replicates succeeded; merged into {}",
        empirical.replicates,
        out_dir.join("diagram.csv").display()
    );
    Ok(if ok >= 2 {
        Outcome::Success
    } else {
        Outcome::Failed
    })
}

pub fn check(args: CheckArgs) -> CmdResult {
    let opts = CheckOptions {
        gradient_perturbation: args.perturb_gradient,
        derivative_points: args.points,
        ..CheckOptions::default()
    };
    let outcomes = run_checks(&opts);
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    for o in &outcomes {
        println!(
            "{:<width$}  {}  {:>7.3}s  {}",
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.seconds,
            o.detail
        );
    }
    Ok(if outcomes.iter().all(|o| o.passed) {
        Outcome::Success
    } else {
        Outcome::Failed
    })
}
