use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::replicate::EmpiricalResult;
use super::svg::render_panel_svg;
use super::sweep::SweepResult;

pub const DIAGRAM_HEADER: [&str; 11] = [
    "gamma",
    "lambda",
    "k",
    "beta",
    "b_k",
    "selected",
    "se_theoretical",
    "se_empirical",
    "value",
    "value_se",
    "converged",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Svg,
}

/// One row of `diagram.csv`. Rows with `k = 0` describe the value estimate:
/// `beta` holds `V_n` and `se_theoretical` its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagramRow {
    pub gamma: f64,
    pub lambda: f64,
    pub k: usize,
    pub beta: Option<f64>,
    pub b_k: Option<f64>,
    pub selected: Option<bool>,
    pub se_theoretical: Option<f64>,
    pub se_empirical: Option<f64>,
    pub value: Option<f64>,
    pub value_se: Option<f64>,
    pub converged: bool,
    pub se_baseline: Option<f64>,
}

/// Flattens a sweep (and optional replicate spread) into CSV rows.
pub fn diagram_rows(sweep: &SweepResult, empirical: Option<&EmpiricalResult>) -> Vec<DiagramRow> {
    let mut rows = Vec::new();
    for (g, panel) in sweep.panels.iter().enumerate() {
        let emp = empirical.and_then(|e| e.panels.get(g));
        for (j, p) in panel.points.iter().enumerate() {
            let ok = p.succeeded();
            let emp_value = emp.and_then(|e| e.sd_value.get(j).copied().flatten());
            rows.push(DiagramRow {
                gamma: p.gamma,
                lambda: p.lambda,
                k: 0,
                beta: p.value,
                b_k: None,
                selected: None,
                se_theoretical: p.value_se,
                se_empirical: emp_value,
                value: p.value,
                value_se: p.value_se,
                converged: ok && p.converged,
                se_baseline: None,
            });
            for c in 0..sweep.k {
                rows.push(DiagramRow {
                    gamma: p.gamma,
                    lambda: p.lambda,
                    k: c + 1,
                    beta: p.beta.get(c).copied(),
                    b_k: Some(sweep.b_n[c]),
                    selected: ok.then(|| p.active.contains(&c)),
                    se_theoretical: p.se.get(c).copied(),
                    se_empirical: emp.and_then(|e| e.sd_beta.get(j)).and_then(|r| r[c]),
                    value: p.value,
                    value_se: p.value_se,
                    converged: ok && p.converged,
                    se_baseline: p.se_baseline.as_ref().map(|s| s[c]),
                });
            }
        }
    }
    rows
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_diagram_csv<W: Write>(rows: &[DiagramRow], baseline: bool, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = DIAGRAM_HEADER.to_vec();
    if baseline {
        header.push("se_baseline");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.gamma.to_string(),
            r.lambda.to_string(),
            r.k.to_string(),
            cell(r.beta),
            cell(r.b_k),
            r.selected
                .map(|s| if s { "1" } else { "0" }.to_string())
                .unwrap_or_default(),
            cell(r.se_theoretical),
            cell(r.se_empirical),
            cell(r.value),
            cell(r.value_se),
            if r.converged { "1" } else { "0" }.to_string(),
        ];
        if baseline {
            rec.push(cell(r.se_baseline));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<diagram>", e))?;
    Ok(())
}

/// Parses a `diagram.csv` written by [`write_diagram_csv`].
pub fn read_diagram_csv(path: &Path) -> Result<(Vec<DiagramRow>, bool)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let baseline = match header.len() {
        11 => false,
        12 if header[11] == "se_baseline" => true,
        _ => {
            return Err(Error::Schema(format!(
                "unexpected diagram header: {}",
                header.join(",")
            )))
        }
    };
    if header[..11] != DIAGRAM_HEADER {
        return Err(Error::Schema(format!(
            "unexpected diagram header: {}",
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 1;
        let num = |j: usize| -> Result<Option<f64>> {
            let s = rec.get(j).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| Error::Data {
                row,
                message: format!("column {} is not a number: {s:?}", header[j]),
            })
        };
        let flag = |j: usize| -> Result<Option<bool>> {
            match rec.get(j).unwrap_or("") {
                "" => Ok(None),
                "0" => Ok(Some(false)),
                "1" => Ok(Some(true)),
                s => Err(Error::Data {
                    row,
                    message: format!("column {} must be 0 or 1: {s:?}", header[j]),
                }),
            }
        };
        let required = |j: usize| {
            num(j)?.ok_or_else(|| Error::Data {
                row,
                message: format!("{} is empty", header[j]),
            })
        };
        rows.push(DiagramRow {
            gamma: required(0)?,
            lambda: required(1)?,
            k: rec[2].parse().map_err(|_| Error::Data {
                row,
                message: format!("k is not an index: {:?}", &rec[2]),
            })?,
            beta: num(3)?,
            b_k: num(4)?,
            selected: flag(5)?,
            se_theoretical: num(6)?,
            se_empirical: num(7)?,
            value: num(8)?,
            value_se: num(9)?,
            converged: flag(10)?.unwrap_or(false),
            se_baseline: if baseline { num(11)? } else { None },
        });
    }
    Ok((rows, baseline))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputFile {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Structured record of a run, written as `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub tool_version: String,
    pub command: String,
    pub dataset_fingerprint: Option<String>,
    pub seeds: BTreeMap<String, serde_json::Value>,
    pub variant_tags: BTreeMap<String, String>,
    pub failures: Vec<String>,
    pub outputs: Vec<OutputFile>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            dataset_fingerprint: None,
            seeds: BTreeMap::new(),
            variant_tags: BTreeMap::new(),
            failures: Vec::new(),
            outputs: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn record_output(&mut self, out_dir: &Path, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.outputs.retain(|o| o.path != rel.to_string_lossy());
        self.outputs.push(OutputFile {
            path: rel.to_string_lossy().into_owned(),
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// SVG file name for one `γ` panel.
pub fn svg_name(gamma: f64) -> String {
    format!("diagram_gamma_{gamma}.svg")
}

/// Writes `diagram.csv` and/or one SVG per `γ` into `out_dir` and returns the
/// paths written.
pub fn emit_diagram(
    sweep: &SweepResult,
    empirical: Option<&EmpiricalResult>,
    out_dir: &Path,
    formats: &[Format],
    baseline: bool,
) -> Result<Vec<PathBuf>> {
    if sweep.panels.is_empty() || sweep.points().next().is_none() {
        return Err(Error::Contract("sweep has no grid points to emit".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = diagram_rows(sweep, empirical);
    let mut written = Vec::new();
    if formats.contains(&Format::Csv) {
        let path = out_dir.join("diagram.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_diagram_csv(&rows, baseline, std::io::BufWriter::new(file))?;
        written.push(path);
    }
    if formats.contains(&Format::Svg) {
        for panel in &sweep.panels {
            if panel.points.is_empty() {
                continue;
            }
            let panel_rows: Vec<&DiagramRow> =
                rows.iter().filter(|r| r.gamma == panel.gamma).collect();
            let path = out_dir.join(svg_name(panel.gamma));
            let svg = render_panel_svg(panel.gamma, sweep.k, &panel_rows);
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagram::{sweep, LambdaGrid, SweepConfig};
    use crate::{simulate, SimConfig};

    fn small_sweep(baseline: bool) -> SweepResult {
        let d = simulate(&SimConfig {
            n: 300,
            seed: 4,
            ..SimConfig::default()
        })
        .unwrap();
        let cfg = SweepConfig {
            lambda_grid: LambdaGrid::Auto { count: 6 },
            baseline_variance: baseline,
            ..SweepConfig::default()
        };
        sweep(&d, &cfg).unwrap()
    }

    #[test]
    fn csv_round_trip_and_row_count() {
        let r = small_sweep(true);
        let dir = tempfile::tempdir().unwrap();
        let files = emit_diagram(&r, None, dir.path(), &[Format::Csv, Format::Svg], true).unwrap();
        assert_eq!(files.len(), 1 + 3);
        let text = fs::read_to_string(dir.path().join("diagram.csv")).unwrap();
        assert!(text.starts_with(
            "gamma,lambda,k,beta,b_k,selected,se_theoretical,se_empirical,value,value_se,converged,se_baseline\n"
        ));
        let (rows, baseline) = read_diagram_csv(&dir.path().join("diagram.csv")).unwrap();
        assert!(baseline);
        assert_eq!(rows.len(), 3 * 7 * (2 + 1));
        assert_eq!(rows, diagram_rows(&r, None));
        for g in [0.1, 1.0, 10.0] {
            let p = dir.path().join(svg_name(g));
            assert!(fs::metadata(&p).unwrap().len() > 0, "{p:?}");
        }
        assert!(dir.path().join("diagram_gamma_0.1.svg").exists());
    }

    #[test]
    fn header_without_baseline_is_exact() {
        let r = small_sweep(false);
        let mut buf = Vec::new();
        write_diagram_csv(&diagram_rows(&r, None), false, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "gamma,lambda,k,beta,b_k,selected,se_theoretical,se_empirical,value,value_se,converged"
        );
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let r = small_sweep(false);
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = emit_diagram(&r, None, &blocker.join("sub"), &[Format::Csv], false);
        assert!(matches!(err, Err(Error::Io { .. })));
    }
}
