//! Minimal SVG rendering of one `γ` row of a selection diagram: a panel per
//! coefficient plus a value panel, each against `log10 λ`.

use std::fmt::Write;

use super::emit::DiagramRow;

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN: (f64, f64, f64, f64) = (48.0, 16.0, 28.0, 40.0); // left, right, top, bottom
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

struct Series {
    x: Vec<f64>,
    y: Vec<f64>,
    se: Vec<Option<f64>>,
    emp: Vec<Option<f64>>,
    reference: Option<f64>,
}

/// Position on the horizontal axis. `λ = 0` sits half a decade left of the
/// smallest positive level.
fn x_positions(lambdas: &[f64]) -> Vec<f64> {
    let min_pos = lambdas
        .iter()
        .copied()
        .filter(|l| *l > 0.0)
        .fold(f64::INFINITY, f64::min);
    let zero_at = if min_pos.is_finite() {
        min_pos.log10() - 0.5
    } else {
        0.0
    };
    lambdas
        .iter()
        .map(|&l| if l > 0.0 { l.log10() } else { zero_at })
        .collect()
}

fn series(rows: &[&DiagramRow], k: usize) -> Series {
    let mine: Vec<&&DiagramRow> = rows
        .iter()
        .filter(|r| r.k == k && r.beta.is_some())
        .collect();
    let lambdas: Vec<f64> = mine.iter().map(|r| r.lambda).collect();
    Series {
        x: x_positions(&lambdas),
        y: mine.iter().map(|r| r.beta.unwrap_or(f64::NAN)).collect(),
        se: mine.iter().map(|r| r.se_theoretical).collect(),
        emp: mine.iter().map(|r| r.se_empirical).collect(),
        reference: mine.first().and_then(|r| r.b_k),
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-6);
    (lo - pad, hi + pad)
}

fn polyline(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn band(xs: &[f64], lo: &[f64], hi: &[f64]) -> String {
    let mut pts: Vec<(f64, f64)> = xs.iter().copied().zip(hi.iter().copied()).collect();
    pts.extend(xs.iter().copied().zip(lo.iter().copied()).rev());
    polyline(&pts)
}

fn render_series(out: &mut String, s: &Series, title: &str, color: &str, ox: f64) {
    let (l, r, t, b) = MARGIN;
    let (pw, ph) = (PANEL_W - l - r, PANEL_H - t - b);
    let (x0, x1) = range(s.x.iter().copied());
    let bounds =
        s.y.iter()
            .zip(&s.se)
            .zip(&s.emp)
            .flat_map(|((y, se), emp)| {
                let se = se.unwrap_or(0.0);
                let emp = emp.unwrap_or(0.0);
                [y - se, y + se, y - emp, y + emp]
            })
            .chain(s.reference);
    let (y0, y1) = range(bounds);
    let px = |x: f64| ox + l + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| t + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##,
        ox + l
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{title}</text>"#,
        ox + l + pw / 2.0,
        t - 8.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">log10(lambda)</text>"#,
        ox + l + pw / 2.0,
        PANEL_H - 8.0
    );
    for (v, anchor_y) in [(y0, t + ph), (y1, t + 10.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{anchor_y:.2}" font-size="9" text-anchor="end">{v:.3}</text>"#,
            ox + l - 4.0
        );
    }
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="{anchor}">{v:.2}</text>"#,
            px(v),
            t + ph + 12.0
        );
    }
    if s.x.is_empty() {
        return;
    }
    let xs: Vec<f64> = s.x.iter().map(|&x| px(x)).collect();
    if s.se.iter().all(Option::is_some) {
        let lo: Vec<f64> =
            s.y.iter()
                .zip(&s.se)
                .map(|(y, e)| py(y - e.unwrap_or(0.0)))
                .collect();
        let hi: Vec<f64> =
            s.y.iter()
                .zip(&s.se)
                .map(|(y, e)| py(y + e.unwrap_or(0.0)))
                .collect();
        let _ = writeln!(
            out,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band(&xs, &lo, &hi)
        );
    }
    if s.emp.iter().all(Option::is_some) {
        for sign in [-1.0, 1.0] {
            let pts: Vec<(f64, f64)> = xs
                .iter()
                .zip(s.y.iter().zip(&s.emp))
                .map(|(&x, (y, e))| (x, py(y + sign * e.unwrap_or(0.0))))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-dasharray="2,3"/>"#,
                polyline(&pts)
            );
        }
    }
    if let Some(b) = s.reference {
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="#555" stroke-dasharray="6,4"/>"##,
            ox + l,
            ox + l + pw,
            py(b),
            py(b)
        );
    }
    let line: Vec<(f64, f64)> = xs.iter().copied().zip(s.y.iter().map(|&y| py(y))).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        polyline(&line)
    );
}

/// One row of the selection diagram for a single `γ`.
pub fn render_panel_svg(gamma: f64, k: usize, rows: &[&DiagramRow]) -> String {
    let width = PANEL_W * (k + 1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" viewBox="0 0 {width} {}">"#,
        PANEL_H + 20.0,
        PANEL_H + 20.0
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<g transform="translate(0,20)">"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="-4" font-size="13" text-anchor="middle">gamma = {gamma}</text>"#,
        width / 2.0
    );
    for c in 1..=k {
        render_series(
            &mut out,
            &series(rows, c),
            &format!("beta_{c}"),
            COLORS[(c - 1) % COLORS.len()],
            PANEL_W * (c - 1) as f64,
        );
    }
    render_series(
        &mut out,
        &series(rows, 0),
        "value",
        "#333333",
        PANEL_W * k as f64,
    );
    out.push_str("</g>\n</svg>\n");
    out
}
