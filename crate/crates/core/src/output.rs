//! Run artifacts: `summary.json`, `cells.csv`, `decay.csv`, `decay.svg`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::OutputSpec;
use crate::error::Result;
use crate::estimator::{DecayRow, RunReport};

/// Writes the artifacts selected by `spec` into `dir` and returns their paths.
pub fn write_run(dir: &Path, report: &RunReport, spec: &OutputSpec) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let p = dir.join("summary.json");
    fs::write(&p, report.to_json())?;
    out.push(p);
    if spec.cells_csv {
        let p = dir.join("cells.csv");
        let mut w = csv::Writer::from_path(&p)?;
        for row in &report.parts.cells {
            w.serialize(row)?;
        }
        w.flush()?;
        out.push(p);
    }
    if spec.decay_csv {
        let p = dir.join("decay.csv");
        let mut w = csv::Writer::from_path(&p)?;
        for row in &report.parts.decay {
            w.serialize(row)?;
        }
        w.flush()?;
        out.push(p);
    }
    if spec.decay_svg {
        let p = dir.join("decay.svg");
        fs::write(&p, decay_svg(&report.parts.decay, report.parts.decay_slope))?;
        out.push(p);
    }
    Ok(out)
}

/// Scatter of `ln max|T_RQ|` against `n + j`, one point per `(n, j)` cell,
/// with the fitted line when present.
pub fn decay_svg(rows: &[DecayRow], slope: Option<f64>) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.max_coeff > 0.0).map(|r| ((r.n + r.j) as f64, r.max_coeff.ln())).collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let x_max = pts.iter().map(|p| p.0).fold(1.0, f64::max);
    let y_min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let y_max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = (y_max - y_min).max(1e-9);
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y_min) / span * (h - 2.0 * pad);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">n + j</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<text x="4" y="{}" font-size="12">ln max|T|</text>"#, pad - 12.0);
    for (x, y) in &pts {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, sx(*x), sy(*y));
    }
    if let Some(b) = slope {
        // Anchor the line at the largest value in the n + j = 0 column.
        let y0 = pts.iter().filter(|p| p.0 == 0.0).map(|p| p.1).fold(y_max, f64::max);
        let x1 = x_max.min(8.0);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="crimson"/>"#,
            sx(0.0),
            sy(y0),
            sx(x1),
            sy(y0 + b * x1)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12">slope {b:.3}</text>"#, w - 140.0, pad);
    }
    s.push_str("</svg>\n");
    s
}
