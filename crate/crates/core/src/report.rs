//! Deterministic run outputs: CSV tables with round-trip-exact floats, the
//! JSON run manifest, and a minimal SVG line chart for study reports.
//!
//! Floats are serialized with 17 significant digits so every value parses
//! back bit-identically; readability is secondary to reproducibility.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Error;
use crate::experiments::StudyReport;
use crate::Result;

/// 17-significant-digit scientific notation; round-trips any finite `f64`.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// One CSV cell; numbers keep their type so formatting stays canonical.
#[derive(Debug, Clone)]
pub enum Cell {
    Int(i64),
    Uint(u64),
    Float(f64),
    Str(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Uint(v) => v.to_string(),
            Cell::Float(v) => fmt_float(*v),
            Cell::Str(s) => {
                if s.contains(',') || s.contains('"') || s.contains('\n') {
                    format!("\"{}\"", s.replace('"', "\"\""))
                } else {
                    s.clone()
                }
            }
        }
    }
}

/// Write a CSV file: UTF-8, comma-separated, header first, rows exactly in
/// the order given.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<Cell>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let line: Vec<String> = row.iter().map(Cell::render).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a CSV produced by [`write_csv`] back into header and string cells.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty csv".to_string()))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

/// Fixed-order study CSV: `study,N,value,se,aux,seed,fingerprint`.
pub fn study_csv(report: &StudyReport, path: &Path) -> Result<()> {
    let rows: Vec<Vec<Cell>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                Cell::Str(r.study.clone()),
                Cell::Uint(r.n as u64),
                Cell::Float(r.value),
                Cell::Float(r.se),
                Cell::Float(r.aux),
                Cell::Uint(r.seed),
                Cell::Str(report.fingerprint.clone()),
            ]
        })
        .collect();
    write_csv(
        path,
        &["study", "N", "value", "se", "aux", "seed", "fingerprint"],
        &rows,
    )
}

/// Minimal value-vs-N line chart; purely a convenience view of a study CSV.
pub fn study_svg(report: &StudyReport, path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64)> = report
        .rows
        .iter()
        .filter(|r| r.value.is_finite())
        .map(|r| (r.n as f64, r.value))
        .collect();
    let (w, h, margin) = (640.0, 400.0, 50.0);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{} (value vs N)</text>\n",
        w / 2.0,
        report.study
    ));
    if pts.len() >= 2 {
        let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let ymin = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let ymax = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let xspan = (xmax - xmin).max(1e-12);
        let yspan = (ymax - ymin).max(1e-12);
        let sx = |x: f64| margin + (x - xmin) / xspan * (w - 2.0 * margin);
        let sy = |y: f64| h - margin - (y - ymin) / yspan * (h - 2.0 * margin);
        let poly: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.3},{:.3}", sx(p.0), sy(p.1)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>\n",
            poly.join(" ")
        ));
        for p in &pts {
            svg.push_str(&format!(
                "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"black\"/>\n",
                sx(p.0),
                sy(p.1)
            ));
        }
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"gray\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"gray\"/>\n",
            m = margin,
            b = h - margin,
            r = w - margin,
            t = margin
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">N = {:.0} .. {:.0}</text>\n",
            margin,
            h - margin / 2.0,
            xmin,
            xmax
        ));
        svg.push_str(&format!(
            "<text x=\"5\" y=\"{}\" font-size=\"11\">{}</text>\n",
            margin,
            fmt_float(ymax)
        ));
        svg.push_str(&format!(
            "<text x=\"5\" y=\"{}\" font-size=\"11\">{}</text>\n",
            h - margin,
            fmt_float(ymin)
        ));
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))
}

/// What a run was and what it produced; enough to re-run it exactly.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub subcommand: String,
    pub config_path: String,
    /// Resolved configuration with all defaults filled in.
    pub resolved_config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<String>,
    pub wall_clock_ms: u128,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }
}
