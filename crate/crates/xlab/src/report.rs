//! Result rows and their CSV, JSON and SVG renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stitchlab_core::stitching::PenaltyReport;

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "experiment_id",
    "kind",
    "variant",
    "cut",
    "metric",
    "value",
    "seed",
    "manifest_digest",
];

/// One measured number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment_id: String,
    pub kind: String,
    pub variant: String,
    pub cut: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// A pass/fail statement an experiment makes about its own rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub report: PenaltyReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub debug_assertions: bool,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            debug_assertions: cfg!(debug_assertions),
        }
    }
}

/// Everything one manifest produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub experiment_id: String,
    pub kind: String,
    pub manifest_digest: String,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    pub reports: Vec<VariantReport>,
    pub wall_clock_s: f64,
    pub environment: Environment,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Rows in canonical order: variant, cut (uncut first), seed, metric.
    pub fn sort_rows(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.variant, a.cut, a.seed, &a.metric).cmp(&(&b.variant, b.cut, b.seed, &b.metric))
        });
    }

    pub fn value(&self, variant: &str, cut: Option<usize>, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.cut == cut && r.metric == metric)
            .map(|r| r.value)
    }

    /// `(cut, value)` of `metric` for `variant`, by cut.
    pub fn series(&self, variant: &str, metric: &str) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.metric == metric)
            .filter_map(|r| r.cut.map(|c| (c, r.value)))
            .collect();
        out.sort_by_key(|p| p.0);
        out
    }
}

/// Writes the rows with the manifest digest on every line. The header is
/// written even when there are no rows.
pub fn write_csv<W: Write>(result: &RunResult, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Output(e.to_string());
    out.write_record(CSV_HEADER).map_err(err)?;
    for r in &result.rows {
        out.write_record([
            r.experiment_id.as_str(),
            r.kind.as_str(),
            r.variant.as_str(),
            &r.cut.map(|c| c.to_string()).unwrap_or_default(),
            r.metric.as_str(),
            &r.value.to_string(),
            &r.seed.to_string(),
            result.manifest_digest.as_str(),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| Error::Output(e.to_string()))
}

pub fn csv_string(result: &RunResult) -> String {
    let mut buf = Vec::new();
    write_csv(result, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("utf-8")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// The metric worth plotting: penalty if any, else CKA, else the first one.
pub fn chart_metric(result: &RunResult) -> Option<String> {
    let has = |m: &str| result.rows.iter().any(|r| r.metric == m && r.cut.is_some());
    ["penalty", "cka"]
        .into_iter()
        .find(|m| has(m))
        .map(str::to_string)
        .or_else(|| {
            result
                .rows
                .iter()
                .find(|r| r.cut.is_some())
                .map(|r| r.metric.clone())
        })
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart of `metric` against cut, one polyline per variant.
pub fn svg(result: &RunResult, metric: &str) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 64.0, 150.0, 30.0, 50.0);
    let mut lines: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for r in result.rows.iter().filter(|r| r.metric == metric) {
        if let Some(c) = r.cut {
            lines
                .entry(r.variant.as_str())
                .or_default()
                .push((c, r.value));
        }
    }
    for pts in lines.values_mut() {
        pts.sort_by_key(|p| p.0);
    }
    let points = lines.values().flatten();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(c, v) in points {
        xmin = xmin.min(c as f64);
        xmax = xmax.max(c as f64);
        ymin = ymin.min(v);
        ymax = ymax.max(v);
    }
    if xmin > xmax {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    ymin = ymin.min(0.0);
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| top + (1.0 - (y - ymin) / (ymax - ymin)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        escape(&format!("{} ({})", result.experiment_id, result.kind))
    );
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for c in (xmin.ceil() as usize)..=(xmax.floor() as usize) {
        let x = sx(c as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{0}" x2="{x:.1}" y2="{1}" stroke="black"/><text x="{x:.1}" y="{2}" text-anchor="middle">{c}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0
        );
    }
    for i in 0..=4 {
        let v = ymin + (ymax - ymin) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/><text x="{1}" y="{2:.1}" text-anchor="end">{v:.3}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">cut</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(metric)
    );
    for (i, (variant, pts)) in lines.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(c, v)| format!("{:.1},{:.1}", sx(c as f64), sy(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            w - right + 12.0,
            w - right + 32.0,
            w - right + 38.0,
            ly + 4.0,
            escape(variant)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `results.csv`, `results.json` and, when there is something to
/// plot, `chart.svg` into `dir`.
pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    write("results.csv", csv_string(result).as_bytes())?;
    let json = serde_json::to_vec_pretty(result).map_err(|e| Error::Output(e.to_string()))?;
    write("results.json", &json)?;
    if let Some(metric) = chart_metric(result) {
        write("chart.svg", svg(result, &metric).as_bytes())?;
    }
    Ok(())
}
