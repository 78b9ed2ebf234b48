//! Iteration records, CSV logs, rate diagnostics, run manifests and SVG plots.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vector;

/// Per-sweep quantities that are not part of the CSV contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDetail {
    /// `‖x_i^{k+1} − x_i^k‖²` per block.
    pub block_steps: Vec<f64>,
    /// `‖u_q^{k+1} − u_q^k‖²` per control block (empty without controls).
    pub control_steps: Vec<f64>,
    /// `L_ρ(x^k, λ^k)` before the sweep.
    pub auglag_before: f64,
    /// `L_ρ(x^{k+1}, λ^k)` after the primal blocks, before the dual update.
    pub auglag_primal: f64,
    /// Proximal part `Σ‖x_i^{k+1} − x_i^k‖²/(2η_i)` of the primal descent bound.
    pub proximal_decrease: f64,
}

/// One completed ADMM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    /// `max_j ‖r_j‖∞`.
    pub constraint_inf: f64,
    /// `Σ_j ‖r_j‖²`.
    pub constraint_sq: f64,
    pub auglag: f64,
    pub lyapunov: f64,
    /// `‖x^k − x^{k−1}‖∞`.
    pub primal_step: f64,
    /// `‖λ^k − λ^{k−1}‖∞`.
    pub dual_step: f64,
    pub kkt_stat: f64,
    pub wall_ms: f64,
    pub detail: Option<SweepDetail>,
}

pub const CSV_HEADER: &str = "iter,objective,constraint_inf,constraint_sq,auglag,lyapunov,primal_step,dual_step,kkt_stat,wall_ms";

fn csv_row(r: &IterationRecord) -> String {
    let fields = [
        r.objective,
        r.constraint_inf,
        r.constraint_sq,
        r.auglag,
        r.lyapunov,
        r.primal_step,
        r.dual_step,
        r.kkt_stat,
        r.wall_ms,
    ];
    let mut line = r.iter.to_string();
    for v in fields {
        line.push(',');
        line.push_str(&format!("{v:.16e}"));
    }
    line
}

/// Renders the log as CSV: the fixed header, one row per record, 17
/// significant digits, LF endings.
pub fn records_to_csv(records: &[IterationRecord]) -> String {
    let mut out = String::with_capacity(64 + records.len() * 200);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

pub fn write_csv(records: &[IterationRecord], path: &Path) -> Result<()> {
    fs::write(path, records_to_csv(records))?;
    Ok(())
}

/// Parses a log written by [`write_csv`]; the sweep details are not stored.
pub fn parse_csv(text: &str) -> Result<Vec<IterationRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Config("CSV header does not match the iteration log format".into()));
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Config(format!("CSV row {}: {what}", row + 1));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 10 {
            return Err(bad("expected 10 columns"));
        }
        let iter = cells[0].parse().map_err(|_| bad("bad iteration index"))?;
        let mut v = [0.0; 9];
        for (slot, cell) in v.iter_mut().zip(&cells[1..]) {
            *slot = cell.parse().map_err(|_| bad("bad number"))?;
        }
        out.push(IterationRecord {
            iter,
            objective: v[0],
            constraint_inf: v[1],
            constraint_sq: v[2],
            auglag: v[3],
            lyapunov: v[4],
            primal_step: v[5],
            dual_step: v[6],
            kkt_stat: v[7],
            wall_ms: v[8],
            detail: None,
        });
    }
    Ok(out)
}

pub fn read_csv(path: &Path) -> Result<Vec<IterationRecord>> {
    parse_csv(&fs::read_to_string(path)?)
}

/// One row per block: `block,x0,x1,…` at 17 significant digits.
pub fn trajectory_to_csv(blocks: &[Vector]) -> String {
    let dim = blocks.first().map_or(0, |b| b.len());
    let mut out = String::from("block");
    for c in 0..dim {
        out.push_str(&format!(",x{c}"));
    }
    out.push('\n');
    for (i, b) in blocks.iter().enumerate() {
        out.push_str(&i.to_string());
        for v in b.iter() {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_trajectory_csv(blocks: &[Vector], path: &Path) -> Result<()> {
    fs::write(path, trajectory_to_csv(blocks))?;
    Ok(())
}

/// Running-minimum rate diagnostic over the weighted step sums
/// `s_k = Σ_i (c_i + c̃_i)‖x_i^k − x_i^{k−1}‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub iterations: Vec<usize>,
    pub step_sums: Vec<f64>,
    /// `m_k = min_{j ≤ k} s_j`.
    pub running_min: Vec<f64>,
    /// `k·m_k`.
    pub scaled_min: Vec<f64>,
    /// Least-squares slope of `k·m_k` against `k`.
    pub slope: f64,
}

impl RateReport {
    /// `m_k` at iteration `k`, if the log reached it.
    pub fn running_min_at(&self, k: usize) -> Option<f64> {
        self.iterations.iter().position(|&i| i == k).map(|p| self.running_min[p])
    }
}

pub fn rate_report(records: &[IterationRecord], c: &[f64], c_tilde: &[f64]) -> Result<RateReport> {
    if records.len() < 2 {
        return Err(Error::InvalidParameter("rate report needs at least two records".into()));
    }
    if c.len() != c_tilde.len() {
        return Err(Error::InvalidParameter("coefficient vectors differ in length".into()));
    }
    let mut step_sums = Vec::with_capacity(records.len());
    for r in records {
        let steps = &r
            .detail
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter(format!("record {} carries no block steps", r.iter)))?
            .block_steps;
        if steps.len() != c.len() {
            return Err(Error::BlockCount {
                what: "rate coefficients",
                expected: steps.len(),
                found: c.len(),
            });
        }
        step_sums.push(steps.iter().zip(c.iter().zip(c_tilde)).map(|(s, (a, b))| (a + b) * s).sum());
    }
    let mut running_min = Vec::with_capacity(step_sums.len());
    let mut m = f64::INFINITY;
    for s in &step_sums {
        m = m.min(*s);
        running_min.push(m);
    }
    let iterations: Vec<usize> = records.iter().map(|r| r.iter).collect();
    let scaled_min: Vec<f64> = iterations.iter().zip(&running_min).map(|(k, m)| *k as f64 * m).collect();
    let count = iterations.len() as f64;
    let mean_k = iterations.iter().map(|k| *k as f64).sum::<f64>() / count;
    let mean_v = scaled_min.iter().sum::<f64>() / count;
    let (mut cov, mut var) = (0.0, 0.0);
    for (k, v) in iterations.iter().zip(&scaled_min) {
        let dk = *k as f64 - mean_k;
        cov += dk * (v - mean_v);
        var += dk * dk;
    }
    let slope = if var > 0.0 { cov / var } else { 0.0 };
    Ok(RateReport {
        iterations,
        step_sums,
        running_min,
        scaled_min,
        slope,
    })
}

// ---------------------------------------------------------------------------
// SVG

fn polyline_chart(title: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &finite {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let path: Vec<String> = finite.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
    format!(
        concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
            "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{title}</text>\n",
            "<line x1=\"{pad}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{yb}\" stroke=\"black\"/>\n",
            "<text x=\"{pad}\" y=\"{yl}\" font-family=\"sans-serif\" font-size=\"11\">{x0}</text>\n",
            "<text x=\"{xr}\" y=\"{yl}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{x1}</text>\n",
            "<text x=\"4\" y=\"{yb}\" font-family=\"sans-serif\" font-size=\"11\">{y0:.3e}</text>\n",
            "<text x=\"4\" y=\"{pad}\" font-family=\"sans-serif\" font-size=\"11\">{y1:.3e}</text>\n",
            "<text x=\"{tx}\" y=\"{yl2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">iteration ({ylabel})</text>\n",
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{path}\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pad = pad,
        tx = w / 2.0,
        title = title,
        yb = h - pad,
        xr = w - pad,
        yl = h - pad + 16.0,
        yl2 = h - 12.0,
        x0 = x0,
        x1 = x1,
        y0 = y0,
        y1 = y1,
        ylabel = ylabel,
        path = path.join(" "),
    )
}

/// Writes `objective.svg` and `constraint_error.svg` (log10 scale) into `dir`.
pub fn write_svg_plots(records: &[IterationRecord], dir: &Path) -> Result<()> {
    let objective: Vec<(f64, f64)> = records.iter().map(|r| (r.iter as f64, r.objective)).collect();
    let constraint: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.constraint_inf > 0.0)
        .map(|r| (r.iter as f64, r.constraint_inf.log10()))
        .collect();
    fs::write(dir.join("objective.svg"), polyline_chart("Function value", "objective", &objective))?;
    fs::write(
        dir.join("constraint_error.svg"),
        polyline_chart("Constraint error", "log10 max |r|", &constraint),
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub certificate: Option<serde_json::Value>,
    pub revision: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        let now = unix_seconds();
        Self {
            command: command.to_owned(),
            config,
            seed,
            certificate: None,
            revision: source_revision(),
            started: now,
            finished: now,
        }
    }

    pub fn finish(&mut self) {
        self.finished = unix_seconds();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// `git rev-parse HEAD` of the working directory, or `"unknown"`.
pub fn source_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_owned())
}
