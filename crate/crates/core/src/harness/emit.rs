//! CSV and SVG output.
//!
//! | file | header |
//! |---|---|
//! | `rollouts.csv` | `run_id,t,<state...>,<action...>,branch,safe,wall_ns` |
//! | `summary.csv` | `env,variant,mode,T,reward_mean,reward_se,p_safe_state,p_safe_traj,reject_rate` |
//! | `usage.csv` | `t,frac_learned,frac_recovery,frac_lqr` |
//!
//! `branch` is `learned`, `lqr`, `recovery`, or `none` for unshielded runs;
//! `T` is empty for unshielded runs. Floats are written in shortest
//! round-trip form, so re-reading a file reproduces the values exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentResult, Metrics, RolloutLog, SweepRow, Usage};
use crate::dynamics::{EnvKind, Environment, Variant};
use crate::error::{Error, Result};

pub const SUMMARY_HEADER: [&str; 9] = [
    "env",
    "variant",
    "mode",
    "T",
    "reward_mean",
    "reward_se",
    "p_safe_state",
    "p_safe_traj",
    "reject_rate",
];
pub const USAGE_HEADER: [&str; 4] = ["t", "frac_learned", "frac_recovery", "frac_lqr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: EnvKind,
    pub variant: Variant,
    pub mode: String,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub reward_mean: f64,
    pub reward_se: f64,
    pub p_safe_state: f64,
    pub p_safe_traj: f64,
    pub reject_rate: f64,
}

impl SummaryRow {
    pub fn new(result: &ExperimentResult) -> Self {
        let s = &result.spec;
        let m = &result.metrics;
        SummaryRow {
            env: s.kind,
            variant: s.variant,
            mode: s.mode.label().to_string(),
            t: s.mode.horizon(),
            reward_mean: m.reward_mean,
            reward_se: m.reward_se,
            p_safe_state: m.p_safe_state,
            p_safe_traj: m.p_safe_traj,
            reject_rate: m.reject_rate,
        }
    }

    /// Reassemble metrics from a summary row and its usage curve.
    pub fn metrics(&self, usage: Vec<Usage>) -> Metrics {
        Metrics {
            reward_mean: self.reward_mean,
            reward_se: self.reward_se,
            p_safe_state: self.p_safe_state,
            p_safe_traj: self.p_safe_traj,
            reject_rate: self.reject_rate,
            usage,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            path: path.to_path_buf(),
            msg: format!("{other:?}"),
        },
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(SUMMARY_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(SUMMARY_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: "unexpected summary header".into(),
        });
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_usage(path: &Path, usage: &[Usage]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(USAGE_HEADER).map_err(|e| csv_err(path, e))?;
    for (t, u) in usage.iter().enumerate() {
        w.serialize((t, u.learned, u.recovery, u.lqr))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_usage(path: &Path) -> Result<Vec<Usage>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(USAGE_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: "unexpected usage header".into(),
        });
    }
    let mut out = Vec::new();
    for row in r.deserialize::<(usize, f64, f64, f64)>() {
        let (t, learned, recovery, lqr) = row.map_err(|e| csv_err(path, e))?;
        if t != out.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("usage rows out of order at t = {t}"),
            });
        }
        out.push(Usage { learned, recovery, lqr });
    }
    Ok(out)
}

pub fn rollouts_header(env: &Environment) -> Vec<String> {
    let mut h = vec!["run_id".to_string(), "t".to_string()];
    h.extend(env.state_names().iter().map(|s| s.to_string()));
    h.extend(env.action_names().iter().map(|s| s.to_string()));
    h.extend(["branch", "safe", "wall_ns"].map(String::from));
    h
}

/// Per-step rows of every rollout, ordered by `run_id` and `t`.
pub fn write_rollouts(path: &Path, env: &Environment, logs: &[RolloutLog]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(rollouts_header(env)).map_err(|e| csv_err(path, e))?;
    let mut sorted: Vec<&RolloutLog> = logs.iter().collect();
    sorted.sort_by_key(|l| l.run_id);
    for l in sorted {
        for s in &l.trajectory.steps {
            let mut rec = vec![l.run_id.to_string(), s.t.to_string()];
            rec.extend(s.state.iter().map(|v| v.to_string()));
            rec.extend(s.action.iter().map(|v| v.to_string()));
            rec.push(s.branch.map_or("none".to_string(), |b| b.to_string()));
            rec.push(s.safe.to_string());
            rec.push(s.wall_ns.to_string());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Header and rows of a sweep table: `T`, reward, latency.
pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "T",
        "reward_mean",
        "reward_se",
        "p_safe_state",
        "latency_mean_ns",
        "latency_p99_ns",
    ])
    .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize((
            r.t,
            r.metrics.reward_mean,
            r.metrics.reward_se,
            r.metrics.p_safe_state,
            r.latency.mean_ns,
            r.latency.p99_ns,
        ))
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        PAD + (x - self.x0) / span * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        H - PAD - (y - self.y0) / span * (H - 2.0 * PAD)
    }
}

fn svg_frame(out: &mut String, title: &str, ax: &Axes, xlabel: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#,
        W / 2.0
    );
    let (l, r, t, b) = (PAD, W - PAD, PAD, H - PAD);
    let _ = writeln!(
        out,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{l}" y="{}" text-anchor="middle">{}</text>"#,
        b + 16.0,
        fmt_num(ax.x0)
    );
    let _ = writeln!(
        out,
        r#"<text x="{r}" y="{}" text-anchor="middle">{}</text>"#,
        b + 16.0,
        fmt_num(ax.x1)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        l - 4.0,
        b,
        fmt_num(ax.y0)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        l - 4.0,
        t + 4.0,
        fmt_num(ax.y1)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        W / 2.0,
        H - 12.0
    );
}

fn fmt_num(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn polyline(out: &mut String, ax: &Axes, pts: &[(f64, f64)], color: &str, label: &str, slot: usize) {
    let d: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", ax.px(x), ax.py(y)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
        d.join(" ")
    );
    let y = PAD + 14.0 * slot as f64;
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{y}" fill="{color}">{label}</text>"#,
        W - PAD - 80.0
    );
}

/// Branch fractions over time.
pub fn usage_svg(usage: &[Usage]) -> String {
    let ax = Axes {
        x0: 0.0,
        x1: usage.len().saturating_sub(1) as f64,
        y0: 0.0,
        y1: 1.0,
    };
    let mut out = String::new();
    svg_frame(&mut out, "branch usage", &ax, "t");
    type Series = (&'static str, &'static str, fn(&Usage) -> f64);
    let series: [Series; 3] = [
        ("learned", "#1f77b4", |u| u.learned),
        ("recovery", "#d62728", |u| u.recovery),
        ("lqr", "#2ca02c", |u| u.lqr),
    ];
    for (i, (label, color, f)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = usage.iter().enumerate().map(|(t, u)| (t as f64, f(u))).collect();
        polyline(&mut out, &ax, &pts, color, label, i);
    }
    out.push_str("</svg>\n");
    out
}

/// Reward with standard-error bars against `T`, or latency when
/// `latency` is set.
pub fn sweep_svg(rows: &[SweepRow], latency: bool) -> String {
    let pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|r| {
            if latency {
                (r.t as f64, r.latency.mean_ns / 1e3, 0.0)
            } else {
                (r.t as f64, r.metrics.reward_mean, r.metrics.reward_se)
            }
        })
        .collect();
    let lo = pts.iter().map(|p| p.1 - p.2).fold(f64::INFINITY, f64::min).min(0.0);
    let hi = pts
        .iter()
        .map(|p| p.1 + p.2)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(lo + 1e-9);
    let ax = Axes {
        x0: pts.first().map_or(0.0, |p| p.0),
        x1: pts.last().map_or(1.0, |p| p.0),
        y0: lo,
        y1: hi,
    };
    let mut out = String::new();
    let title = if latency { "per-action time (µs)" } else { "reward" };
    svg_frame(&mut out, title, &ax, "T");
    let line: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, p.1)).collect();
    polyline(&mut out, &ax, &line, "#1f77b4", title, 0);
    for &(x, y, e) in &pts {
        if e > 0.0 {
            let _ = writeln!(
                out,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black"/>"#,
                ax.px(x),
                ax.py(y - e),
                ax.py(y + e)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Write `rollouts.csv`, `summary.csv`, `usage.csv` and `usage.svg` for
/// one experiment into `dir`.
pub fn emit_results(dir: &Path, env: &Environment, result: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rollouts(&dir.join("rollouts.csv"), env, &result.rollouts)?;
    write_summary(&dir.join("summary.csv"), &[SummaryRow::new(result)])?;
    write_usage(&dir.join("usage.csv"), &result.metrics.usage)?;
    std::fs::write(dir.join("usage.svg"), usage_svg(&result.metrics.usage))?;
    Ok(())
}
