//! Grid sweeps and report files (CSV and SVG).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tuning::{best_of, run_trial, SessionConfig, Trial, TuningError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("nothing to report: no trials")]
    NoTrials,
    #[error("a plot needs at least 2 trials, got {0}; write a CSV instead")]
    TooFewForPlot(usize),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tuning(#[from] TuningError),
}

/// Evenly spaced tau values, both ends included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub tau_min: f64,
    pub tau_max: f64,
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { tau_min: 0.6, tau_max: 1.5, steps: 10 }
    }
}

impl GridSpec {
    pub fn new(tau_min: f64, tau_max: f64, steps: usize) -> Result<Self, ReportError> {
        let spec = Self { tau_min, tau_max, steps };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if !(self.tau_min.is_finite() && self.tau_min > 0.0) {
            return Err(ReportError::Grid(format!("tau_min must be positive, got {}", self.tau_min)));
        }
        if !(self.tau_max.is_finite() && self.tau_min < self.tau_max) {
            return Err(ReportError::Grid(format!(
                "tau_min ({}) must be below tau_max ({})",
                self.tau_min, self.tau_max
            )));
        }
        if self.steps < 2 {
            return Err(ReportError::Grid(format!("steps must be at least 2, got {}", self.steps)));
        }
        Ok(())
    }

    /// Grid points, snapped to 12 decimals so that e.g. 0.6 + 0.1 reads as 0.7.
    pub fn values(&self) -> Vec<f64> {
        let last = self.steps - 1;
        (0..self.steps)
            .map(|i| {
                if i == 0 {
                    self.tau_min
                } else if i == last {
                    self.tau_max
                } else {
                    let v = self.tau_min + (self.tau_max - self.tau_min) * i as f64 / last as f64;
                    (v * 1e12).round() / 1e12
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub trials: Vec<Trial>,
    pub best_tau: Option<f64>,
}

/// Runs one trial per grid value; grid index `i` is used as the trial index.
pub fn run_grid(spec: &GridSpec, cfg: &SessionConfig) -> Result<GridResult, ReportError> {
    spec.validate()?;
    cfg.validate()?;
    let trials = spec
        .values()
        .into_iter()
        .enumerate()
        .map(|(i, tau)| run_trial(tau, cfg, i as u64))
        .collect::<Result<Vec<_>, _>>()?;
    let best_tau = best_of(&trials).ok().map(|t| t.tau);
    Ok(GridResult { trials, best_tau })
}

fn sorted_by_tau(trials: &[Trial]) -> Vec<&Trial> {
    let mut sorted: Vec<&Trial> = trials.iter().collect();
    sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    sorted
}

pub fn render_csv(trials: &[Trial]) -> Result<String, ReportError> {
    if trials.is_empty() {
        return Err(ReportError::NoTrials);
    }
    let mut out = String::from("tau,mean_fitness,std_fitness,replicates\n");
    for t in sorted_by_tau(trials) {
        let _ = writeln!(out, "{},{},{},{}", t.tau, t.mean_score, t.std_score, t.results.len());
    }
    Ok(out)
}

pub fn emit_csv(trials: &[Trial], path: &Path) -> Result<(), ReportError> {
    let csv = render_csv(trials)?;
    write_file(path, &csv)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 55.0;

struct Scale {
    lo: f64,
    hi: f64,
    out_lo: f64,
    out_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> Self {
        let (lo, hi) = if hi > lo {
            let pad = (hi - lo) * 0.05;
            (lo - pad, hi + pad)
        } else {
            (lo - 0.5, hi + 0.5)
        };
        Self { lo, hi, out_lo, out_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.out_lo + (v - self.lo) / (self.hi - self.lo) * (self.out_hi - self.out_lo)
    }

    fn ticks(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        (0..n).map(move |i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
    }
}

/// Standalone SVG: mean fitness against tau, one marker per trial, and a
/// ring around `best_tau` when given.
pub fn render_plot(trials: &[Trial], best_tau: Option<f64>) -> Result<String, ReportError> {
    if trials.len() < 2 {
        return Err(ReportError::TooFewForPlot(trials.len()));
    }
    let sorted = sorted_by_tau(trials);
    let (tmin, tmax) = (sorted[0].tau, sorted[sorted.len() - 1].tau);
    let fmin = sorted.iter().map(|t| t.mean_score).fold(f64::INFINITY, f64::min);
    let fmax = sorted.iter().map(|t| t.mean_score).fold(f64::NEG_INFINITY, f64::max);
    let xs = Scale::new(tmin, tmax, LEFT, WIDTH - RIGHT);
    // SVG y grows downwards.
    let ys = Scale::new(fmin, fmax, HEIGHT - BOTTOM, TOP);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(svg, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for t in xs.ticks(5) {
        let x = xs.map(t);
        let _ = writeln!(
            svg,
            r#"<line class="tick" x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{t:.3}</text>"#,
            y0 + 5.0,
            y0 + 18.0
        );
    }
    for f in ys.ticks(5) {
        let y = ys.map(f);
        let _ = writeln!(
            svg,
            r#"<line class="tick" x1="{:.2}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{f:.2}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle">tau</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text class="y-label" x="0" y="0" text-anchor="middle" transform="translate(16 {:.2}) rotate(-90)">fitness (-log f)</text>"#,
        (y0 + y1) / 2.0
    );

    let points: Vec<String> =
        sorted.iter().map(|t| format!("{:.2},{:.2}", xs.map(t.tau), ys.map(t.mean_score))).collect();
    let _ = writeln!(
        svg,
        r#"<polyline class="series" points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        points.join(" ")
    );
    for t in &sorted {
        let _ = writeln!(
            svg,
            r#"<circle class="point" data-tau="{}" data-fitness="{}" cx="{:.2}" cy="{:.2}" r="3.5" fill="steelblue"/>"#,
            t.tau,
            t.mean_score,
            xs.map(t.tau),
            ys.map(t.mean_score)
        );
    }
    if let Some(best) = best_tau {
        if let Some(t) = sorted.iter().find(|t| t.tau == best) {
            let _ = writeln!(
                svg,
                r#"<circle class="best" data-tau="{}" cx="{:.2}" cy="{:.2}" r="8" fill="none" stroke="crimson" stroke-width="2"/>"#,
                t.tau,
                xs.map(t.tau),
                ys.map(t.mean_score)
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_plot(trials: &[Trial], best_tau: Option<f64>, path: &Path) -> Result<(), ReportError> {
    let svg = render_plot(trials, best_tau)?;
    write_file(path, &svg)
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    let io = |source| ReportError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}
