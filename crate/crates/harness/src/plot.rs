//! Learning curves as a self-contained SVG: per-cell mean line with a
//! min–max band across seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::parse_config;
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{read_metrics, series, CONFIG_FILE, METRICS_FILE};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: [f64; 4] = [30.0, 190.0, 55.0, 75.0]; // top, right, bottom, left
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];
const DASHES: [&str; 4] = ["none", "6 3", "2 3", "8 3 2 3"];

/// Mean and min–max envelope of one cell on the steps every run shares.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub label: String,
    /// `(env_steps, mean, min, max)`.
    pub points: Vec<(usize, f64, f64, f64)>,
}

pub fn bands(curves: &BTreeMap<String, Vec<Vec<(usize, f64)>>>) -> Vec<Band> {
    curves
        .iter()
        .map(|(label, runs)| {
            let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for run in runs {
                for &(s, v) in run {
                    by_step.entry(s).or_default().push(v);
                }
            }
            let points = by_step
                .into_iter()
                .filter(|(_, vs)| vs.len() == runs.len())
                .map(|(s, vs)| {
                    let mean = vs.iter().sum::<f64>() / vs.len() as f64;
                    let lo = vs.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    (s, mean, lo, hi)
                })
                .collect();
            Band {
                label: label.clone(),
                points,
            }
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

pub fn render_svg(bands: &[Band], metric: &str) -> String {
    let pts = bands.iter().flat_map(|b| &b.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(s, _, lo, hi) in pts {
        x0 = x0.min(s as f64);
        x1 = x1.max(s as f64);
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 1.0, y1 + 1.0);
    }
    let [top, right, bottom, left] = MARGIN;
    let (pw, ph) = (WIDTH - left - right, HEIGHT - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in nice_ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{b2:.2}" stroke="black"/><text x="{x:.2}" y="{ty:.2}" text-anchor="middle">{t}</text>"#,
            b = top + ph,
            b2 = top + ph + 5.0,
            ty = top + ph + 18.0
        );
    }
    for t in nice_ticks(y0, y1, 6) {
        let y = sy(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{l2:.2}" y1="{y:.2}" x2="{r:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{tx:.2}" y="{y:.2}" text-anchor="end" dominant-baseline="middle">{t}</text>"##,
            l2 = left,
            r = left + pw,
            tx = left - 8.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">env_steps</text>"#,
        left + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{cy:.2}" text-anchor="middle" transform="rotate(-90 18 {cy:.2})">{}</text>"#,
        escape(metric),
        cy = top + ph / 2.0
    );

    for (i, band) in bands.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = DASHES[(i / COLORS.len() + i) % DASHES.len()];
        if band.points.len() > 1 {
            let upper = band.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0 as f64), sy(p.3)));
            let lower = band.points.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.0 as f64), sy(p.2)));
            let poly: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                poly.join(" ")
            );
        }
        let line: Vec<String> = band.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.0 as f64), sy(p.1))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="mean" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2" stroke-dasharray="{dash}"/>"#,
            escape(&band.label),
            line.join(" ")
        );
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2" stroke-dasharray="{dash}"/><text x="{:.2}" y="{ly:.2}" dominant-baseline="middle">{}</text></g>"#,
            lx + 24.0,
            lx + 30.0,
            escape(&band.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads `metric` from every run, groups runs by cell and writes the SVG.
pub fn plot_curves(run_dirs: &[PathBuf], metric: &str, out: &Path) -> Result<()> {
    let mut curves: BTreeMap<String, Vec<Vec<(usize, f64)>>> = BTreeMap::new();
    for dir in run_dirs {
        let cfg = parse_config(&dir.join(CONFIG_FILE))?;
        let s = series(&read_metrics(&dir.join(METRICS_FILE))?, metric);
        if s.is_empty() {
            return Err(HarnessError::Config(format!(
                "metric `{metric}` missing from run {}",
                dir.display()
            )));
        }
        curves.entry(cfg.cell_id()).or_default().push(s);
    }
    let svg = render_svg(&bands(&curves), metric);
    fs::write(out, svg).map_err(io_err(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_keeps_only_shared_steps() {
        let c = BTreeMap::from([("a".to_string(), vec![vec![(0, 1.0), (10, 3.0)], vec![(0, 3.0)]])]);
        assert_eq!(bands(&c)[0].points, vec![(0, 2.0, 1.0, 3.0)]);
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 20000.0, 6);
        assert_eq!(t.first(), Some(&0.0));
        assert_eq!(t.last(), Some(&20000.0));
    }
}
