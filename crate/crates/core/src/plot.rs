//! Dependency-free SVG charts: metric-vs-parameter line panels and sample
//! scatters over mixture component ellipses.
//!
//! Output is plain text with fixed number formatting, so identical inputs give
//! byte-identical files.

use std::fmt::Write as _;

use crate::datasets::GmmSpec;
use crate::error::{Error, Result};
use crate::linalg::Vec2;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 56.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            return Axis {
                lo: lo - pad,
                hi: hi + pad,
            };
        }
        let pad = (hi - lo) * 0.05;
        Axis {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn map(&self, v: f64, from: f64, to: f64) -> f64 {
        from + (v - self.lo) / (self.hi - self.lo) * (to - from)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plot rectangle as (left, right, top, bottom) in SVG coordinates.
type Rect = (f64, f64, f64, f64);

fn panel_rect(ox: f64) -> Rect {
    (ox + MARGIN, ox + PANEL_W - 12.0, 28.0, PANEL_H - 40.0)
}

fn frame(out: &mut String, rect: Rect, title: &str, x_label: &str, y_label: &str, xa: Axis, ya: Axis) {
    let (l, r, t, b) = rect;
    let ox = l - MARGIN;
    let _ = writeln!(
        out,
        r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        r - l,
        b - t
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        (l + r) / 2.0,
        t - 10.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (l + r) / 2.0,
        b + 32.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
        ox + 14.0,
        (t + b) / 2.0,
        ox + 14.0,
        (t + b) / 2.0,
        escape(y_label)
    );
    for v in xa.ticks(5) {
        let x = xa.map(v, l, r);
        let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{b:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, b + 4.0);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, b + 16.0, tick_label(v));
    }
    for v in ya.ticks(5) {
        let y = ya.map(v, b, t);
        let _ = writeln!(out, r#"<line x1="{:.2}" y1="{y:.2}" x2="{l:.2}" y2="{y:.2}" stroke="black"/>"#, l - 4.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            l - 6.0,
            y + 4.0,
            tick_label(v)
        );
    }
}

fn tick_label(v: f64) -> String {
    let s = if v.abs() >= 100.0 { format!("{v:.0}") } else { format!("{v:.2}") };
    if s == "-0.00" { "0.00".into() } else { s }
}

/// Panels laid out side by side, each with its own axes and a shared legend.
pub fn line_panels(panels: &[Panel]) -> Result<String> {
    if panels.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let n_series = panels.iter().map(|p| p.series.len()).max().unwrap_or(0);
    let legend_h = 16.0 * n_series as f64 + 8.0;
    let (w, h) = (PANEL_W * panels.len() as f64, PANEL_H + legend_h);
    let mut out = String::new();
    header(&mut out, w, h);
    for (k, p) in panels.iter().enumerate() {
        let ox = PANEL_W * k as f64;
        let xa = Axis::fit(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.0)));
        let ya = Axis::fit(p.series.iter().flat_map(|s| s.points.iter().map(|q| q.1)));
        let rect = panel_rect(ox);
        frame(&mut out, rect, &p.title, &p.x_label, &p.y_label, xa, ya);
        let (l, r, t, b) = rect;
        for (i, s) in p.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|q| q.0.is_finite() && q.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", xa.map(x, l, r), ya.map(y, b, t)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
            for q in &pts {
                let (x, y) = q.split_once(',').expect("formatted pair");
                let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
            }
        }
    }
    if let Some(p) = panels.iter().max_by_key(|p| p.series.len()) {
        for (i, s) in p.series.iter().enumerate() {
            let y = PANEL_H + 12.0 + 16.0 * i as f64;
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#,
                MARGIN,
                MARGIN + 20.0
            );
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, MARGIN + 26.0, y + 4.0, escape(&s.name));
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Samples over the two-sigma ellipses of every component of `specs`.
pub fn scatter(title: &str, samples: &[Vec2], specs: &[&GmmSpec]) -> Result<String> {
    let mut xs: Vec<f64> = samples.iter().map(|p| p[0]).collect();
    let mut ys: Vec<f64> = samples.iter().map(|p| p[1]).collect();
    for spec in specs {
        for c in spec.components() {
            let rx = 2.0 * c.covariance.0[0][0].sqrt();
            let ry = 2.0 * c.covariance.0[1][1].sqrt();
            xs.extend([c.mean[0] - rx, c.mean[0] + rx]);
            ys.extend([c.mean[1] - ry, c.mean[1] + ry]);
        }
    }
    let xa = Axis::fit(xs.into_iter());
    let ya = Axis::fit(ys.into_iter());
    let mut out = String::new();
    header(&mut out, PANEL_W + 60.0, PANEL_H + 60.0);
    let (l, r, t_top, b) = (MARGIN, PANEL_W + 48.0, 28.0, PANEL_H + 20.0);
    frame(&mut out, (l, r, t_top, b), title, "x0", "x1", xa, ya);
    for (k, spec) in specs.iter().enumerate() {
        let color = PALETTE[(k + 1) % PALETTE.len()];
        for c in spec.components() {
            let (rx, ry, angle) = ellipse_axes(c.covariance.0);
            let (sin, cos) = angle.sin_cos();
            let pts: Vec<String> = (0..48)
                .map(|i| {
                    let t = std::f64::consts::TAU * i as f64 / 48.0;
                    let (u, v) = (2.0 * rx * t.cos(), 2.0 * ry * t.sin());
                    let x = c.mean[0] + cos * u - sin * v;
                    let y = c.mean[1] + sin * u + cos * v;
                    format!("{:.2},{:.2}", xa.map(x, l, r), ya.map(y, b, t_top))
                })
                .collect();
            let _ = writeln!(
                out,
                r#"<polygon points="{}" fill="none" stroke="{color}" stroke-dasharray="4 2"/>"#,
                pts.join(" ")
            );
        }
    }
    for p in samples {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="{}" fill-opacity="0.5"/>"#,
            xa.map(p[0], l, r),
            ya.map(p[1], b, t_top),
            PALETTE[0]
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Standard deviations along the principal axes and the major-axis angle.
fn ellipse_axes(c: [[f64; 2]; 2]) -> (f64, f64, f64) {
    let (a, b, d) = (c[0][0], c[0][1], c[1][1]);
    let mid = (a + d) / 2.0;
    let rad = (((a - d) / 2.0).powi(2) + b * b).sqrt();
    let angle = 0.5 * (2.0 * b).atan2(a - d);
    ((mid + rad).sqrt(), (mid - rad).max(0.0).sqrt(), angle)
}
