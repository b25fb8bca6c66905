//! Minimal deterministic SVG emitters: line plots, bar charts and relevance
//! heatmaps. Coordinates are printed with fixed precision and nothing
//! time- or environment-dependent is embedded, so output is byte-stable.

use std::fmt::Write;

use thiserror::Error;

use crate::explain::RelevanceMap;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#7f7f7f"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlotError {
    #[error("no plottable columns: {0}")]
    UnknownColumns(String),
    #[error("row {row}: {msg}")]
    BadRow { row: usize, msg: String },
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        esc(title)
    );
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Named `(x, y)` series sharing one pair of axes.
pub type Series = (String, Vec<(f64, f64)>);

pub fn line_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let (x0, x1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    axes(&mut out, x_label, (x0, x1), (y0, y1));
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = 40.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{colour}" text-anchor="end">{}</text>"#,
            W - MARGIN,
            esc(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn axes(out: &mut String, x_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(
        out,
        r#"<path d="M{l:.1},{t:.1} L{l:.1},{b:.1} L{r:.1},{b:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(out, r#"<text x="{l:.1}" y="{:.1}">{x0:.3}</text>"#, b + 15.0);
    let _ = writeln!(
        out,
        r#"<text x="{r:.1}" y="{:.1}" text-anchor="end">{x1:.3}</text>"#,
        b + 15.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 10.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{b:.1}" text-anchor="end">{y0:.3}</text>"#,
        l - 4.0
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y1:.3}</text>"#,
        l - 4.0,
        t + 4.0
    );
}

/// Vertical bars, one per label; values are printed in the legend.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let n = bars.len().max(1) as f64;
    let slot = (W - 2.0 * MARGIN) / n;
    let base = H - MARGIN;
    let _ = writeln!(
        out,
        r#"<path d="M{MARGIN:.1},{base:.1} L{:.1},{base:.1}" stroke="black"/>"#,
        W - MARGIN
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (v.max(0.0) / max) * (H - 2.0 * MARGIN - 20.0);
        let x = MARGIN + slot * (i as f64 + 0.2);
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{colour}"/>"#,
            base - h,
            slot * 0.6
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot * 0.3,
            base + 15.0,
            esc(label)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}: {v:.4}</text>"#,
            W - MARGIN,
            40.0 + 16.0 * i as f64,
            esc(label)
        );
    }
    let total: f64 = bars.iter().map(|b| b.1).sum();
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">sum: {total:.4}</text>"#,
        W - MARGIN,
        40.0 + 16.0 * bars.len() as f64
    );
    out.push_str("</svg>\n");
    out
}

/// Streams as rows, samples as columns; red positive, blue negative.
pub fn relevance_heatmap(title: &str, map: &RelevanceMap, stream_names: &[&str]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let scale = map.relevance.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let cols = map.window_len.max(1);
    let cw = (W - 2.0 * MARGIN) / cols as f64;
    let rh = (H - 2.0 * MARGIN) / map.streams.max(1) as f64;
    for s in 0..map.streams {
        let y = MARGIN + rh * s as f64;
        let name = stream_names.get(s).copied().unwrap_or("");
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            y + rh * 0.6,
            esc(name)
        );
        for (t, v) in map.row(s).iter().enumerate() {
            let a = (v.abs() / scale).min(1.0);
            if a < 1e-3 {
                continue;
            }
            let colour = if *v >= 0.0 { "#d62728" } else { "#1f77b4" };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{rh:.2}" fill="{colour}" fill-opacity="{a:.3}"/>"#,
                MARGIN + cw * t as f64,
                cw + 0.05
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Line plot of every numeric column against the first one. Header names
/// become series names.
pub fn plot_csv(title: &str, text: &str) -> Result<String, PlotError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head: Vec<&str> = lines
        .next()
        .ok_or_else(|| PlotError::UnknownColumns("empty input".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    if head.len() < 2 {
        return Err(PlotError::UnknownColumns(head.join(",")));
    }
    let mut series: Vec<Series> = head[1..].iter().map(|h| (h.to_string(), Vec::new())).collect();
    let mut rows = 0;
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != head.len() {
            return Err(PlotError::BadRow {
                row: row + 2,
                msg: format!("{} cells, header has {}", cells.len(), head.len()),
            });
        }
        let x: f64 = cells[0].parse().map_err(|_| PlotError::BadRow {
            row: row + 2,
            msg: format!("x value {:?} is not numeric", cells[0]),
        })?;
        for (s, c) in series.iter_mut().zip(&cells[1..]) {
            if let Ok(y) = c.parse::<f64>() {
                s.1.push((x, y));
            }
        }
        rows += 1;
    }
    series.retain(|s| !s.1.is_empty());
    if rows == 0 || series.is_empty() {
        return Err(PlotError::UnknownColumns(head.join(",")));
    }
    Ok(line_plot(title, head[0], &series))
}
