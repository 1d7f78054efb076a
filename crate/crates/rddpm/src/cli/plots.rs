//! Minimal static SVG line plots for sweep results.
//!
//! Output is deterministic: fixed canvas, fixed palette, fixed-precision
//! coordinates, and no timestamps, so rerunning a sweep reproduces plot
//! files byte for byte.

use std::path::Path;

use crate::{Error, Result};

/// One polyline: a label for the legend plus (x, y) points.
#[derive(Clone, Debug)]
pub(crate) struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 42.0;
const MARGIN_BOTTOM: f64 = 52.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Renders series as one SVG line chart.
///
/// Axis ranges cover all points with a small pad; degenerate ranges
/// (single x or constant y) get a symmetric pad so the geometry stays
/// finite. Series with no points are skipped. Errors only when no series
/// has any point to draw.
pub(crate) fn line_plot_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    let drawn: Vec<&Series> = series.iter().filter(|s| !s.points.is_empty()).collect();
    if drawn.is_empty() {
        return Err(Error::invalid("a plot needs at least one series with points"));
    }
    for s in &drawn {
        for &(x, y) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                return Err(Error::invalid(format!(
                    "series `{}` holds a non-finite point ({x}, {y})",
                    s.label
                )));
            }
        }
    }

    let (x_min, x_max) = padded_range(drawn.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_min, y_max) = padded_range(drawn.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let to_px = |x: f64, y: f64| {
        let px = MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
        let py = MARGIN_TOP + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;
        (px, py)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    ));

    // Axes.
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + plot_h;
    svg.push_str(&format!(
        "  <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>\n",
        x0 + plot_w
    ));
    svg.push_str(&format!(
        "  <line x1=\"{x0:.1}\" y1=\"{:.1}\" x2=\"{x0:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>\n",
        MARGIN_TOP
    ));

    // Ticks and grid.
    for i in 0..=4 {
        let f = f64::from(i) / 4.0;
        let xv = x_min + f * (x_max - x_min);
        let yv = y_min + f * (y_max - y_min);
        let (tx, _) = to_px(xv, y_min);
        let (_, ty) = to_px(x_min, yv);
        svg.push_str(&format!(
            "  <line x1=\"{tx:.1}\" y1=\"{y0:.1}\" x2=\"{tx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            y0 + 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{tx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 18.0,
            tick(xv)
        ));
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{ty:.1}\" x2=\"{x0:.1}\" y2=\"{ty:.1}\" stroke=\"black\"/>\n",
            x0 - 4.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            x0 - 8.0,
            ty + 4.0,
            tick(yv)
        ));
        if i > 0 {
            svg.push_str(&format!(
                "  <line x1=\"{x0:.1}\" y1=\"{ty:.1}\" x2=\"{:.1}\" y2=\"{ty:.1}\" \
                 stroke=\"#dddddd\"/>\n",
                x0 + plot_w
            ));
        }
    }
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    ));

    // Series polylines, markers, and legend.
    for (i, s) in drawn.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.len() > 1 {
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = to_px(x, y);
                    format!("{px:.1},{py:.1}")
                })
                .collect();
            svg.push_str(&format!(
                "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                path.join(" ")
            ));
        }
        for &(x, y) in &pts {
            let (px, py) = to_px(x, y);
            svg.push_str(&format!(
                "  <circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        let ly = MARGIN_TOP + 14.0 + 18.0 * i as f64;
        let lx = MARGIN_LEFT + plot_w + 14.0;
        svg.push_str(&format!(
            "  <rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            ly - 10.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>\n",
            lx + 18.0,
            escape(&s.label)
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders and writes one plot file.
pub(crate) fn write_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let svg = line_plot_svg(title, x_label, y_label, series)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        // Single value: pad by a size-relative amount so the point sits
        // mid-plot.
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.1 };
        (lo - pad, lo + pad)
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    if trimmed == "-0" { "0".to_string() } else { trimmed.to_string() }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
