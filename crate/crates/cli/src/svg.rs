//! Hand-emitted SVG line plots: axes, ticks, one polyline per series, and a
//! legend. Plots are a pure view of the series data; all coordinates are
//! formatted with fixed precision so output bytes are reproducible.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub color: String,
    /// Stroke dash pattern; empty means solid.
    pub dash: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 34.0;
const MARGIN_B: f64 = 48.0;

fn x_ticks(x_max: f64) -> Vec<f64> {
    let raw = x_max / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| x_max / s <= 6.5)
        .unwrap_or(mag * 10.0);
    let mut ticks = vec![];
    let mut t = 0.0;
    while t <= x_max + 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

/// Render series with x in `[0, x_max]` and y in `[0, 1]`.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, x_max: f64, series: &[Series]) -> String {
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_max = if x_max <= 0.0 { 1.0 } else { x_max };
    let sx = |x: f64| MARGIN_L + x / x_max * plot_w;
    let sy = |y: f64| MARGIN_T + (1.0 - y.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        title
    );

    // gridlines and y ticks at 0, 0.2, ... 1.0
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd" stroke-width="1"/>"##,
            sx(0.0),
            sy(y),
            sx(x_max),
            sy(y)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{:.1}</text>"#,
            MARGIN_L - 8.0,
            sy(y) + 4.0,
            y
        );
    }
    for t in x_ticks(x_max) {
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#bbbbbb" stroke-width="1"/>"##,
            sx(t),
            sy(0.0),
            sx(t),
            sy(0.0) + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            sx(t),
            sy(0.0) + 18.0,
            t as u64
        );
    }
    // axes
    let _ = writeln!(
        svg,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="1.5"/>"#,
        sx(0.0),
        sy(0.0),
        sx(x_max),
        sy(0.0)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="1.5"/>"#,
        sx(0.0),
        sy(0.0),
        sx(0.0),
        sy(1.0)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0,
        x_label
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        y_label
    );

    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let mut points = String::new();
        for (x, y) in &s.points {
            let _ = write!(points, "{:.2},{:.2} ", sx(*x), sy(*y));
        }
        let dash = if s.dash.is_empty() {
            String::new()
        } else {
            format!(r#" stroke-dasharray="{}""#, s.dash)
        };
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.8"{} points="{}"/>"#,
            s.color,
            dash,
            points.trim_end()
        );
    }
    // legend
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_T + 14.0 + i as f64 * 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2.5"/>"#,
            MARGIN_L + 10.0,
            y - 4.0,
            MARGIN_L + 34.0,
            y - 4.0,
            s.color
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            MARGIN_L + 40.0,
            y,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub const PALETTE: &[&str] = &["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
