//! Minimal static SVG rendering for survival curves, histograms and grids.

use std::fmt::Write;

use crate::km::KmCurve;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 4] = ["#c0392b", "#2471a3", "#1e8449", "#7d3c98"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Canvas {
    out: String,
    x_max: f64,
    y_max: f64,
}

impl Canvas {
    fn new(title: &str, x_label: &str, y_label: &str, x_max: f64, y_max: f64) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2.0, MARGIN / 1.5);
        let _ = writeln!(
            out,
            r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" stroke="black" fill="none"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        let x_max = if x_max > 0.0 { x_max } else { 1.0 };
        let y_max = if y_max > 0.0 { y_max } else { 1.0 };
        let _ = writeln!(
            out,
            r#"<text x="{x0}" y="{}" text-anchor="middle">0</text><text x="{x1}" y="{}" text-anchor="middle">{:.3}</text>"#,
            y0 + 14.0,
            y0 + 14.0,
            x_max
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y0}" text-anchor="end">0</text><text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            x0 - 4.0,
            x0 - 4.0,
            y1 + 4.0,
            y_max
        );
        Self { out, x_max, y_max }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + x / self.x_max * (WIDTH - 1.5 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - y / self.y_max * (HEIGHT - MARGIN - MARGIN / 1.5)
    }

    fn legend(&mut self, k: usize, label: &str) {
        let y = MARGIN / 1.5 + 14.0 * k as f64 + 6.0;
        let x = WIDTH - MARGIN * 3.0;
        let _ = writeln!(
            self.out,
            r#"<rect x="{x}" y="{}" width="10" height="3" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 3.0,
            PALETTE[k % PALETTE.len()],
            x + 14.0,
            y,
            escape(label)
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

/// Step plot of one or more Kaplan-Meier curves.
pub fn km_svg(title: &str, curves: &[(&str, &KmCurve)], x_max: f64) -> String {
    let mut c = Canvas::new(title, "time (months)", "survival probability", x_max, 1.0);
    for (k, (label, curve)) in curves.iter().enumerate() {
        let mut d = format!("M{:.2},{:.2}", c.px(0.0), c.py(1.0));
        let mut s = 1.0;
        for (&t, &p) in curve.event_times.iter().zip(&curve.survival_probs) {
            let _ = write!(d, " L{:.2},{:.2} L{:.2},{:.2}", c.px(t), c.py(s), c.px(t), c.py(p));
            s = p;
        }
        let _ = write!(d, " L{:.2},{:.2}", c.px(x_max), c.py(s));
        let _ = writeln!(
            c.out,
            r#"<path d="{d}" stroke="{}" fill="none" stroke-width="1.5"/>"#,
            PALETTE[k % PALETTE.len()]
        );
        c.legend(k, label);
    }
    c.finish()
}

/// Bar histogram with bins `[k * width, (k + 1) * width)`.
pub fn histogram_svg(title: &str, x_label: &str, counts: &[usize], bin_width: f64, marker: Option<f64>) -> String {
    let x_max = (counts.len().max(1) as f64) * bin_width;
    let y_max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut c = Canvas::new(title, x_label, "count", x_max, y_max);
    for (k, &n) in counts.iter().enumerate() {
        let (x0, x1) = (c.px(k as f64 * bin_width), c.px((k + 1) as f64 * bin_width));
        let (top, base) = (c.py(n as f64), c.py(0.0));
        let _ = writeln!(
            c.out,
            r##"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#5d6d7e" stroke="white"/>"##,
            x1 - x0,
            base - top
        );
    }
    if let Some(m) = marker {
        let x = c.px(m);
        let _ = writeln!(
            c.out,
            r#"<line x1="{x:.2}" x2="{x:.2}" y1="{:.2}" y2="{:.2}" stroke="{}" stroke-dasharray="4 3"/>"#,
            c.py(0.0),
            c.py(y_max),
            PALETTE[0]
        );
    }
    c.finish()
}

/// Grid of values rendered in grayscale, darker for larger values.
pub fn heatmap_svg(title: &str, grid: &[Vec<f64>]) -> String {
    let rows = grid.len().max(1);
    let cols = grid.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let (lo, hi) = grid
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = ((WIDTH - 2.0 * MARGIN) / cols as f64).min((HEIGHT - 2.0 * MARGIN) / rows as f64);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for (r, row) in grid.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - (v - lo) / span)).round().clamp(0.0, 255.0) as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({shade},{shade},{shade})"><title>{v:.4}</title></rect>"#,
                MARGIN + k as f64 * cell,
                MARGIN + r as f64 * cell
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Line plot of (x, y) points, used for threshold curves.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let x_max = points.iter().map(|p| p.0).fold(0.0, f64::max);
    let y_max = points.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let mut c = Canvas::new(title, x_label, y_label, x_max, y_max);
    let mut d = String::new();
    for (k, &(x, y)) in points.iter().enumerate() {
        let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, c.px(x), c.py(y.max(0.0)));
    }
    let _ = writeln!(c.out, r#"<path d="{d}" stroke="{}" fill="none"/>"#, PALETTE[1]);
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::km::km_estimate;

    #[test]
    fn km_plot_is_well_formed() {
        let curve = km_estimate(&[1.0, 2.0, 3.0], &[true, false, true]).unwrap();
        let svg = km_svg("a < b", &[("high", &curve), ("low", &curve)], 4.0);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<path").count(), 3);
    }

    #[test]
    fn histogram_draws_one_bar_per_bin() {
        let svg = histogram_svg("h", "std", &[1, 0, 3], 0.5, Some(0.7));
        assert_eq!(svg.matches("fill=\"#5d6d7e\"").count(), 3);
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn heatmap_has_a_cell_per_value() {
        let svg = heatmap_svg("d", &[vec![0.0, 1.0], vec![2.0, 3.0]]);
        assert_eq!(svg.matches("<title>").count(), 4);
    }
}
