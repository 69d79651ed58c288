//! Minimal SVG charts: labeled scatter plots and line charts.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

/// Fill color per class: yellow for `Fake`, purple for `Real`.
pub const CLASS_COLORS: [&str; 2] = ["#f2c80f", "#6a3d9a"];
const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x0 -= 0.5;
            f.x1 += 0.5;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str, frame: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444444"/>"##, r - l, b - t);
    for k in 0..=4 {
        let fx = frame.x0 + (frame.x1 - frame.x0) * k as f64 / 4.0;
        let fy = frame.y0 + (frame.y1 - frame.y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{fx:.3}</text>"#, frame.px(fx), b + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{fy:.3}</text>"#, l - 4.0, frame.py(fy) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 14.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
    s
}

fn legend(s: &mut String, entries: &[(String, &str)]) {
    for (k, (name, color)) in entries.iter().enumerate() {
        let y = MARGIN + 14.0 + 18.0 * k as f64;
        let x = WIDTH - MARGIN - 150.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{color}"/>"#, y - 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, escape(name));
    }
}

/// Scatter of 2-D points colored by class index (0 or 1).
pub fn scatter_svg(points: &[(f64, f64)], classes: &[usize], class_names: [&str; 2], title: &str) -> String {
    let frame = Frame::fit(points.iter().copied());
    let mut s = open(title, &frame, "dim 1", "dim 2");
    for (&(x, y), &c) in points.iter().zip(classes) {
        let color = CLASS_COLORS[c.min(1)];
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" fill-opacity="0.8"/>"#, frame.px(x), frame.py(y));
    }
    legend(&mut s, &[(class_names[0].to_string(), CLASS_COLORS[0]), (class_names[1].to_string(), CLASS_COLORS[1])]);
    s.push_str("</svg>\n");
    s
}

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart of several series with a legend. `diagonal` adds the chance
/// line of a ROC plot.
pub fn line_chart_svg(series: &[Series], title: &str, xlabel: &str, ylabel: &str, diagonal: bool) -> String {
    let mut frame = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    if diagonal {
        frame = Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
    }
    let mut s = open(title, &frame, xlabel, ylabel);
    if diagonal {
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999999" stroke-dasharray="4 4"/>"##,
            frame.px(0.0),
            frame.py(0.0),
            frame.px(1.0),
            frame.py(1.0)
        );
    }
    let mut entries = Vec::new();
    for (k, ser) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        entries.push((ser.name.clone(), color));
    }
    legend(&mut s, &entries);
    s.push_str("</svg>\n");
    s
}
