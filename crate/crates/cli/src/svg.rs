//! Minimal standalone SVG plots.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

/// One drawable series: markers or a polyline.
pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: &'a [(f64, f64)],
    pub line: bool,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>, square: bool) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for &(x, y) in points {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if square {
            let (lo, hi) = (f.x0.min(f.y0), f.x1.max(f.y1));
            f = Frame { x0: lo, x1: hi, y0: lo, y1: hi };
        }
        let pad = |a: f64, b: f64| if b > a { 0.05 * (b - a) } else { 0.5 * a.abs().max(1.0) };
        let (px, py) = (pad(f.x0, f.x1), pad(f.y0, f.y1));
        Frame { x0: f.x0 - px, x1: f.x1 + px, y0: f.y0 - py, y1: f.y1 + py }
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 1.5 * MARGIN)
    }

    fn sy(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 1.5 * MARGIN)
    }
}

/// Renders `series` on shared axes. `diagonal` draws y = x over a square frame.
pub fn plot(title: &str, x_label: &str, y_label: &str, series: &[Series], diagonal: bool) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter()), diagonal);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title)).unwrap();
    let (l, r, t, b) = (f.sx(f.x0), f.sx(f.x1), f.sy(f.y1), f.sy(f.y0));
    writeln!(s, r#"<rect x="{l:.2}" y="{t:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, r - l, b - t).unwrap();
    for (v, anchor) in [(f.x0, "start"), (f.x1, "end")] {
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="{anchor}">{}</text>"#, f.sx(v), b + 16.0, tick(v)).unwrap();
    }
    for v in [f.y0, f.y1] {
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, l - 4.0, f.sy(v) + 4.0, tick(v)).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 12.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(y_label)
    )
    .unwrap();
    if diagonal {
        writeln!(s, r#"<line x1="{l:.2}" y1="{b:.2}" x2="{r:.2}" y2="{t:.2}" stroke="gray" stroke-dasharray="4 3"/>"#).unwrap();
    }
    for (k, ser) in series.iter().enumerate() {
        if ser.line {
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.sx(x), f.sy(y))).collect();
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{}"/>"#, pts.join(" "), ser.color).unwrap();
        } else {
            for &(x, y) in ser.points {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, f.sx(x), f.sy(y), ser.color).unwrap();
            }
        }
        let ly = t + 14.0 + 14.0 * k as f64;
        writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" fill="{}">{}</text>"#, l + 6.0, ser.color, escape(ser.label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) { format!("{v:.2e}") } else { format!("{v:.3}") }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
