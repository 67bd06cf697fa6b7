//! Minimal SVG line and scatter charts.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(series: &[Series]) -> Frame {
        let pts = series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y1 = y0 + 1.0;
        }
        Frame { x0, x1, y0, y1 }
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

fn open(title: &str, f: &Frame) -> String {
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(s, r#"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{l}" y="{}" text-anchor="start">{:.4}</text>"#, b + 16.0, f.x0).unwrap();
    writeln!(s, r#"<text x="{r}" y="{}" text-anchor="end">{:.4}</text>"#, b + 16.0, f.x1).unwrap();
    writeln!(s, r#"<text x="{}" y="{b}" text-anchor="end">{:.4}</text>"#, l - 4.0, f.y0).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.4}</text>"#, l - 4.0, t + 4.0, f.y1).unwrap();
    s
}

fn legend(s: &mut String, series: &[Series]) {
    for (i, ser) in series.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/>"#, WIDTH - MARGIN - 110.0, y - 9.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, WIDTH - MARGIN - 96.0, escape(&ser.name)).unwrap();
    }
}

pub fn line_chart(title: &str, series: &[Series]) -> String {
    let f = Frame::fit(series);
    let mut s = open(title, &f);
    for (i, ser) in series.iter().enumerate() {
        let mut d = String::new();
        for &(x, y) in ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            write!(d, "{}{:.2} {:.2}", if d.is_empty() { "M" } else { "L" }, f.px(x), f.py(y)).unwrap();
        }
        writeln!(s, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.2"/>"#, PALETTE[i % PALETTE.len()]).unwrap();
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}

pub fn scatter_chart(title: &str, series: &[Series]) -> String {
    let f = Frame::fit(series);
    let mut s = open(title, &f);
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for &(x, y) in ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{c}" fill-opacity="0.6"/>"#, f.px(x), f.py(y)).unwrap();
        }
    }
    legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}
