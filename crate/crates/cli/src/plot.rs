//! Small self-contained SVG line charts.

use std::fmt::Write;

/// (x, y, optional (lower, upper) error bar).
pub type Point = (f64, f64, Option<(f64, f64)>);

pub struct Series {
    pub name: String,
    pub points: Vec<Point>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed horizontal reference line with a label.
    pub reference: Option<(f64, String)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    while t <= hi + step * 1e-9 {
        ticks.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    ticks
}

fn label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

impl Chart {
    pub fn render(&self) -> String {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            for (x, y, e) in &s.points {
                xs.push(*x);
                ys.push(*y);
                if let Some((lo, hi)) = e {
                    ys.push(*lo);
                    ys.push(*hi);
                }
            }
        }
        if let Some((r, _)) = &self.reference {
            ys.push(*r);
        }
        let finite = |v: &&f64| v.is_finite();
        let (mut x0, mut x1) = (
            xs.iter().filter(finite).copied().fold(f64::INFINITY, f64::min),
            xs.iter().filter(finite).copied().fold(f64::NEG_INFINITY, f64::max),
        );
        let (mut y0, mut y1) = (
            ys.iter().filter(finite).copied().fold(f64::INFINITY, f64::min),
            ys.iter().filter(finite).copied().fold(f64::NEG_INFINITY, f64::max),
        );
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = (y1 - y0) * 0.05;
        y0 = if y0 >= 0.0 { (y0 - pad).max(0.0) } else { y0 - pad };
        y1 += pad;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
        let sy = |y: f64| H - BOTTOM - (y - y0) / (y1 - y0) * (H - TOP - BOTTOM);

        let mut o = String::new();
        let _ = writeln!(
            o,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(o, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            o,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            o,
            r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{0}" stroke="black"/>"#,
            H - BOTTOM,
            W - RIGHT
        );
        for t in nice_ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                o,
                r#"<line x1="{x:.2}" y1="{0}" x2="{x:.2}" y2="{1}" stroke="black"/><text x="{x:.2}" y="{2}" text-anchor="middle">{3}</text>"#,
                H - BOTTOM,
                H - BOTTOM + 5.0,
                H - BOTTOM + 19.0,
                label(t)
            );
        }
        for t in nice_ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(
                o,
                r##"<line x1="{0}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><line x1="{LEFT}" y1="{y:.2}" x2="{1}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{2}" y="{3:.2}" text-anchor="end">{4}</text>"##,
                LEFT - 5.0,
                W - RIGHT,
                LEFT - 8.0,
                y + 4.0,
                label(t)
            );
        }
        let _ = writeln!(
            o,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            o,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            escape(&self.y_label)
        );
        if let Some((r, name)) = &self.reference {
            let y = sy(*r);
            let _ = writeln!(
                o,
                r#"<line x1="{LEFT}" y1="{y:.2}" x2="{0}" y2="{y:.2}" stroke="gray" stroke-dasharray="6 4"/><text x="{1}" y="{2:.2}" text-anchor="end" fill="gray">{3}</text>"#,
                W - RIGHT,
                W - RIGHT - 4.0,
                y - 5.0,
                escape(name)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y, _)| x.is_finite() && y.is_finite())
                .map(|(x, y, _)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                .collect();
            let _ = writeln!(
                o,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for (x, y, e) in s.points.iter().filter(|(x, y, _)| x.is_finite() && y.is_finite()) {
                if let Some((lo, hi)) = e {
                    let _ = writeln!(
                        o,
                        r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                        sx(*x),
                        sy(*lo),
                        sy(*hi)
                    );
                }
                let _ = writeln!(
                    o,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    sx(*x),
                    sy(*y)
                );
            }
            let ly = TOP + 6.0 + 16.0 * i as f64;
            let _ = writeln!(
                o,
                r#"<rect x="{0}" y="{1}" width="12" height="3" fill="{color}"/><text x="{2}" y="{3}">{4}</text>"#,
                LEFT + 10.0,
                ly,
                LEFT + 28.0,
                ly + 5.0,
                escape(&s.name)
            );
        }
        o.push_str("</svg>\n");
        o
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_valid_looking_svg() {
        let chart = Chart {
            title: "RMSE <vs> count".into(),
            x_label: "annotations".into(),
            y_label: "RMSE".into(),
            series: vec![Series {
                name: "DM+".into(),
                points: vec![(0.0, 0.2, Some((0.1, 0.3))), (100.0, 0.1, None)],
            }],
            reference: Some((0.25, "ref".into())),
        };
        let svg = chart.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("&lt;vs&gt;"));
        assert_eq!(svg, chart.render());
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 1.0);
        assert_eq!(t.first(), Some(&0.0));
        assert!(*t.last().unwrap() <= 1.0 + 1e-12);
        assert!(t.len() >= 3);
    }
}
