//! Minimal static SVG charts: a scatter panel and a multi-series line panel.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Bounds {
    /// Tight box around the points, padded by 5%; degenerate ranges widen to 1.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points.into_iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let pad = |lo: f64, hi: f64| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let p = 0.05 * (hi - lo);
                (lo - p, hi + p)
            }
        };
        Bounds { x: pad(x0, x1), y: pad(y0, y1) }
    }
}

struct Frame {
    b: Bounds,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.b.x.0) / (self.b.x.1 - self.b.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.b.y.0) / (self.b.y.1 - self.b.y.0) * (H - TOP - BOTTOM)
    }

    fn open(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#).unwrap();
        writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, (LEFT + W - RIGHT) / 2.0, escape(title)).unwrap();
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        writeln!(out, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0).unwrap();
        for t in ticks(self.b.x) {
            let x = self.px(t);
            writeln!(out, r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, y1 + 4.0, y1 + 16.0, tick_label(t)).unwrap();
        }
        for t in ticks(self.b.y) {
            let y = self.py(t);
            writeln!(out, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 4.0, x0 - 6.0, y + 4.0, tick_label(t)).unwrap();
        }
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 10.0, escape(xlabel)).unwrap();
        writeln!(out, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, (y0 + y1) / 2.0, (y0 + y1) / 2.0, escape(ylabel)).unwrap();
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks((lo, hi): (f64, f64)) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].into_iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-9 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn tick_label(t: f64) -> String {
    let s = format!("{t:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn scatter(points: &[(f64, f64)], bounds: Bounds, title: &str, xlabel: &str, ylabel: &str) -> String {
    let f = Frame { b: bounds };
    let mut out = String::new();
    f.open(&mut out, title, xlabel, ylabel);
    writeln!(out, r#"<g fill="{}" fill-opacity="0.35">"#, PALETTE[0]).unwrap();
    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, f.px(x), f.py(y)).unwrap();
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Polylines with a legend; each path also marks its first and last point.
pub fn lines(series: &[(String, Vec<(f64, f64)>)], bounds: Bounds, title: &str, xlabel: &str, ylabel: &str, endpoints: bool) -> String {
    let f = Frame { b: bounds };
    let mut out = String::new();
    f.open(&mut out, title, xlabel, ylabel);
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#, path.join(" "), escape(name)).unwrap();
        if endpoints {
            if let (Some(a), Some(b)) = (pts.first(), pts.last()) {
                writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="white" stroke="{color}"/><circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, f.px(a.0), f.py(a.1), f.px(b.0), f.py(b.1)).unwrap();
            }
        }
        let ly = TOP + 14.0 + 18.0 * k as f64;
        let lx = W - RIGHT + 12.0;
        writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#, lx + 18.0, lx + 24.0, ly + 4.0, escape(name)).unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range_with_round_steps() {
        let t = ticks((-1.0, 1.0));
        assert_eq!(t.first(), Some(&-1.0));
        assert_eq!(t.last(), Some(&1.0));
        assert!(t.contains(&0.0));
        assert!(ticks((0.0, 300.0)).iter().all(|v| v % 50.0 == 0.0));
    }

    #[test]
    fn charts_are_well_formed() {
        let pts = vec![(0.0, 0.0), (1.0, 2.0)];
        let s = scatter(&pts, Bounds::fit(&pts), "a<b", "x", "y");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(s.contains("a&lt;b"));
        let l = lines(&[("p".into(), pts.clone()), ("q".into(), pts.clone())], Bounds::fit(&pts), "t", "x", "y", true);
        assert_eq!(l.matches("<polyline").count(), 2);
    }

    #[test]
    fn degenerate_bounds_widen() {
        let b = Bounds::fit(&[(1.0, 1.0)]);
        assert!(b.x.1 > b.x.0 && b.y.1 > b.y.0);
    }
}
