//! Plain SVG line and scatter plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series<'a> {
    pub name: &'a str,
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    /// Half-widths of a shaded band.
    pub err: Option<&'a [f64]>,
}

pub struct Plot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    /// Text placed in a leading XML comment.
    pub note: &'a str,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64>, ys: impl Iterator<Item = f64>) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 * (1.0 + lo.abs()) {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut { xs });
        let (y0, y1) = span(&mut { ys });
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace("--", "- -")
}

fn open(p: &Plot, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, "<!-- {} -->", escape(p.note));
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, (LEFT + W - RIGHT) / 2.0, escape(p.title));
    let (bx, by) = (f.px(f.x0), f.py(f.y0));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#, W - LEFT - RIGHT, H - TOP - BOTTOM);
    for t in ticks(f.x0, f.x1) {
        let x = f.px(t);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{by:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, by + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, by + 18.0, label(t));
    }
    for t in ticks(f.y0, f.y1) {
        let y = f.py(t);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{bx:.2}" y2="{y:.2}" stroke="black"/>"#, bx - 5.0);
        let _ = writeln!(s, r##"<line x1="{bx:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, W - RIGHT);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, bx - 8.0, y + 4.0, label(t));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (LEFT + W - RIGHT) / 2.0, H - 12.0, escape(p.x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        escape(p.y_label)
    );
    s
}

fn label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn legend(s: &mut String, names: &[&str]) {
    for (k, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * k as f64;
        let x = W - RIGHT + 12.0;
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{c}" stroke-width="2"/>"#, x + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x + 26.0, y + 4.0, escape(n));
    }
}

/// Lines with optional error bands, one colour per series.
pub fn lines(p: &Plot, series: &[Series]) -> String {
    let f = Frame::fit(
        series.iter().flat_map(|s| s.xs.iter().copied()),
        series.iter().flat_map(|s| {
            let e = s.err;
            s.ys.iter().enumerate().flat_map(move |(k, &y)| {
                let d = e.map_or(0.0, |e| e[k]);
                [y - d, y + d]
            })
        }),
    );
    let mut s = open(p, &f);
    for (k, ser) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        if let Some(err) = ser.err {
            let mut pts: Vec<String> = ser.xs.iter().zip(ser.ys).zip(err).map(|((&x, &y), &e)| format!("{:.2},{:.2}", f.px(x), f.py(y + e))).collect();
            pts.extend(ser.xs.iter().zip(ser.ys).zip(err).rev().map(|((&x, &y), &e)| format!("{:.2},{:.2}", f.px(x), f.py(y - e))));
            let _ = writeln!(s, r#"<polygon points="{}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "));
        }
        let pts: Vec<String> = ser.xs.iter().zip(ser.ys).map(|(&x, &y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, pts.join(" "));
    }
    legend(&mut s, &series.iter().map(|s| s.name).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Points per group, plus the diagonal `y = x`.
pub fn scatter(p: &Plot, groups: &[Series]) -> String {
    let all = || groups.iter().flat_map(|g| g.xs.iter().chain(g.ys.iter()).copied());
    let f = Frame::fit(all(), all());
    let mut s = open(p, &f);
    let lo = f.x0.max(f.y0);
    let hi = f.x1.min(f.y1);
    if lo < hi {
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
            f.px(lo),
            f.py(lo),
            f.px(hi),
            f.py(hi)
        );
    }
    for (k, g) in groups.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for (&x, &y) in g.xs.iter().zip(g.ys) {
            if x.is_finite() && y.is_finite() {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{c}" fill-opacity="0.8"/>"#, f.px(x), f.py(y));
            }
        }
    }
    legend(&mut s, &groups.iter().map(|g| g.name).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round_and_inside() {
        let t = ticks(-0.13, 2.7);
        assert_eq!(t.first().copied(), Some(0.0));
        assert!(t.iter().all(|&v| (-0.13..=2.7).contains(&v)));
        assert_eq!(ticks(0.0, 2.4), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert!(t.windows(2).all(|w| ((w[1] - w[0]) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn plots_are_well_formed() {
        let xs = [0.0, 0.5, 1.0];
        let ys = [1.0, -2.0, 0.5];
        let p = Plot { title: "a<b", x_label: "τ", y_label: "rate", note: "hash --x" };
        let svg = lines(&p, &[Series { name: "S", xs: &xs, ys: &ys, err: Some(&[0.1, 0.1, 0.1]) }]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b") && svg.contains("<!-- hash - -x -->"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        let flat = lines(&p, &[Series { name: "zero", xs: &xs, ys: &[0.0; 3], err: None }]);
        assert!(!flat.contains("NaN"));
        let sc = scatter(&p, &[Series { name: "g", xs: &xs, ys: &ys, err: None }]);
        assert_eq!(sc.matches("<circle").count(), 3);
    }
}
