// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hand-emitted SVG figures. Coordinates are printed with fixed precision
//! so identical inputs give identical bytes.

use std::fmt::Write as _;

use crate::harness::experiments::SweepResult;
use crate::harness::records::SourceCategory;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

/// Round-number tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            out,
            r#"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            r - l,
            b - t
        );
        for x in ticks(self.x0, self.x1) {
            let px = self.px(x);
            let _ = writeln!(
                out,
                r#"<line x1="{px:.2}" y1="{b:.1}" x2="{px:.2}" y2="{:.1}" stroke="black"/>"#,
                b + 5.0
            );
            let _ = writeln!(
                out,
                r#"<text x="{px:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
                b + 18.0,
                fmt_tick(x)
            );
        }
        for y in ticks(self.y0, self.y1) {
            let py = self.py(y);
            let _ = writeln!(
                out,
                r##"<line x1="{l:.1}" y1="{py:.2}" x2="{r:.1}" y2="{py:.2}" stroke="#dddddd"/>"##
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#,
                l - 6.0,
                py + 4.0,
                fmt_tick(y)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (l + r) / 2.0,
            H - 12.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(y_label)
        );
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Line chart, one polyline per named series of `(x, y)` points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut xlo, mut xhi, mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for &(x, y) in pts {
        xlo = xlo.min(x);
        xhi = xhi.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    if !xlo.is_finite() {
        (xlo, xhi) = (0.0, 1.0);
    }
    let (x0, x1) = padded(xlo, xhi);
    let (y0, y1) = padded(ylo, yhi);
    let f = Frame { x0, x1, y0, y1 };
    let mut out = String::new();
    header(&mut out, title, W, H);
    f.axes(&mut out, x_label, y_label);
    let zero = f.py(0.0);
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT:.1}" y1="{zero:.2}" x2="{:.1}" y2="{zero:.2}" stroke="#888888" stroke-dasharray="4 3"/>"##,
        W - RIGHT
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                f.px(x),
                f.py(y)
            );
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = W - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn curve_points(sweep: &SweepResult, category: SourceCategory) -> Vec<(f64, f64)> {
    sweep
        .points
        .iter()
        .filter(|p| p.category == category)
        .filter_map(|p| p.mean_change_pct.map(|m| (p.relative_depth, m)))
        .collect()
}

/// One series per category: mean relative change against the relative
/// depth of the window's first layer.
pub fn sweep_chart(title: &str, sweep: &SweepResult) -> String {
    let series: Vec<_> = sweep
        .categories()
        .into_iter()
        .map(|c| (c.name().to_string(), curve_points(sweep, c)))
        .collect();
    line_chart(
        title,
        "relative depth of first layer",
        "change in answer probability (%)",
        &series,
    )
}

/// One series per sweep (for example per feature scope) for one category.
pub fn scope_chart(title: &str, sweeps: &[SweepResult], category: SourceCategory) -> String {
    let series: Vec<_> = sweeps
        .iter()
        .map(|s| (s.scope.clone(), curve_points(s, category)))
        .collect();
    line_chart(
        title,
        "relative depth of first layer",
        "change in answer probability (%)",
        &series,
    )
}

/// Probability scatter on the unit square with a `y = x` reference line.
pub fn scatter_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let f = Frame {
        x0: 0.0,
        x1: 1.0,
        y0: 0.0,
        y1: 1.0,
    };
    let mut out = String::new();
    header(&mut out, title, W, H);
    f.axes(&mut out, x_label, y_label);
    let _ = writeln!(
        out,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888888" stroke-dasharray="4 3" class="reference"/>"##,
        f.px(0.0),
        f.py(0.0),
        f.px(1.0),
        f.py(1.0)
    );
    for &(x, y) in points {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.6"/>"#,
            f.px(x),
            f.py(y),
            PALETTE[0]
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Diverging heatmap: blue below zero, red above, white at zero.
pub fn heatmap_chart(
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<f64>],
    x_label: &str,
) -> String {
    let cell = 36.0;
    let left = 150.0;
    let top = 50.0;
    let width = left + cell * col_labels.len() as f64 + 110.0;
    let height = top + cell * row_labels.len() as f64 + 60.0;
    let scale = values
        .iter()
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut out = String::new();
    header(&mut out, title, width, height);
    for (r, (label, row)) in row_labels.iter().zip(values).enumerate() {
        let y = top + cell * r as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 8.0,
            y + cell / 2.0 + 4.0,
            escape(label)
        );
        for (c, &v) in row.iter().enumerate() {
            let t = if v.is_finite() {
                (v / scale).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
            let (red, green, blue) = if t < 0.0 {
                (fade(t), fade(t), 255)
            } else {
                (255, fade(t), fade(t))
            };
            let _ = writeln!(
                out,
                r##"<rect x="{:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="#{red:02x}{green:02x}{blue:02x}" stroke="white"><title>{:.3}</title></rect>"##,
                left + cell * c as f64,
                v
            );
        }
    }
    let base = top + cell * row_labels.len() as f64;
    for (c, label) in col_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + cell * (c as f64 + 0.5),
            base + 16.0,
            escape(label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + cell * col_labels.len() as f64 / 2.0,
        base + 40.0,
        escape(x_label)
    );
    let lx = left + cell * col_labels.len() as f64 + 20.0;
    let _ = writeln!(
        out,
        r#"<text x="{lx:.1}" y="{:.1}">+{}%</text>"#,
        top + 10.0,
        fmt_tick(scale)
    );
    let _ = writeln!(
        out,
        r#"<text x="{lx:.1}" y="{:.1}">-{}%</text>"#,
        top + 28.0,
        fmt_tick(scale)
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_values_are_round() {
        assert_eq!(ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(fmt_tick(0.6000000000000001), "0.6");
        assert_eq!(ticks(-50.0, 10.0), vec![-50.0, -40.0, -30.0, -20.0, -10.0, 0.0, 10.0]);
    }

    #[test]
    fn line_chart_is_deterministic_and_labelled() {
        let s = vec![
            ("subject".to_string(), vec![(0.0, -10.0), (0.25, -30.0)]),
            ("first".to_string(), vec![(0.0, 0.0), (0.25, 1.0)]),
        ];
        let a = line_chart("t", "relative depth", "change (%)", &s);
        assert_eq!(a, line_chart("t", "relative depth", "change (%)", &s));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.contains(">subject<") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn scatter_has_reference_diagonal() {
        let s = scatter_chart("s", "p_base", "p_ko", &[(0.5, 0.5)]);
        assert!(s.contains(r#"class="reference""#));
        // the point on y = x lies on the reference line's endpoints' segment
        assert!(s.contains(r#"x1="70.00" y1="345.00" x2="490.00" y2="40.00""#));
    }

    #[test]
    fn heatmap_rows_carry_labels() {
        let h = heatmap_chart(
            "h",
            &["where".into(), "<q>".into()],
            &["0".into()],
            &[vec![-5.0], vec![2.0]],
            "first layer",
        );
        assert!(h.contains(">where<") && h.contains(">&lt;q&gt;<"));
        assert!(h.contains("#0000ff"));
    }
}
