//! Minimal SVG charts: line series for dynamics, scatter with IQR bands for
//! correlations.

use std::fmt::Write;

use super::QuantileBand;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn open(title: &str, x_label: &str, y_label: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = write!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = write!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(x_label)
    );
    let _ = write!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = H / 2.0
    );
    for (v, anchor_x, anchor_y) in [
        (f.x0, f.px(f.x0), H - PAD + 16.0),
        (f.x1, f.px(f.x1), H - PAD + 16.0),
    ] {
        let _ = write!(
            s,
            r#"<text x="{anchor_x}" y="{anchor_y}" text-anchor="middle">{}</text>"#,
            fmt_tick(v)
        );
    }
    for v in [f.y0, f.y1] {
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            PAD - 4.0,
            f.py(v) + 4.0,
            fmt_tick(v)
        );
    }
    s
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// One polyline per named series.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> String {
    let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter()));
    let mut s = open(title, x_label, y_label, &f);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = write!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of `points` with a mean line and shaded q25–q75 band per bin.
pub fn scatter_with_bands(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    bands: &[QuantileBand],
) -> String {
    let band_pts: Vec<(f64, f64)> = bands
        .iter()
        .flat_map(|b| [(b.center, b.q25), (b.center, b.q75)])
        .collect();
    let f = Frame::fit(points.iter().chain(&band_pts));
    let mut s = open(title, x_label, y_label, &f);
    if !bands.is_empty() {
        let upper: Vec<String> = bands
            .iter()
            .map(|b| format!("{:.2},{:.2}", f.px(b.center), f.py(b.q75)))
            .collect();
        let lower: Vec<String> = bands
            .iter()
            .rev()
            .map(|b| format!("{:.2},{:.2}", f.px(b.center), f.py(b.q25)))
            .collect();
        let _ = write!(
            s,
            r##"<polygon fill="#1f77b4" fill-opacity="0.2" points="{} {}"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
        let mean: Vec<String> = bands
            .iter()
            .map(|b| format!("{:.2},{:.2}", f.px(b.center), f.py(b.mean)))
            .collect();
        let _ = write!(
            s,
            r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
            mean.join(" ")
        );
    }
    for &(x, y) in points
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
    {
        let _ = write!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#d62728"/>"##,
            f.px(x),
            f.py(y)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let svg = line_chart(
            "loss",
            "step",
            "nats",
            &[("total", vec![(1.0, 3.0), (2.0, 2.0)])],
        );
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polyline"));
        let band = QuantileBand {
            center: 1.0,
            mean: 2.0,
            q25: 1.5,
            q75: 2.5,
            count: 2,
        };
        let svg = scatter_with_bands("r", "x", "y", &[(1.0, 2.0), (1.0, 2.0)], &[band]);
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
