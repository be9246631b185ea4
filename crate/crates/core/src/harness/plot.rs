//! Minimal SVG charts for reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const M: f64 = 56.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        M + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * M)
    }

    fn py(&self, y: f64) -> f64 {
        H - M - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * M)
    }
}

fn header(title: &str, x_label: &str, y_label: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    for k in 0..=4 {
        let y = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            M - 6.0,
            f.py(y) + 4.0,
            y
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        esc(y_label)
    );
    s
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot colored by label.
pub fn scatter_svg(points: &[[f64; 2]], labels: &[i64], title: &str) -> String {
    let f = Frame::new(points.iter().map(|p| p[0]), points.iter().map(|p| p[1]));
    let mut s = header(title, "dim 1", "dim 2", &f);
    for (p, &l) in points.iter().zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            f.px(p[0]),
            f.py(p[1]),
            color(l.max(0) as usize)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One series of `(x, mean, std)` points.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

/// Line chart with ±std error bars; x positions are categorical.
pub fn errorbar_svg(series: &[Series], x_ticks: &[String], title: &str, x_label: &str, y_label: &str) -> String {
    let ys = series.iter().flat_map(|s| s.points.iter().flat_map(|&(_, m, d)| [m - d, m + d]));
    let n = x_ticks.len().max(1) as f64;
    let f = Frame::new([-0.5, n - 0.5].into_iter(), ys);
    let mut s = header(title, x_label, y_label, &f);
    for (i, t) in x_ticks.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            f.px(i as f64),
            H - M + 16.0,
            esc(t)
        );
    }
    for (k, ser) in series.iter().enumerate() {
        let c = color(k);
        let path: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, m, _)| format!("{:.2},{:.2}", f.px(x), f.py(m)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, path.join(" "));
        for &(x, m, d) in &ser.points {
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{c}"/><circle cx="{x:.2}" cy="{:.2}" r="3.5" fill="{c}"/>"#,
                f.py(m - d),
                f.py(m + d),
                f.py(m),
                x = f.px(x)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - M - 110.0,
            M + 16.0 * k as f64,
            esc(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart of `(label, mean, std)`.
pub fn bar_svg(rows: &[(String, f64, f64)], title: &str, y_label: &str) -> String {
    let n = rows.len().max(1) as f64;
    let ys = rows.iter().flat_map(|&(_, m, d)| [m - d, m + d]);
    let f = Frame::new([-0.5, n - 0.5].into_iter(), ys);
    let mut s = header(title, "", y_label, &f);
    let bw = (W - 2.0 * M) / n * 0.6;
    for (i, (name, m, d)) in rows.iter().enumerate() {
        let x = f.px(i as f64);
        let top = f.py(*m);
        let base = H - M;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{top:.2}" width="{bw:.2}" height="{:.2}" fill="{}"/>"#,
            x - bw / 2.0,
            (base - top).max(0.0),
            color(i)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            f.py(m - d),
            f.py(m + d)
        );
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, H - M + 16.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let sc = scatter_svg(&[[0.0, 1.0], [2.0, -1.0]], &[0, 1], "a < b");
        assert!(sc.starts_with("<svg") && sc.trim_end().ends_with("</svg>"));
        assert_eq!(sc.matches("<circle").count(), 2);
        assert!(sc.contains("a &lt; b"));
        let eb = errorbar_svg(
            &[Series {
                name: "star".into(),
                points: vec![(0.0, 0.9, 0.01), (1.0, 0.92, 0.02)],
            }],
            &["1".into(), "10".into()],
            "t",
            "spc",
            "acc",
        );
        assert_eq!(eb.matches("<polyline").count(), 1);
        let b = bar_svg(&[("base".into(), 0.8, 0.0)], "t", "acc");
        assert!(b.contains("<rect x="));
    }
}
