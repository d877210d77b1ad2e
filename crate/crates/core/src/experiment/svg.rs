//! Minimal SVG line and bar charts.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str, ylo: f64, yhi: f64) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>
<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        W / 2.0,
        esc(title),
        H - BOTTOM,
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 18.0,
        esc(xlabel),
        TOP + (H - TOP - BOTTOM) / 2.0,
        TOP + (H - TOP - BOTTOM) / 2.0,
        esc(ylabel)
    );
    for i in 0..=4 {
        let v = ylo + (yhi - ylo) * i as f64 / 4.0;
        let y = H - BOTTOM - (H - TOP - BOTTOM) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
}

fn legend(out: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{}" y="{:.1}">{}</text>"#,
            W - RIGHT + 12.0,
            y - 10.0,
            COLORS[i % COLORS.len()],
            W - RIGHT + 30.0,
            y,
            esc(n)
        );
    }
}

/// One polyline per series over shared numeric axes.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (xlo, xhi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (ylo, yhi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let sx = |x: f64| LEFT + (x - xlo) / (xhi - xlo) * (W - LEFT - RIGHT);
    let sy = |y: f64| H - BOTTOM - (y - ylo) / (yhi - ylo) * (H - TOP - BOTTOM);
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel, ylo, yhi);
    for i in 0..=4 {
        let v = xlo + (xhi - xlo) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{v:.2}</text>"#,
            sx(v),
            H - BOTTOM + 16.0
        );
    }
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
    }
    legend(&mut out, &series.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bars; `groups[g] = (label, values per series)`. Negative values
/// extend below the zero line.
pub fn bar_chart(title: &str, ylabel: &str, series_names: &[String], groups: &[(String, Vec<f64>)]) -> String {
    let (mut ylo, mut yhi) = bounds(groups.iter().flat_map(|g| g.1.iter().copied()).chain([0.0]));
    ylo = ylo.min(0.0);
    yhi = yhi.max(0.0);
    let sy = |y: f64| H - BOTTOM - (y - ylo) / (yhi - ylo) * (H - TOP - BOTTOM);
    let mut out = String::new();
    frame(&mut out, title, "", ylabel, ylo, yhi);
    let slot = (W - LEFT - RIGHT) / groups.len().max(1) as f64;
    let bw = slot * 0.8 / series_names.len().max(1) as f64;
    let zero = sy(0.0);
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{zero:.1}" x2="{}" y2="{zero:.1}" stroke="gray"/>"#, W - RIGHT);
    for (g, (label, vals)) in groups.iter().enumerate() {
        let x0 = LEFT + slot * g as f64 + slot * 0.1;
        for (i, &v) in vals.iter().enumerate() {
            let y = sy(v);
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                x0 + bw * i as f64,
                y.min(zero),
                bw,
                (y - zero).abs(),
                COLORS[i % COLORS.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + slot * (g as f64 + 0.5),
            H - BOTTOM + 16.0,
            esc(label)
        );
    }
    legend(&mut out, series_names);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let l = line_chart("t", "x", "y", &[("a<b".into(), vec![(8.0, 0.5), (10.0, 0.7)])]);
        assert!(l.starts_with("<svg") && l.ends_with("</svg>\n"));
        assert!(l.contains("a&lt;b") && l.contains("<polyline"));
        let b = bar_chart("t", "slope", &["pre".into(), "post".into()], &[("CNN".into(), vec![-0.2, 0.1])]);
        assert_eq!(b.matches("<rect x=").count(), 2 + 2);
        let empty = line_chart("t", "x", "y", &[]);
        assert!(empty.contains("</svg>"));
    }
}
