//! CSV and SVG emitters for experiment reports. The SVG output is
//! self-contained line plots and heatmaps with fixed layout; nothing here
//! depends on experiment semantics.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

/// Writes a CSV file with a header row; every row must match the header
/// width.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        assert_eq!(row.len(), header.len(), "csv row width mismatch");
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0; // margins: left, right, top, bottom
const MR: f64 = 20.0;
const MT: f64 = 36.0;
const MB: f64 = 56.0;

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Multi-series line plot with markers, axes, ticks, and a legend.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if !x0.is_finite() || x0 == x1 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if !y0.is_finite() || y0 == y1 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = (y1 - y0) * 0.05;
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        (ML + W - MR) / 2.0
    );
    for t in ticks(x0, x1, 6) {
        let x = sx(t);
        let _ = write!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            MT,
            H - MB,
            H - MB + 16.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1, 6) {
        let y = sy(t);
        let _ = write!(
            svg,
            "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            W - MR,
            ML - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = write!(
        svg,
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xlabel}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{ylabel}</text>\n",
        W - ML - MR,
        H - MT - MB,
        (ML + W - MR) / 2.0,
        H - 12.0,
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            s.points.iter().map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        );
        for (x, y) in &s.points {
            let _ = write!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\"/>\n",
                sx(*x),
                sy(*y)
            );
        }
        let ly = MT + 14.0 + 16.0 * i as f64;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            ML + 8.0,
            ML + 28.0,
            ML + 34.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Blue-white-red diverging ramp over [lo, hi].
fn color_ramp(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let u = t * 2.0;
        (
            (33.0 + u * (247.0 - 33.0)) as u8,
            (102.0 + u * (247.0 - 102.0)) as u8,
            (172.0 + u * (247.0 - 172.0)) as u8,
        )
    } else {
        let u = (t - 0.5) * 2.0;
        (
            (247.0 + u * (178.0 - 247.0)) as u8,
            (247.0 + u * (24.0 - 247.0)) as u8,
            (247.0 + u * (43.0 - 247.0)) as u8,
        )
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of `values[i][j]` where i indexes y (bottom to top) and j indexes
/// x (left to right), with axis extents and a vertical color bar.
pub fn heatmap(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    values: &[Vec<f64>],
    x_extent: (f64, f64),
    y_extent: (f64, f64),
) -> String {
    let rows = values.len();
    let cols = values.first().map(|r| r.len()).unwrap_or(0);
    let flat: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let lo = flat.iter().copied().fold(f64::MAX, f64::min);
    let hi = flat.iter().copied().fold(f64::MIN, f64::max);
    let plot_w = W - ML - MR - 50.0;
    let plot_h = H - MT - MB;
    let cw = plot_w / cols.max(1) as f64;
    let ch = plot_h / rows.max(1) as f64;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        ML + plot_w / 2.0
    );
    for (i, row) in values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let x = ML + j as f64 * cw;
            let y = H - MB - (i + 1) as f64 * ch;
            let _ = write!(
                svg,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>\n",
                cw + 0.5,
                ch + 0.5,
                color_ramp(*v, lo, hi)
            );
        }
    }
    for (frac, v) in [(0.0, x_extent.0), (0.5, (x_extent.0 + x_extent.1) / 2.0), (1.0, x_extent.1)] {
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            ML + frac * plot_w,
            H - MB + 16.0,
            fmt_tick(v)
        );
    }
    for (frac, v) in [(0.0, y_extent.0), (0.5, (y_extent.0 + y_extent.1) / 2.0), (1.0, y_extent.1)] {
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ML - 6.0,
            H - MB - frac * plot_h + 4.0,
            fmt_tick(v)
        );
    }
    let _ = write!(
        svg,
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{plot_w:.1}\" height=\"{plot_h:.1}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xlabel}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{ylabel}</text>\n",
        ML + plot_w / 2.0,
        H - 12.0,
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    );
    // color bar
    let bx = ML + plot_w + 14.0;
    for i in 0..60 {
        let t = i as f64 / 59.0;
        let y = H - MB - (i + 1) as f64 * plot_h / 60.0;
        let _ = write!(
            svg,
            "<rect x=\"{bx:.1}\" y=\"{y:.2}\" width=\"14\" height=\"{:.2}\" fill=\"{}\"/>\n",
            plot_h / 60.0 + 0.5,
            color_ramp(lo + t * (hi - lo), lo, hi)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n</svg>\n",
        bx + 18.0,
        H - MB + 4.0,
        fmt_tick(lo),
        bx + 18.0,
        MT + 10.0,
        fmt_tick(hi)
    );
    svg
}
