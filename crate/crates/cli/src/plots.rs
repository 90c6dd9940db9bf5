//! Minimal hand-rolled SVG charts for run reports.

use std::path::Path;

use triseg_core::{Error, Result};

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn axis_frame(title: &str) -> String {
    format!(
        "<rect x='{m}' y='{m}' width='{w}' height='{h}' fill='none' stroke='#444'/>\
         <text x='{cx}' y='24' text-anchor='middle' font-size='15'>{title}</text>",
        m = MARGIN,
        w = W - 2.0 * MARGIN,
        h = H - 2.0 * MARGIN,
        cx = W / 2.0
    )
}

/// Line chart of one series per run (e.g. total loss over iterations).
pub fn line_chart(title: &str, series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let mut body = axis_frame(title);
    let (mut x_max, mut y_max) = (1e-9f64, 1e-9f64);
    let mut y_min = f64::INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            x_max = x_max.max(x);
            y_max = y_max.max(y);
            y_min = y_min.min(y);
        }
    }
    if !y_min.is_finite() {
        y_min = 0.0;
    }
    y_min = y_min.min(0.0);
    let sx = (W - 2.0 * MARGIN) / x_max.max(1e-9);
    let sy = (H - 2.0 * MARGIN) / (y_max - y_min).max(1e-9);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let poly: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    MARGIN + x * sx,
                    H - MARGIN - (y - y_min) * sy
                )
            })
            .collect();
        body.push_str(&format!(
            "<polyline points='{}' fill='none' stroke='{color}' stroke-width='1.5'/>\
             <text x='{}' y='{}' font-size='12' fill='{color}'>{name}</text>",
            poly.join(" "),
            W - MARGIN + 4.0 - 110.0,
            MARGIN + 16.0 * (i as f64 + 1.0)
        ));
    }
    body.push_str(&format!(
        "<text x='{m}' y='{y}' font-size='11'>0</text>\
         <text x='{m}' y='{m2}' font-size='11'>{top:.3}</text>\
         <text x='{xr}' y='{y}' font-size='11' text-anchor='end'>{x_max:.0}</text>",
        m = MARGIN,
        m2 = MARGIN - 6.0,
        y = H - MARGIN + 16.0,
        top = y_max,
        xr = W - MARGIN
    ));
    write_svg(path, &body)
}

/// Grouped bar chart: one group per label, one bar per series.
pub fn bar_chart(
    title: &str,
    labels: &[String],
    series: &[(String, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    let mut body = axis_frame(title);
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(1e-9f64, f64::max)
        .max(1.0);
    let groups = labels.len().max(1) as f64;
    let group_w = (W - 2.0 * MARGIN) / groups;
    let bar_w = group_w / (series.len() as f64 + 1.0);
    let sy = (H - 2.0 * MARGIN) / y_max;
    for (gi, label) in labels.iter().enumerate() {
        for (si, (name, vals)) in series.iter().enumerate() {
            let v = vals.get(gi).copied().unwrap_or(0.0);
            let x = MARGIN + gi as f64 * group_w + (si as f64 + 0.5) * bar_w;
            let h = v * sy;
            let color = PALETTE[si % PALETTE.len()];
            body.push_str(&format!(
                "<rect x='{x:.1}' y='{:.1}' width='{bar_w:.1}' height='{h:.1}' fill='{color}'><title>{name}: {v:.4}</title></rect>",
                H - MARGIN - h
            ));
        }
        body.push_str(&format!(
            "<text x='{:.1}' y='{}' font-size='11' text-anchor='middle'>{label}</text>",
            MARGIN + (gi as f64 + 0.5) * group_w,
            H - MARGIN + 16.0
        ));
    }
    for (si, (name, _)) in series.iter().enumerate() {
        body.push_str(&format!(
            "<text x='{}' y='{}' font-size='12' fill='{}'>{name}</text>",
            W - MARGIN - 110.0,
            MARGIN + 16.0 * (si as f64 + 1.0),
            PALETTE[si % PALETTE.len()]
        ));
    }
    write_svg(path, &body)
}

fn write_svg(path: &Path, body: &str) -> Result<()> {
    let svg = format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{W}' height='{H}' viewBox='0 0 {W} {H}'>\
         <rect width='100%' height='100%' fill='white'/>{body}</svg>"
    );
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
