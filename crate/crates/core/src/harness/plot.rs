use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{read_metrics, MetricsRow};
use crate::error::{Error, Result};

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 52.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;
const LEGEND_ROW: f64 = 16.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// One curve: mean success at each step, with min/max across seeds.
struct Series {
    label: String,
    points: Vec<(f64, f64, f64, f64)>,
    seeds: usize,
    mean_oracle: f64,
}

/// Writes an SVG with one panel per task. Each method (plus tag and transfer
/// marker) is a mean curve over seeds with a min/max band; the legend shows
/// the mean final oracle count in brackets.
pub fn emit_plots(files: &[PathBuf], output: &Path) -> Result<()> {
    if files.is_empty() {
        return Err(Error::Metrics("no metrics files to plot".into()));
    }
    // task -> series label -> seed runs
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<Vec<MetricsRow>>>> = BTreeMap::new();
    for f in files {
        let rows = read_metrics(f)?;
        let first = &rows[0];
        let mut label = first.method.clone();
        if !first.tag.is_empty() {
            label = format!("{label} {}", first.tag);
        }
        if first.adapter_source != "fresh" && first.adapter_source != "none" {
            label.push_str(" transfer");
        }
        grouped.entry(first.task.clone()).or_default().entry(label).or_default().push(rows);
    }

    let panels: Vec<(String, Vec<Series>)> = grouped
        .into_iter()
        .map(|(task, by_label)| (task, by_label.into_iter().map(|(label, runs)| summarise(label, &runs)).collect()))
        .collect();
    let max_legend = panels.iter().map(|(_, s)| s.len()).max().unwrap_or(0) as f64;
    let cols = panels.len().min(2);
    let rows = panels.len().div_ceil(cols);
    let cell_h = PANEL_H + max_legend * LEGEND_ROW + 10.0;
    let width = cols as f64 * PANEL_W;
    let height = rows as f64 * cell_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (task, series)) in panels.iter().enumerate() {
        let ox = (i % cols) as f64 * PANEL_W;
        let oy = (i / cols) as f64 * cell_h;
        draw_panel(&mut svg, ox, oy, task, series);
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(output, svg)?;
    Ok(())
}

fn summarise(label: String, runs: &[Vec<MetricsRow>]) -> Series {
    let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for r in run {
            by_step.entry(r.env_step).or_default().push(r.eval_success_rate);
        }
    }
    let points = by_step
        .into_iter()
        .map(|(step, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (step as f64, mean, lo, hi)
        })
        .collect();
    let mean_oracle = runs.iter().map(|r| r.last().map_or(0, |x| x.oracle_used) as f64).sum::<f64>() / runs.len() as f64;
    Series { label, points, seeds: runs.len(), mean_oracle }
}

fn draw_panel(svg: &mut String, ox: f64, oy: f64, task: &str, series: &[Series]) {
    let x0 = ox + MARGIN_L;
    let x1 = ox + PANEL_W - MARGIN_R;
    let y0 = oy + PANEL_H - MARGIN_B;
    let y1 = oy + MARGIN_T;
    let max_step = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).fold(1.0, f64::max);
    let sx = |step: f64| x0 + (x1 - x0) * step / max_step;
    let sy = |v: f64| y0 - (y0 - y1) * v;

    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#, (x0 + x1) / 2.0, oy + 18.0, escape(task));
    let _ = writeln!(svg, r##"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##, x1 - x0, y0 - y1);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(svg, r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y + 4.0);
        let step = max_step * v;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{step:.0}</text>"#, sx(step), y0 + 14.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">env step</text>"#, (x0 + x1) / 2.0, y0 + 30.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">success rate</text>"#,
        ox + 14.0,
        (y0 + y1) / 2.0,
        ox + 14.0,
        (y0 + y1) / 2.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if s.seeds > 1 {
            let mut poly = String::new();
            for p in &s.points {
                let _ = write!(poly, "{:.1},{:.1} ", sx(p.0), sy(p.3));
            }
            for p in s.points.iter().rev() {
                let _ = write!(poly, "{:.1},{:.1} ", sx(p.0), sy(p.2));
            }
            let _ = writeln!(svg, r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#, poly.trim_end());
        }
        let line: Vec<String> = s.points.iter().map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = oy + PANEL_H + i as f64 * LEGEND_ROW;
        let _ = writeln!(svg, r#"<line x1="{x0:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="3"/>"#, ly - 4.0, x0 + 18.0, ly - 4.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{ly:.1}">{} ({:.0})</text>"#, x0 + 24.0, escape(&s.label), s.mean_oracle);
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
