//! Static SVG figures drawn from the aggregate and sweep tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

use super::config::Algorithm;
use super::experiment::SweepRow;
use super::output::{read_csv, AggregateRow};

const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

/// Metrics drawn as learning curves, with their file stem and axis label.
pub const CURVES: [(&str, &str); 5] = [
    ("reward_total", "MG overall reward ($/day)"),
    ("dsm_cost", "DSM cost ($/day)"),
    ("grid_import_kwh", "grid import (kWh/day)"),
    ("failed_transmissions", "failed transmissions / day"),
    ("belief_accuracy", "belief accuracy"),
];

struct Series {
    label: String,
    points: Vec<(f64, f64, f64, f64)>,
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Moving average over `w` points so that noisy per-episode curves stay
/// readable.
fn smooth(points: &[(f64, f64, f64, f64)], w: usize) -> Vec<(f64, f64, f64, f64)> {
    if w <= 1 {
        return points.to_vec();
    }
    points
        .chunks(w)
        .map(|c| {
            let n = c.len() as f64;
            let f = |g: fn(&(f64, f64, f64, f64)) -> f64| c.iter().map(g).sum::<f64>() / n;
            (f(|p| p.0), f(|p| p.1), f(|p| p.2), f(|p| p.3))
        })
        .collect()
}

fn draw(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let all: Vec<&(f64, f64, f64, f64)> = series.iter().flat_map(|s| &s.points).collect();
    if all.is_empty() {
        return Ok(());
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &&(x, _, lo, hi) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(lo);
        y1 = y1.max(hi);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let band: Vec<(f64, f64)> = s
            .points
            .iter()
            .map(|p| (p.0, p.3))
            .chain(s.points.iter().rev().map(|p| (p.0, p.2)))
            .collect();
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.2).filled())))
            .map_err(|e| plot_err(path, e))?;
        chart
            .draw_series(LineSeries::new(s.points.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

/// One learning-curve file per metric in [`CURVES`], one line per
/// algorithm present in `rows`. Returns the files written.
pub fn plot_aggregate(rows: &[AggregateRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (metric, label) in CURVES {
        let mut by_algo: BTreeMap<Algorithm, Vec<(f64, f64, f64, f64)>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.metric == metric) {
            by_algo.entry(r.algorithm).or_default().push((
                r.episode as f64,
                r.mean,
                r.ci_low.unwrap_or(r.mean),
                r.ci_high.unwrap_or(r.mean),
            ));
        }
        if by_algo.is_empty() {
            continue;
        }
        let series: Vec<Series> = by_algo
            .into_iter()
            .map(|(a, mut pts)| {
                pts.sort_by(|p, q| p.0.total_cmp(&q.0));
                let w = (pts.len() / 100).max(1);
                Series { label: a.to_string(), points: smooth(&pts, w) }
            })
            .collect();
        let path = out_dir.join(format!("{metric}.svg"));
        draw(&path, label, "episode", label, &series)?;
        written.push(path);
    }
    Ok(written)
}

pub fn plot_sweep(rows: &[SweepRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let Some(param) = rows.first().map(|r| r.param.clone()) else {
        return Ok(written);
    };
    for (metric, label) in CURVES {
        let mut pts: Vec<(f64, f64, f64, f64)> = rows
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.value, r.mean, r.ci_low.unwrap_or(r.mean), r.ci_high.unwrap_or(r.mean)))
            .collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by(|p, q| p.0.total_cmp(&q.0));
        let path = out_dir.join(format!("sweep_{metric}.svg"));
        let series = [Series { label: rows[0].algorithm.to_string(), points: pts }];
        draw(&path, &format!("{label} vs {param}"), &param, label, &series)?;
        written.push(path);
    }
    Ok(written)
}

/// Redraws the figures of one or more run directories into `out_dir`,
/// overlaying all algorithms found.
pub fn plot_dirs(dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut rows: Vec<AggregateRow> = Vec::new();
    let mut sweep: Vec<SweepRow> = Vec::new();
    for d in dirs {
        let agg = d.join("aggregate.csv");
        if agg.exists() {
            rows.extend(read_csv::<AggregateRow>(&agg)?);
        }
        let sw = d.join("sweep.csv");
        if sw.exists() {
            sweep.extend(read_csv::<SweepRow>(&sw)?);
        }
    }
    if rows.is_empty() && sweep.is_empty() {
        return Err(Error::Precondition(format!("no aggregate.csv or sweep.csv under {dirs:?}")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = plot_aggregate(&rows, out_dir)?;
    written.extend(plot_sweep(&sweep, out_dir)?);
    Ok(written)
}
