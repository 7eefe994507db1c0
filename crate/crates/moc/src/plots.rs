//! SVG learning curves and visitation heatmaps, drawn from the CSV outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use moc_core::metrics::band;

use crate::aggregate::{scan, RunMetrics};
use crate::run::read_grid;

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e}")
}

/// Mean ± one sample std over seeds, per episode, for one metric.
fn draw_curves(path: &Path, title: &str, groups: &BTreeMap<String, Vec<&RunMetrics>>, metric: fn(&moc_core::metrics::MetricsRecord) -> f64) -> Result<()> {
    let mut series = Vec::new();
    let (mut x_max, mut y_min, mut y_max) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for (variant, runs) in groups {
        let curves: Vec<Vec<f64>> = runs.iter().map(|r| r.records.iter().map(metric).collect()).collect();
        let steps: Vec<f64> = runs[0].records.iter().map(|m| m.env_steps as f64).collect();
        let b = band(&curves);
        let pts: Vec<(f64, f64, f64)> = b.iter().zip(&steps).map(|(&(m, s), &x)| (x, m - s, m + s)).collect();
        for &(x, lo, hi) in &pts {
            x_max = x_max.max(x);
            y_min = y_min.min(lo);
            y_max = y_max.max(hi);
        }
        series.push((variant.clone(), pts, b));
    }
    if !y_min.is_finite() {
        return Ok(());
    }
    if y_max - y_min < 1e-9 {
        y_max += 0.5;
        y_min -= 0.5;
    }
    let root = SVGBackend::new(path, (900, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, y_min..y_max)
        .map_err(err)?;
    chart.configure_mesh().x_desc("environment steps").draw().map_err(err)?;
    for (i, (variant, pts, b)) in series.iter().enumerate() {
        let color = Palette99::pick(i);
        let upper = pts.iter().map(|p| (p.0, p.2));
        let lower = pts.iter().rev().map(|p| (p.0, p.1));
        chart
            .draw_series(std::iter::once(Polygon::new(upper.chain(lower).collect::<Vec<_>>(), color.mix(0.2))))
            .map_err(err)?;
        chart
            .draw_series(LineSeries::new(pts.iter().zip(b).map(|(p, m)| (p.0, m.0)), color.stroke_width(2)))
            .map_err(err)?
            .label(variant.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Learning curves per task: fractional success and episode reward.
pub fn learning_curves(outdir: &Path) -> Result<Vec<PathBuf>> {
    let (runs, _) = scan(outdir)?;
    let mut by_task: BTreeMap<String, BTreeMap<String, Vec<&RunMetrics>>> = BTreeMap::new();
    for r in &runs {
        by_task.entry(r.task.clone()).or_default().entry(r.variant.clone()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (task, groups) in &by_task {
        let p = outdir.join(format!("curves-{task}-success.svg"));
        draw_curves(&p, &format!("{task}: fractional success"), groups, |m| m.fractional_success)?;
        out.push(p);
        let p = outdir.join(format!("curves-{task}-reward.svg"));
        draw_curves(&p, &format!("{task}: mean episode reward"), groups, |m| m.mean_episode_reward)?;
        out.push(p);
    }
    Ok(out)
}

/// Heatmap of one visitation CSV.
pub fn heatmap(csv: &Path, svg: &Path, title: &str) -> Result<()> {
    let grid = read_grid(csv)?;
    let n = grid.len();
    if n == 0 {
        return Ok(());
    }
    let max = grid.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let root = SVGBackend::new(svg, (560, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(30)
        .build_cartesian_2d(0..n, 0..n)
        .map_err(err)?;
    chart.configure_mesh().disable_mesh().draw().map_err(err)?;
    chart
        .draw_series(grid.iter().enumerate().flat_map(|(r, row)| {
            row.iter().enumerate().map(move |(c, &v)| {
                // log scale keeps sparse visits visible
                let f = (1.0 + v as f64).ln() / (1.0 + max).ln();
                let color = HSLColor(0.66 - 0.66 * f, 0.9, 0.15 + 0.6 * f);
                Rectangle::new([(c, r), (c + 1, r + 1)], color.filled())
            })
        }))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Every plot for an output directory: curves plus per-run heatmaps.
pub fn emit_plots(outdir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = learning_curves(outdir)?;
    let (runs, _) = scan(outdir)?;
    for r in &runs {
        let dir = outdir.join(&r.variant).join(&r.seed);
        for phase in ["early", "late"] {
            let csv = dir.join(format!("visitation-{phase}.csv"));
            if csv.exists() {
                let svg = dir.join(format!("visitation-{phase}.svg"));
                heatmap(&csv, &svg, &format!("{} seed {}: {phase} visitation", r.variant, r.seed))?;
                out.push(svg);
            }
        }
    }
    Ok(out)
}
