use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use engage_core::corpus::Corpus;
use engage_core::pairs::{bias_curve, BiasCurve};
use plotters::prelude::*;

/// Writes `bias_curve.csv` and `bias_curve.svg` into `dir`.
pub fn write_bias_report(corpus: &Corpus, dir: &Path) -> Result<Vec<PathBuf>> {
    if corpus.comments().is_empty() {
        bail!("corpus has no comments; nothing to report");
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let curve = bias_curve(corpus);
    let csv_path = dir.join("bias_curve.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    for b in &curve.buckets {
        w.serialize(b)?;
    }
    w.flush()?;
    let svg_path = dir.join("bias_curve.svg");
    plot(&curve, &svg_path).map_err(|e| anyhow!("rendering {}: {e}", svg_path.display()))?;
    Ok(vec![csv_path, svg_path])
}

fn plot(curve: &BiasCurve, path: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let first = curve.buckets.first().map_or(0, |b| b.day_offset);
    let last = curve.buckets.last().map_or(1, |b| b.day_offset).max(first + 1);
    let top = curve.buckets.iter().map(|b| b.mean_likes).fold(0.0, f64::max).max(1.0) * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean likes by comment delay", ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(first..last, 0.0..top)?;
    chart.configure_mesh().x_desc("days since video publication").y_desc("mean likes").draw()?;
    let points: Vec<(i64, f64)> = curve.buckets.iter().map(|b| (b.day_offset, b.mean_likes)).collect();
    chart.draw_series(LineSeries::new(points.iter().copied(), &BLUE))?;
    chart.draw_series(points.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))?;
    root.present()?;
    Ok(())
}
