//! SVG figures: loss curves, latent scatter, estimation overlays.

use std::path::Path;

use plotters::prelude::*;

use crate::experiments::{EstimationReport, TrainHistory};

#[derive(Debug, thiserror::Error)]
#[error("plot: {0}")]
pub struct PlotError(String);

pub type Result<T> = std::result::Result<T, PlotError>;

fn err<E: std::fmt::Display>(e: E) -> PlotError {
    PlotError(e.to_string())
}

const SIZE: (u32, u32) = (800, 480);

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Per-batch E/G/D losses against batch index.
pub fn loss_curves(path: &Path, title: &str, hist: &TrainHistory) -> Result<()> {
    let series: Vec<(&str, &Vec<f64>, RGBColor)> = [
        ("E_loss", &hist.e_loss, RED),
        ("G_loss", &hist.g_loss, BLUE),
        ("D_loss", &hist.d_loss, GREEN),
    ]
    .into_iter()
    .filter(|s| !s.1.is_empty())
    .collect();
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.1.iter().copied()));
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..hist.len().max(1) as f64, lo..hi)
        .map_err(err)?;
    chart.configure_mesh().x_desc("batch").draw().map_err(err)?;
    for (name, values, color) in series {
        chart
            .draw_series(LineSeries::new(
                values.iter().enumerate().map(|(i, v)| (i as f64, *v)),
                color,
            ))
            .map_err(err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

/// Scatter of the first two latent dimensions over [-1, 1]^2 (a single
/// dimension is plotted against sample index).
pub fn latent_scatter(path: &Path, title: &str, samples: &[Vec<f64>]) -> Result<()> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .enumerate()
        .map(|(i, z)| match z.len() {
            0 => (0.0, 0.0),
            1 => (i as f64 / samples.len().max(1) as f64 * 2.0 - 1.0, z[0]),
            _ => (z[0], z[1]),
        })
        .collect();
    let (xl, xh) = bounds(pts.iter().map(|p| p.0).chain([-1.0, 1.0]));
    let (yl, yh) = bounds(pts.iter().map(|p| p.1).chain([-1.0, 1.0]));
    let root = SVGBackend::new(path, (560, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(xl..xh, yl..yh)
        .map_err(err)?;
    chart.configure_mesh().draw().map_err(err)?;
    chart
        .draw_series(pts.iter().map(|p| Circle::new(*p, 1, BLUE.filled())))
        .map_err(err)?;
    chart
        .draw_series(std::iter::once(PathElement::new(
            vec![(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0)],
            RED,
        )))
        .map_err(err)?;
    root.present().map_err(err)
}

/// True and estimated parameters along an evaluation trajectory.
pub fn estimation_overlay(path: &Path, title: &str, report: &EstimationReport, names: &[&str]) -> Result<()> {
    let k = report.truth.first().map_or(0, Vec::len);
    let root = SVGBackend::new(path, (SIZE.0, SIZE.1 * k.max(1) as u32 / 2 + 80)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (head, body) = root.split_vertically(40);
    head.titled(title, ("sans-serif", 20)).map_err(err)?;
    let x_max = report.steps.last().copied().unwrap_or(1).max(1) as f64;
    for (j, area) in body.split_evenly((k.max(1), 1)).iter().enumerate().take(k) {
        let (lo, hi) = bounds(
            report
                .truth
                .iter()
                .chain(&report.estimates)
                .map(|v| v[j]),
        );
        let mut chart = ChartBuilder::on(area)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..x_max, lo..hi)
            .map_err(err)?;
        let name = names.get(j).copied().unwrap_or("param");
        chart.configure_mesh().y_desc(name).draw().map_err(err)?;
        let line = |rows: &Vec<Vec<f64>>| -> Vec<(f64, f64)> {
            report.steps.iter().zip(rows).map(|(s, v)| (*s as f64, v[j])).collect()
        };
        chart.draw_series(LineSeries::new(line(&report.truth), BLACK)).map_err(err)?;
        chart.draw_series(LineSeries::new(line(&report.estimates), RED)).map_err(err)?;
    }
    root.present().map_err(err)
}
