use std::path::Path;

use anyhow::{anyhow, Result};
use dad4ts_core::pipeline::SampleDump;
use plotters::prelude::*;

const SIZE: (u32, u32) = (800, 500);
const REAL: RGBColor = RGBColor(40, 40, 40);
const GENERATED: RGBColor = RGBColor(230, 140, 30);
const SELECTED: RGBColor = RGBColor(30, 150, 60);
const OVERLAY_LIMIT: usize = 16;

fn err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("plot failed: {e}")
}

fn selected_label(n: usize) -> String {
    if n == 0 {
        "selected: none (0 samples)".to_string()
    } else {
        format!("selected ({n})")
    }
}

/// Green shade whose strength follows the selection probability.
fn prob_shade(p: f64) -> RGBAColor {
    SELECTED.mix(0.25 + 0.75 * p.clamp(0.0, 1.0))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Gaussian kernel density on `grid` with Silverman's bandwidth.
pub fn gaussian_kde(values: &[f64], grid: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return vec![0.0; grid.len()];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let h = (1.06 * sd * n.powf(-0.2)).max(1e-3);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.iter()
        .map(|&x| norm * values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>())
        .collect()
}

fn selected_rows(dump: &SampleDump) -> Vec<usize> {
    dump.selected.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i).collect()
}

pub fn kde(dump: &SampleDump, out: &Path) -> Result<()> {
    let real: Vec<f64> = dump.real.iter().flatten().copied().collect();
    let generated: Vec<f64> = dump.generated.iter().flatten().copied().collect();
    let sel = selected_rows(dump);
    let selected: Vec<f64> = sel.iter().flat_map(|&i| dump.generated[i].iter().copied()).collect();
    let (lo, hi) = bounds(real.iter().chain(&generated).copied());
    let grid: Vec<f64> = (0..200).map(|i| lo + (hi - lo) * i as f64 / 199.0).collect();
    let curves = [
        (gaussian_kde(&real, &grid), REAL.to_rgba(), format!("real ({})", dump.real.len())),
        (gaussian_kde(&generated, &grid), GENERATED.to_rgba(), format!("generated ({})", dump.generated.len())),
        (gaussian_kde(&selected, &grid), SELECTED.to_rgba(), selected_label(sel.len())),
    ];
    let top = curves.iter().flat_map(|c| c.0.iter().copied()).fold(0.0, f64::max).max(1e-6) * 1.05;

    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Value density", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(lo..hi, 0.0..top)
        .map_err(err)?;
    chart.configure_mesh().x_desc("normalized value").y_desc("density").draw().map_err(err)?;
    for (density, color, label) in curves {
        let points: Vec<(f64, f64)> = if label.contains("none") {
            Vec::new()
        } else {
            grid.iter().copied().zip(density).collect()
        };
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.9)).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)
}

pub fn pca_scatter(dump: &SampleDump, out: &Path) -> Result<()> {
    let all = dump.real_z.iter().chain(&dump.generated_z);
    let (x0, x1) = bounds(all.clone().map(|z| z[0]));
    let (y0, y1) = bounds(all.map(|z| z[1]));
    let sel = selected_rows(dump);

    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Principal-component projection", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart.configure_mesh().x_desc("z1").y_desc("z2").draw().map_err(err)?;
    chart
        .draw_series(dump.real_z.iter().map(|z| Circle::new((z[0], z[1]), 3, REAL.filled())))
        .map_err(err)?
        .label(format!("real ({})", dump.real_z.len()))
        .legend(|(x, y)| Circle::new((x + 8, y), 3, REAL.filled()));
    chart
        .draw_series(
            dump.generated_z
                .iter()
                .enumerate()
                .filter(|(i, _)| !dump.selected.get(*i).copied().unwrap_or(false))
                .map(|(_, z)| TriangleMarker::new((z[0], z[1]), 4, GENERATED.mix(0.7).filled())),
        )
        .map_err(err)?
        .label(format!("generated ({})", dump.generated_z.len()))
        .legend(|(x, y)| TriangleMarker::new((x + 8, y), 4, GENERATED.filled()));
    chart
        .draw_series(sel.iter().filter_map(|&i| {
            let z = dump.generated_z.get(i)?;
            let p = dump.probs.get(i).copied().unwrap_or(1.0);
            Some(TriangleMarker::new((z[0], z[1]), 5, prob_shade(p).filled()))
        }))
        .map_err(err)?
        .label(selected_label(sel.len()))
        .legend(|(x, y)| TriangleMarker::new((x + 8, y), 5, SELECTED.filled()));
    chart.configure_series_labels().background_style(WHITE.mix(0.9)).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)
}

pub fn series_overlay(dump: &SampleDump, out: &Path) -> Result<()> {
    let real = &dump.real[..dump.real.len().min(OVERLAY_LIMIT)];
    let n_gen = dump.generated.len().min(OVERLAY_LIMIT);
    let generated = &dump.generated[..n_gen];
    let len = real.iter().chain(generated).map(Vec::len).max().unwrap_or(1);
    let (lo, hi) = bounds(real.iter().chain(generated).flatten().copied());
    let sel = selected_rows(dump);

    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Real and generated windows", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..(len.max(2) - 1) as f64, lo..hi)
        .map_err(err)?;
    chart.configure_mesh().x_desc("step").y_desc("normalized value").draw().map_err(err)?;
    let line = |w: &Vec<f64>| w.iter().enumerate().map(|(t, v)| (t as f64, *v)).collect::<Vec<_>>();
    for (k, w) in real.iter().enumerate() {
        let s = chart.draw_series(LineSeries::new(line(w), REAL.mix(0.6).stroke_width(1))).map_err(err)?;
        if k == 0 {
            s.label(format!("real ({})", dump.real.len()))
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], REAL.stroke_width(2)));
        }
    }
    for (k, w) in generated.iter().enumerate() {
        let color = if dump.selected.get(k).copied().unwrap_or(false) {
            prob_shade(dump.probs.get(k).copied().unwrap_or(1.0))
        } else {
            GENERATED.mix(0.5)
        };
        let s = chart.draw_series(LineSeries::new(line(w), color.stroke_width(1))).map_err(err)?;
        if k == 0 {
            s.label(format!("generated ({})", dump.generated.len()))
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], GENERATED.stroke_width(2)));
        }
    }
    chart
        .draw_series(LineSeries::new(Vec::<(f64, f64)>::new(), SELECTED.stroke_width(2)))
        .map_err(err)?
        .label(selected_label(sel.len()))
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], SELECTED.stroke_width(2)));
    chart.configure_series_labels().background_style(WHITE.mix(0.9)).border_style(BLACK).draw().map_err(err)?;
    root.present().map_err(err)
}
