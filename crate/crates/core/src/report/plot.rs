//! Static SVG figures: attack sweep curves, rate-metric scatter and training
//! curves.

use super::{ProbeReport, ReportError};
use plotters::prelude::*;
use std::collections::BTreeMap;
use std::path::Path;

const SIZE: (u32, u32) = (720, 480);
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(23, 190, 207),
];

fn plot_err(e: impl std::fmt::Display) -> ReportError {
    ReportError::Plot(e.to_string())
}

fn bounds(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// A named sequence of `(x, y)` points.
pub type Series = (String, Vec<(f64, f64)>);

/// Line chart with one legend entry per series.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    markers_only: bool,
) -> Result<(), ReportError> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let xs = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let ys = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let anno = if markers_only {
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
                .map_err(plot_err)?
        } else {
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)).point_size(3))
                .map_err(plot_err)?
        };
        anno.label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

type SweepSums = BTreeMap<u64, (f64, f64, f64, f64)>;

/// Mean PSNR and VMAF deltas against attack strength, one file per
/// quantity: `<stem>_psnr.svg` and `<stem>_vmaf.svg` in `dir`.
pub fn attack_sweep(dir: &Path, stem: &str, report: &ProbeReport) -> Result<Vec<std::path::PathBuf>, ReportError> {
    // attack -> strength bits -> (sum dpsnr, sum dneg, sum dplain, count)
    let mut acc: BTreeMap<String, SweepSums> = BTreeMap::new();
    for r in &report.rows {
        let e = acc.entry(r.attack.clone()).or_default().entry(r.strength.to_bits()).or_default();
        e.0 += r.delta_psnr;
        e.1 += r.delta_vmafneg_mean;
        e.2 += r.delta_vmaf_plain_mean;
        e.3 += 1.0;
    }
    let curve = |f: fn(&(f64, f64, f64, f64)) -> f64, m: &BTreeMap<u64, (f64, f64, f64, f64)>| -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = m.iter().map(|(k, t)| (f64::from_bits(*k), f(t) / t.3)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let psnr: Vec<Series> = acc.iter().map(|(a, m)| (a.clone(), curve(|t| t.0, m))).collect();
    let mut vmaf: Vec<Series> = Vec::new();
    for (a, m) in &acc {
        vmaf.push((format!("{a} NEG"), curve(|t| t.1, m)));
        vmaf.push((format!("{a} plain"), curve(|t| t.2, m)));
    }
    let p1 = dir.join(format!("{stem}_psnr.svg"));
    let p2 = dir.join(format!("{stem}_vmaf.svg"));
    line_chart(&p1, "PSNR change under attack", "strength", "mean delta PSNR (dB)", &psnr, false)?;
    line_chart(&p2, "VMAF change under attack", "strength", "mean delta VMAF", &vmaf, false)?;
    Ok(vec![p1, p2])
}
