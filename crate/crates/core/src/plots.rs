//! SVG figures for a verification report.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::verify::VerificationReport;

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

const PREDICTOR: RGBColor = RGBColor(31, 119, 180);
const CORRECTED: RGBColor = RGBColor(214, 39, 40);
const TRUTH: RGBColor = BLACK;
const ENS_MEAN: RGBColor = RGBColor(44, 160, 44);

/// PSD curves per variable on log-log axes, with a vertical marker at the cutoff wavenumber.
pub fn psd_plot(report: &VerificationReport, path: &Path) -> Result<()> {
    let n = report.psd.len().max(1);
    let root = SVGBackend::new(path, (420 * n as u32, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (area, curves) in root.split_evenly((1, n)).iter().zip(&report.psd) {
        let kmax = (curves.truth.len() - 1) as f64;
        let positive = |v: &Vec<f64>| v.iter().skip(1).copied().filter(|x| *x > 0.0).collect::<Vec<_>>();
        let all: Vec<f64> = [&curves.predictor, &curves.corrected, &curves.truth].into_iter().flat_map(positive).collect();
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min).max(1e-12);
        let hi = all.iter().copied().fold(0.0, f64::max).max(lo * 10.0);
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{} PSD", curves.variable), ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(55)
            .build_cartesian_2d((1f64..kmax).log_scale(), (lo..hi).log_scale())
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("wavenumber k")
            .y_desc("PSD")
            .draw()
            .map_err(plot_err)?;
        for (name, psd, color) in [
            ("predictor", &curves.predictor, PREDICTOR),
            ("corrected", &curves.corrected, CORRECTED),
            ("truth", &curves.truth, TRUTH),
        ] {
            let pts: Vec<(f64, f64)> = psd
                .iter()
                .enumerate()
                .skip(1)
                .filter(|(_, v)| **v > 0.0)
                .map(|(k, v)| (k as f64, *v))
                .collect();
            chart
                .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        let ks = curves.k_star as f64;
        chart
            .draw_series(LineSeries::new(vec![(ks, lo), (ks, hi)], BLACK.mix(0.4).stroke_width(1)))
            .map_err(plot_err)?
            .label(format!("k* = {}", curves.k_star))
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], BLACK.mix(0.4)));
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// FSS against neighbourhood size, one panel per threshold.
pub fn fss_plot(report: &VerificationReport, path: &Path) -> Result<()> {
    let mut thresholds: Vec<f64> = Vec::new();
    for e in &report.fss {
        if !thresholds.contains(&e.threshold) {
            thresholds.push(e.threshold);
        }
    }
    let n = thresholds.len().max(1);
    let root = SVGBackend::new(path, (380 * n as u32, 340)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (area, &thr) in root.split_evenly((1, n)).iter().zip(&thresholds) {
        let rows: Vec<_> = report.fss.iter().filter(|e| e.threshold == thr).collect();
        let smax = rows.iter().map(|e| e.scale).max().unwrap_or(1) as f64;
        let label = match rows[0].percentile {
            Some(p) => format!("{} >= {thr:.3} (p{p})", report.fss_variable),
            None => format!("{} >= {thr:.3}", report.fss_variable),
        };
        let mut chart = ChartBuilder::on(area)
            .caption(label, ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(0f64..smax + 1.0, 0f64..1.0)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("neighbourhood size (grid units)")
            .y_desc("FSS")
            .draw()
            .map_err(plot_err)?;
        type Pick = fn(&crate::verify::FssEntry) -> f64;
        let series: [(&str, Pick, RGBColor); 3] = [
            ("predictor", |e| e.predictor, PREDICTOR),
            ("PMM", |e| e.pmm, CORRECTED),
            ("ensemble mean", |e| e.ensemble_mean, ENS_MEAN),
        ];
        for (name, pick, color) in series {
            let pts: Vec<(f64, f64)> = rows.iter().map(|e| (e.scale as f64, pick(e))).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Predictor and ensemble-mean RMSE bars, one panel per variable.
pub fn rmse_plot(report: &VerificationReport, path: &Path) -> Result<()> {
    let n = report.rmse.len().max(1);
    let root = SVGBackend::new(path, (260 * n as u32, 320)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (area, e) in root.split_evenly((1, n)).iter().zip(&report.rmse) {
        let top = e.predictor.max(e.ensemble_mean).max(1e-12) * 1.2;
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{} RMSE [{}]", e.variable, e.units), ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..2.0, 0f64..top)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(0)
            .draw()
            .map_err(plot_err)?;
        for (i, (v, color)) in [(e.predictor, PREDICTOR), (e.ensemble_mean, CORRECTED)].into_iter().enumerate() {
            let x0 = i as f64 + 0.15;
            chart
                .draw_series(std::iter::once(Rectangle::new([(x0, 0.0), (x0 + 0.7, v)], color.filled())))
                .map_err(plot_err)?
                .label(if i == 0 { "predictor" } else { "ensemble mean" })
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Writes `psd.svg`, `fss.svg` and `rmse.svg` into `dir` and returns their paths.
pub fn write_plots(report: &VerificationReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let paths = [dir.join("psd.svg"), dir.join("fss.svg"), dir.join("rmse.svg")];
    psd_plot(report, &paths[0])?;
    fss_plot(report, &paths[1])?;
    rmse_plot(report, &paths[2])?;
    Ok(paths.to_vec())
}
