use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use super::metrics::MetricsRecord;
use crate::{Error, Result};

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Average travel time per iteration, one line per seed, as an SVG file.
pub fn plot_travel_time(records: &[MetricsRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("metrics records"));
    }
    let mut by_seed: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        by_seed.entry(r.seed).or_default().push((r.iteration as f64, r.avg_travel_time_s));
    }
    let x_max = records.iter().map(|r| r.iteration).max().unwrap_or(0) as f64 + 1.0;
    let y_max = records.iter().map(|r| r.avg_travel_time_s).fold(0.0, f64::max) * 1.1 + 1.0;

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("average travel time (s)")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, (seed, pts)) in by_seed.into_iter().enumerate() {
        let color = Palette99::pick(i);
        chart
            .draw_series(LineSeries::new(pts, &color))
            .map_err(|e| plot_err(path, e))?
            .label(format!("seed {seed}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], Palette99::pick(i)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
