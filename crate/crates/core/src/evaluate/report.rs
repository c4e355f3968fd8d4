//! CSV and TOML exports. Floats are written in their shortest round-trip
//! form, so rereading reproduces the exact values.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{AnomalyReport, Histogram, ScoreCurve, Thresholds, VolumeMetrics};
use crate::error::{Result, UbrError};

#[derive(Serialize, Deserialize)]
struct CurveRow {
    volume_id: String,
    slice_index: usize,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct AnomalyRow {
    volume_id: String,
    pearson_r: f64,
    flagged: bool,
    slope_sign: i8,
}

#[derive(Serialize)]
struct HistogramRow {
    class: u8,
    bin_low: f64,
    bin_high: f64,
    count: usize,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| UbrError::csv(path, e))?;
    // Written explicitly so empty files still carry the schema.
    w.write_record(header).map_err(|e| UbrError::csv(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| UbrError::csv(path, e))?;
    }
    w.flush().map_err(|e| UbrError::io(path, e))
}

fn read_rows<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| UbrError::csv(path, e))?;
    let found = r.headers().map_err(|e| UbrError::csv(path, e))?;
    if found.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(UbrError::format(path, format!("expected header `{}`", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(|e| UbrError::csv(path, e))).collect()
}

#[derive(Serialize)]
struct ClassRow<'a> {
    volume_id: &'a str,
    slice_index: usize,
    score: f64,
    class: u8,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    volume_id: &'a str,
    n_slices: usize,
    pearson_r: f64,
    spearman: f64,
    pairwise_accuracy: f64,
    r_squared: f64,
    mean_abs_second_difference: f64,
}

const CURVE_HEADER: [&str; 3] = ["volume_id", "slice_index", "score"];
const ANOMALY_HEADER: [&str; 4] = ["volume_id", "pearson_r", "flagged", "slope_sign"];
const HISTOGRAM_HEADER: [&str; 4] = ["class", "bin_low", "bin_high", "count"];
const CLASS_HEADER: [&str; 4] = ["volume_id", "slice_index", "score", "class"];
const METRICS_HEADER: [&str; 7] = [
    "volume_id",
    "n_slices",
    "pearson_r",
    "spearman",
    "pairwise_accuracy",
    "r_squared",
    "mean_abs_second_difference",
];

pub fn write_score_curves(path: &Path, curves: &[ScoreCurve]) -> Result<()> {
    let rows = curves.iter().flat_map(|c| {
        c.points().map(|(slice_index, score)| CurveRow {
            volume_id: c.volume_id.clone(),
            slice_index,
            score,
        })
    });
    write_rows(path, rows, &CURVE_HEADER)
}

/// Curves in file order; each volume's rows must be contiguous with slice
/// indices `0, 1, …`.
pub fn read_score_curves(path: &Path) -> Result<Vec<ScoreCurve>> {
    let mut grouped: Vec<(String, Vec<f64>)> = Vec::new();
    for row in read_rows::<CurveRow>(path, &CURVE_HEADER)? {
        let bad = |what: String| UbrError::format(path, format!("volume `{}` slice {}: {what}", row.volume_id, row.slice_index));
        match grouped.last_mut() {
            Some((id, scores)) if *id == row.volume_id => {
                if row.slice_index != scores.len() {
                    return Err(bad("slice indices must ascend from 0 without gaps".into()));
                }
                scores.push(row.score);
            }
            _ => {
                if grouped.iter().any(|(id, _)| *id == row.volume_id) {
                    return Err(bad("rows of this volume are not contiguous".into()));
                }
                if row.slice_index != 0 {
                    return Err(bad("slice indices must ascend from 0 without gaps".into()));
                }
                grouped.push((row.volume_id, vec![row.score]));
            }
        }
    }
    Ok(grouped.into_iter().map(|(id, s)| ScoreCurve::new(id, s)).collect())
}

pub fn write_anomaly_reports(path: &Path, reports: &[AnomalyReport]) -> Result<()> {
    let rows = reports.iter().map(|r| AnomalyRow {
        volume_id: r.volume_id.clone(),
        pearson_r: r.pearson_r,
        flagged: r.flagged,
        slope_sign: r.direction,
    });
    write_rows(path, rows, &ANOMALY_HEADER)
}

pub fn read_anomaly_reports(path: &Path, threshold_r: f64) -> Result<Vec<AnomalyReport>> {
    Ok(read_rows::<AnomalyRow>(path, &ANOMALY_HEADER)?
        .into_iter()
        .map(|r| AnomalyReport {
            volume_id: r.volume_id,
            pearson_r: r.pearson_r,
            threshold_r,
            flagged: r.flagged,
            direction: r.slope_sign,
        })
        .collect())
}

pub fn write_histogram(path: &Path, histogram: &Histogram) -> Result<()> {
    let rows = histogram.counts.iter().flat_map(|(&class, counts)| {
        counts.iter().enumerate().map(move |(i, &count)| {
            let (bin_low, bin_high) = histogram.bin_range(i);
            HistogramRow {
                class,
                bin_low,
                bin_high,
                count,
            }
        })
    });
    write_rows(path, rows, &HISTOGRAM_HEADER)
}

pub fn write_classifications(path: &Path, curves: &[ScoreCurve], thresholds: &Thresholds) -> Result<()> {
    let rows = curves.iter().flat_map(|c| {
        c.points().map(|(slice_index, score)| ClassRow {
            volume_id: &c.volume_id,
            slice_index,
            score,
            class: thresholds.classify(score),
        })
    });
    write_rows(path, rows, &CLASS_HEADER)
}

pub fn write_volume_metrics(path: &Path, metrics: &[VolumeMetrics]) -> Result<()> {
    let rows = metrics.iter().map(|m| MetricsRow {
        volume_id: &m.volume_id,
        n_slices: m.n_slices,
        pearson_r: m.pearson_r,
        spearman: m.ordering.spearman,
        pairwise_accuracy: m.ordering.pairwise_accuracy,
        r_squared: m.ordering.r_squared,
        mean_abs_second_difference: m.mean_abs_second_difference,
    });
    write_rows(path, rows, &METRICS_HEADER)
}

pub fn write_thresholds(path: &Path, thresholds: &Thresholds) -> Result<()> {
    let text = toml::to_string(thresholds).expect("serialisable thresholds");
    fs::write(path, text).map_err(|e| UbrError::io(path, e))
}

pub fn read_thresholds(path: &Path) -> Result<Thresholds> {
    let text = fs::read_to_string(path).map_err(|e| UbrError::io(path, e))?;
    let t: Thresholds = toml::from_str(&text).map_err(|e| UbrError::format(path, e.to_string()))?;
    Thresholds::new(t.t1, t.t2).map_err(|e| UbrError::format(path, e.to_string()))
}
