//! CSV and image reports written by the evaluation commands.

use std::fs;
use std::path::Path;

use latentface_core::probe::{ClassificationReport, FoldReport};
use latentface_core::render::Map;
use serde::Serialize;

use crate::corpus::write_csv;
use crate::error::{Error, Result};
use crate::imageio;

#[derive(Serialize)]
struct MetricRow<'a> {
    metric: &'a str,
    value: f64,
}

/// `metrics.csv` with columns `metric,value`.
pub fn write_metrics(path: &Path, metrics: &[(&str, f64)]) -> Result<()> {
    let rows: Vec<MetricRow> = metrics.iter().map(|&(metric, value)| MetricRow { metric, value }).collect();
    write_csv(path, &rows)
}

#[derive(Serialize)]
struct FoldRow {
    fold: usize,
    accuracy: f64,
}

/// `folds.csv` with columns `fold,accuracy`, folds numbered from 1.
pub fn write_folds(path: &Path, report: &FoldReport) -> Result<()> {
    let rows: Vec<FoldRow> = report.accuracies.iter().enumerate().map(|(k, &accuracy)| FoldRow { fold: k + 1, accuracy }).collect();
    write_csv(path, &rows)
}

/// Raw counts, rows are actual classes and columns predicted ones.
pub fn write_confusion_csv(path: &Path, report: &ClassificationReport, names: &[String]) -> Result<()> {
    let mut text = String::from("actual");
    for n in names {
        text.push(',');
        text.push_str(n);
    }
    text.push('\n');
    for (n, row) in names.iter().zip(&report.confusion) {
        text.push_str(n);
        for c in row {
            text.push_str(&format!(",{c}"));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::io(path))
}

const CELL: usize = 24;

/// Row-normalized heat map, one `CELL`-pixel square per entry; darker is larger.
pub fn confusion_image(report: &ClassificationReport) -> Map<f32> {
    let k = report.confusion.len();
    let side = k * CELL;
    let mut data = vec![0.0f32; 3 * side * side];
    for (i, row) in report.confusion.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &c) in row.iter().enumerate() {
            let v = if total == 0 { 0.0 } else { c as f32 / total as f32 };
            let rgb = [1.0 - 0.9 * v, 1.0 - 0.6 * v, 1.0 - 0.2 * v];
            for y in i * CELL..(i + 1) * CELL {
                for x in j * CELL..(j + 1) * CELL {
                    let edge = y % CELL == 0 || x % CELL == 0;
                    for ch in 0..3 {
                        data[ch * side * side + y * side + x] = if edge { 0.5 } else { rgb[ch] };
                    }
                }
            }
        }
    }
    Map::new(3, side, side, data)
}

pub fn write_confusion_png(path: &Path, report: &ClassificationReport) -> Result<()> {
    imageio::write_png(path, &confusion_image(report))
}
