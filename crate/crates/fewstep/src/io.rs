//! Artifact I/O: schedule and config JSON, tabular CSV outputs.
//!
//! All floats go through the shortest round-trip formatting, so re-reading
//! an artifact reproduces the exact bit pattern and identical runs produce
//! byte-identical files.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::eval::EvalRow;
use crate::finetune::{HistoryRow, WeightRow};
use crate::schedule::Schedule;

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn save_schedule(s: &Schedule, path: &Path) -> Result<()> {
    save_json(s, path)
}

pub fn load_schedule(path: &Path) -> Result<Schedule> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_history_csv(rows: &[HistoryRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

pub fn write_weight_csv(rows: &[WeightRow], path: &Path) -> Result<()> {
    write_rows(rows, path)
}

/// One row per (sample, step) of a sampling run: the iterate and denoised
/// output coordinates are flattened into `x0..` / `d0..` columns.
pub fn write_trajectory_csv(
    rows: &[TrajectoryRow],
    dim: usize,
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seed".to_string(), "step".to_string(), "sigma".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    header.extend((0..dim).map(|j| format!("d{j}")));
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.seed.to_string(), row.step.to_string(), row.sigma.to_string()];
        rec.extend(row.x.iter().map(f64::to_string));
        rec.extend(row.d.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrajectoryRow {
    pub seed: u64,
    pub step: usize,
    pub sigma: f64,
    pub x: Vec<f64>,
    pub d: Vec<f64>,
}

/// Plain data batch, one sample per row.
pub fn write_data_csv(batch: &[Vec<f64>], seed: u64, path: &Path) -> Result<()> {
    let dim = batch.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seed".to_string()];
    header.extend((0..dim).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for x in batch {
        let mut rec = vec![seed.to_string()];
        rec.extend(x.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
