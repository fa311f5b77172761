//! Results table: one CSV row per measured configuration.
//!
//! Columns, in order: `run_id, scheme, attack, dataset, ssim, accuracy`.
//! Empty `ssim`/`accuracy` cells mean "not measured". Rows are only ever
//! appended; a `run_id` already present in the file gets a `-2`, `-3`, …
//! suffix.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESULT_COLUMNS: [&str; 6] = ["run_id", "scheme", "attack", "dataset", "ssim", "accuracy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub scheme: String,
    pub attack: String,
    pub dataset: String,
    pub ssim: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != RESULT_COLUMNS {
        return Err(Error::Invalid(format!(
            "{}: unexpected results header {header:?}",
            path.display()
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Appends `rows`, returning them as written (after id de-duplication).
pub fn append_results(path: &Path, rows: &[ResultRow]) -> Result<Vec<ResultRow>> {
    let existing = read_results(path)?;
    let mut ids: HashSet<String> = existing.into_iter().map(|r| r.run_id).collect();
    let fresh = !path.is_file();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let mut written = Vec::with_capacity(rows.len());
    for row in rows {
        let mut row = row.clone();
        if ids.contains(&row.run_id) {
            let base = row.run_id.clone();
            let mut k = 2;
            while ids.contains(&format!("{base}-{k}")) {
                k += 1;
            }
            row.run_id = format!("{base}-{k}");
        }
        ids.insert(row.run_id.clone());
        w.serialize(&row)?;
        written.push(row);
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(written)
}
