//! Delimited-text datasets: one row per time sample, one column per variable,
//! with optional `label` and `time` columns.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CliError, Result};
use crate::io::fmt_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    pub labels: Option<Vec<bool>>,
    pub time: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, names: Vec<String>) -> Self {
        Self {
            x,
            names,
            labels: None,
            time: None,
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Time index of sample `i`: the time column when present, else `i`.
    pub fn time_of(&self, i: usize) -> f64 {
        self.time.as_ref().map_or(i as f64, |t| t[i])
    }

    pub fn with_x(&self, x: DMatrix<f64>) -> Self {
        Self { x, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub delimiter: u8,
    pub label_column: String,
    pub time_column: String,
    /// Fail when the label column is missing.
    pub require_labels: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            delimiter: b',',
            label_column: "label".into(),
            time_column: "time".into(),
            require_labels: false,
        }
    }
}

/// Reads a dataset; errors name the 1-based data row and the column.
pub fn load_dataset(path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ingest(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(ingest(path, "missing header row"));
    }
    let label_idx = header.iter().position(|h| *h == opts.label_column);
    let time_idx = header.iter().position(|h| *h == opts.time_column);
    if opts.require_labels && label_idx.is_none() {
        return Err(ingest(path, format!("missing declared label column '{}'", opts.label_column)));
    }
    let var_idx: Vec<usize> = (0..header.len()).filter(|&i| Some(i) != label_idx && Some(i) != time_idx).collect();
    if var_idx.is_empty() {
        return Err(ingest(path, "no variable columns"));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut time = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| ingest(path, format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(ingest(
                path,
                format!("row {row} has {} fields, header has {}", record.len(), header.len()),
            ));
        }
        let cell = |i: usize| -> Result<f64> {
            let raw = &record[i];
            let v: f64 = raw.parse().map_err(|_| CliError::Cell {
                path: path.to_path_buf(),
                row,
                column: header[i].clone(),
                message: format!("'{raw}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(CliError::Cell {
                    path: path.to_path_buf(),
                    row,
                    column: header[i].clone(),
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        for &i in &var_idx {
            values.push(cell(i)?);
        }
        if let Some(i) = label_idx {
            let v = cell(i)?;
            if v != 0.0 && v != 1.0 {
                return Err(CliError::Cell {
                    path: path.to_path_buf(),
                    row,
                    column: header[i].clone(),
                    message: format!("label must be 0 or 1, got {v}"),
                });
            }
            labels.push(v == 1.0);
        }
        if let Some(i) = time_idx {
            time.push(cell(i)?);
        }
    }
    let n = values.len() / var_idx.len();
    if n == 0 {
        return Err(ingest(path, "no data rows"));
    }
    Ok(Dataset {
        x: DMatrix::from_row_slice(n, var_idx.len(), &values),
        names: var_idx.iter().map(|&i| header[i].clone()).collect(),
        labels: label_idx.map(|_| labels),
        time: time_idx.map(|_| time),
    })
}

fn ingest(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Ingest {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes a dataset in the format read by [`load_dataset`].
pub fn write_dataset(path: &Path, data: &Dataset, opts: &LoadOptions) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(opts.delimiter)
        .from_path(path)
        .map_err(|e| ingest(path, e.to_string()))?;
    let mut header = Vec::new();
    if data.time.is_some() {
        header.push(opts.time_column.clone());
    }
    header.extend(data.names.iter().cloned());
    if data.labels.is_some() {
        header.push(opts.label_column.clone());
    }
    w.write_record(&header).map_err(|e| ingest(path, e.to_string()))?;
    for i in 0..data.n() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(t) = &data.time {
            rec.push(fmt_f64(t[i]));
        }
        rec.extend(data.x.row(i).iter().map(|v| fmt_f64(*v)));
        if let Some(l) = &data.labels {
            rec.push(if l[i] { "1" } else { "0" }.to_string());
        }
        w.write_record(&rec).map_err(|e| ingest(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
