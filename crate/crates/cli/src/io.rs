//! File formats shared by the pipeline stages.
//!
//! Floats are written with 17 significant digits so every stage can re-read
//! what an earlier stage wrote without loss.

use std::path::Path;

use kmspc_core::propagation::{Band, ContributionBand, DeterministicChart, ChartKind, ProbabilisticChart};

use crate::error::{CliError, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| CliError::format(path, format!("'{s}' is not a number")))
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e.to_string()))?;
    w.write_record(header).map_err(|e| CliError::format(path, e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Header and rows of a comma-separated file; rows must match the header width.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::format(path, e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| CliError::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| CliError::format(path, e.to_string()))
        })
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

/// `name value` lines, one per log-parameter, plus optional extras.
pub fn write_theta(path: &Path, names: &[String], theta: &[f64], extras: &[(&str, f64)]) -> Result<()> {
    let mut text = String::new();
    for (n, v) in names.iter().zip(theta) {
        text.push_str(&format!("{n} {}\n", fmt_f64(*v)));
    }
    for (n, v) in extras {
        text.push_str(&format!("{n} {}\n", fmt_f64(*v)));
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Reads `name value` lines in file order.
pub fn read_theta(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(n), Some(v), None) => Ok((n.to_string(), parse_f64(path, v)?)),
                _ => Err(CliError::format(path, format!("expected 'name value', got '{l}'"))),
            }
        })
        .collect()
}

pub const CHART_HEADER: [&str; 8] = [
    "time",
    "mean",
    "median",
    "lower",
    "upper",
    "limit_mean",
    "limit_lower",
    "limit_upper",
];

/// One row of a chart file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartRow {
    pub time: f64,
    pub value: Band,
    pub limit: Band,
}

impl ChartRow {
    pub fn alarm(&self) -> bool {
        self.value.mean > self.limit.mean
    }
}

fn point(v: f64) -> Band {
    Band {
        mean: v,
        median: v,
        lower: v,
        upper: v,
    }
}

pub fn chart_rows_probabilistic(chart: &ProbabilisticChart, times: &[f64]) -> Vec<ChartRow> {
    chart
        .points
        .iter()
        .zip(times)
        .map(|(b, t)| ChartRow {
            time: *t,
            value: *b,
            limit: chart.limit,
        })
        .collect()
}

/// A deterministic chart as a zero-width band.
pub fn chart_rows_deterministic(chart: &DeterministicChart, kind: ChartKind, times: &[f64]) -> Vec<ChartRow> {
    let limit = point(chart.limit(kind));
    chart
        .series(kind)
        .iter()
        .zip(times)
        .map(|(v, t)| ChartRow {
            time: *t,
            value: point(*v),
            limit,
        })
        .collect()
}

pub fn write_chart(path: &Path, rows: &[ChartRow]) -> Result<()> {
    let header: Vec<String> = CHART_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(
        path,
        &header,
        rows.iter().map(|r| {
            [
                r.time,
                r.value.mean,
                r.value.median,
                r.value.lower,
                r.value.upper,
                r.limit.mean,
                r.limit.lower,
                r.limit.upper,
            ]
            .iter()
            .map(|v| fmt_f64(*v))
            .collect()
        }),
    )
}

pub fn read_chart(path: &Path) -> Result<Vec<ChartRow>> {
    let (header, rows) = read_csv(path)?;
    if header != CHART_HEADER {
        return Err(CliError::format(path, format!("unexpected chart header {header:?}")));
    }
    if rows.is_empty() {
        return Err(CliError::format(path, "chart has no rows"));
    }
    rows.iter()
        .map(|r| {
            let v: Vec<f64> = r.iter().map(|s| parse_f64(path, s)).collect::<Result<_>>()?;
            Ok(ChartRow {
                time: v[0],
                value: Band {
                    mean: v[1],
                    median: v[2],
                    lower: v[3],
                    upper: v[4],
                },
                limit: Band {
                    mean: v[5],
                    median: v[5],
                    lower: v[6],
                    upper: v[7],
                },
            })
        })
        .collect()
}

pub const CONTRIB_HEADER: [&str; 4] = ["variable", "mean", "lower", "upper"];

#[derive(Debug, Clone, PartialEq)]
pub struct ContribRow {
    pub variable: String,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn contrib_rows_band(band: &ContributionBand, names: &[String]) -> Vec<ContribRow> {
    band.variables
        .iter()
        .zip(names)
        .map(|(b, n)| ContribRow {
            variable: n.clone(),
            mean: b.mean,
            lower: b.lower,
            upper: b.upper,
        })
        .collect()
}

pub fn contrib_rows_values(values: &[f64], names: &[String]) -> Vec<ContribRow> {
    values
        .iter()
        .zip(names)
        .map(|(v, n)| ContribRow {
            variable: n.clone(),
            mean: *v,
            lower: *v,
            upper: *v,
        })
        .collect()
}

pub fn write_contrib(path: &Path, rows: &[ContribRow]) -> Result<()> {
    let header: Vec<String> = CONTRIB_HEADER.iter().map(|s| s.to_string()).collect();
    write_csv(
        path,
        &header,
        rows.iter()
            .map(|r| vec![r.variable.clone(), fmt_f64(r.mean), fmt_f64(r.lower), fmt_f64(r.upper)]),
    )
}

pub fn read_contrib(path: &Path) -> Result<Vec<ContribRow>> {
    let (header, rows) = read_csv(path)?;
    if header != CONTRIB_HEADER {
        return Err(CliError::format(path, format!("unexpected contribution header {header:?}")));
    }
    if rows.is_empty() {
        return Err(CliError::format(path, "contribution file has no rows"));
    }
    rows.iter()
        .map(|r| {
            Ok(ContribRow {
                variable: r[0].clone(),
                mean: parse_f64(path, &r[1])?,
                lower: parse_f64(path, &r[2])?,
                upper: parse_f64(path, &r[3])?,
            })
        })
        .collect()
}
