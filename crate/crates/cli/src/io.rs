//! CSV input and output.
//!
//! Input files need a header row, `.` as decimal separator and no missing
//! cells. Row numbers in messages count data rows from 1 (the header is line 1
//! of the file, so data row `r` sits on line `r + 1`).

use std::fs::File;
use std::io::Write;
use std::path::Path;

use drlogit_core::simulate::Replicate;
use drlogit_core::Dataset;
use nalgebra::DMatrix;

use crate::CliError;

/// A numeric table with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Result<usize, CliError> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::invalid(format!(
                "column '{name}' not found (columns: {})",
                self.headers.join(", ")
            ))
        })
    }
}

fn parse_cell(raw: &str) -> Option<f64> {
    raw.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let file = File::open(path).map_err(|e| CliError::invalid(format!("cannot open {}: {e}", path.display())))?;
    parse_table(file, &path.display().to_string())
}

/// Parses CSV text from any reader; `source` names it in error messages.
pub fn parse_table(reader: impl std::io::Read, source: &str) -> Result<Table, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::invalid(format!("{source}: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(CliError::invalid(format!("{source}: missing header row")));
    }
    if headers.iter().all(|h| parse_cell(h).is_some()) {
        return Err(CliError::invalid(format!(
            "{source}: missing header row (first line is numeric)"
        )));
    }
    if let Some(j) = headers.iter().position(|h| h.is_empty()) {
        return Err(CliError::invalid(format!("{source}: column {} has an empty name", j + 1)));
    }
    for (j, h) in headers.iter().enumerate() {
        if headers[..j].contains(h) {
            return Err(CliError::invalid(format!("{source}: duplicate column name '{h}'")));
        }
    }

    let mut rows = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| CliError::invalid(format!("{source}: row {row}: {e}")))?;
        let values = record
            .iter()
            .zip(&headers)
            .map(|(cell, name)| {
                parse_cell(cell).ok_or_else(|| {
                    let what = if cell.trim().is_empty() { "missing value".to_string() } else { format!("'{cell}' is not a finite number") };
                    CliError::invalid(format!("{source}: row {row}, column '{name}': {what}"))
                })
            })
            .collect::<Result<Vec<f64>, CliError>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(CliError::invalid(format!("{source}: no data rows")));
    }
    Ok(Table { headers, rows })
}

/// Splits a table into outcome, exposure and covariates (every other column,
/// in file order).
pub fn dataset_from_table(table: &Table, outcome: &str, exposure: &str) -> Result<Dataset, CliError> {
    let yj = table.column_index(outcome)?;
    let aj = table.column_index(exposure)?;
    if yj == aj {
        return Err(CliError::invalid("outcome and exposure must be different columns"));
    }
    if let Some(r) = table.rows.iter().position(|row| row[yj] != 0.0 && row[yj] != 1.0) {
        return Err(CliError::invalid(format!(
            "row {}, column '{outcome}': outcome is {} (must be 0 or 1)",
            r + 1,
            table.rows[r][yj]
        )));
    }
    let cov: Vec<usize> = (0..table.headers.len()).filter(|&j| j != yj && j != aj).collect();
    let n = table.rows.len();
    let y = table.rows.iter().map(|row| row[yj]).collect();
    let a = table.rows.iter().map(|row| row[aj]).collect();
    let x = DMatrix::from_fn(n, cov.len(), |i, k| table.rows[i][cov[k]]);
    let names = cov.iter().map(|&j| table.headers[j].clone()).collect();
    Ok(Dataset::new(y, a, x, Some(names))?)
}

pub fn read_dataset(path: &Path, outcome: &str, exposure: &str) -> Result<Dataset, CliError> {
    dataset_from_table(&read_table(path)?, outcome, exposure)
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("cannot write {}: {e}", path.display()))
}

/// Writes `y`, `a` and the covariates with shortest round-trip formatting, so
/// reading the file back reproduces every value exactly.
pub fn write_dataset(path: &Path, data: &Dataset, outcome: &str, exposure: &str) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| output_error(path, e))?;
    let names: Vec<String> = match data.column_names() {
        Some(n) => n.to_vec(),
        None => (1..=data.p()).map(|j| format!("x{j}")).collect(),
    };
    let mut header = vec![outcome.to_string(), exposure.to_string()];
    header.extend(names);
    w.write_record(&header).map_err(|e| output_error(path, e))?;
    for i in 0..data.n() {
        let mut rec = vec![data.y()[i].to_string(), data.a()[i].to_string()];
        rec.extend(data.x().row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| output_error(path, e))?;
    }
    w.flush().map_err(|e| output_error(path, e))
}

pub fn write_replicates(path: &Path, reps: &[Replicate]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| output_error(path, e))?;
    w.write_record([
        "replicate", "n", "seed", "beta_hat", "se", "ci_lower", "ci_upper", "covered", "converged", "error",
    ])
    .map_err(|e| output_error(path, e))?;
    for r in reps {
        w.write_record([
            r.index.to_string(),
            r.n.to_string(),
            r.seed.to_string(),
            r.beta_hat.to_string(),
            r.se.to_string(),
            r.ci_lower.to_string(),
            r.ci_upper.to_string(),
            r.covered.to_string(),
            r.converged.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| output_error(path, e))?;
    }
    w.flush().map_err(|e| output_error(path, e))
}

/// Pretty JSON to `path`, or to stdout when `path` is `None`.
pub fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| output_error(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Output(format!("stdout: {e}"))),
    }
}
