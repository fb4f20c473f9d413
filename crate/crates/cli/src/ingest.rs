//! CSV ingestion: header row mandatory, comma separated, strict numerics.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;
use wicm::Dataset;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} is empty")]
    EmptyFile { path: String },

    #[error("response column {name:?} not found (columns: {available})")]
    MissingColumn { name: String, available: String },

    /// `row` counts data rows from 1, excluding the header.
    #[error("non-numeric cell at row {row}, column {column:?}: {value:?}")]
    NonNumericCell { row: usize, column: String, value: String },

    #[error("malformed CSV at row {row}: {message}")]
    Malformed { row: usize, message: String },

    #[error("no predictor columns besides the response {response:?}")]
    NoPredictors { response: String },

    #[error(transparent)]
    Dataset(#[from] wicm::Error),
}

/// A dataset with its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub predictors: Vec<String>,
    pub response: String,
    pub data: Dataset,
}

pub fn ingest_csv(path: &Path, response: &str) -> Result<Table, IngestError> {
    let label = path.display().to_string();
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: label.clone(),
        source,
    })?;
    read_csv(file, response, &label)
}

pub fn read_csv<R: Read>(reader: R, response: &str, label: &str) -> Result<Table, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| IngestError::Malformed {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(IngestError::EmptyFile { path: label.into() });
    }
    let names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let y_col = names
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| IngestError::MissingColumn {
            name: response.into(),
            available: names.join(", "),
        })?;
    if names.len() < 2 {
        return Err(IngestError::NoPredictors {
            response: response.into(),
        });
    }
    let predictors: Vec<String> = names
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y_col)
        .map(|(_, h)| h.clone())
        .collect();

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| IngestError::Malformed {
            row,
            message: e.to_string(),
        })?;
        for (j, cell) in rec.iter().enumerate() {
            let value = parse_cell(cell).ok_or_else(|| IngestError::NonNumericCell {
                row,
                column: names[j].clone(),
                value: cell.into(),
            })?;
            if j == y_col {
                y.push(value);
            } else {
                x.push(value);
            }
        }
    }
    if y.is_empty() {
        return Err(IngestError::EmptyFile { path: label.into() });
    }
    let data = Dataset::from_row_major(y.len(), predictors.len(), x, y)?;
    Ok(Table {
        predictors,
        response: response.into(),
        data,
    })
}

/// Finite decimal numbers only; blanks, NaN and infinities are rejected.
fn parse_cell(cell: &str) -> Option<f64> {
    let v: f64 = cell.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

/// Writes predictors in order followed by the response. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv<W: Write>(writer: W, table: &Table) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = table.predictors.clone();
    header.push(table.response.clone());
    w.write_record(&header)?;
    let y = table.data.y();
    for (i, row) in table.data.rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(f64::to_string).collect();
        rec.push(y[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
