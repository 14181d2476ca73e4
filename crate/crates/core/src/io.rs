//! Response panels as CSV.
//!
//! `Y.csv` is wide: one row per period, one column per actor. A header row is
//! optional and detected by its first field failing to parse as a number.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{MirError, Result};

/// Read a wide panel into an `n x T` matrix (column `t` holds `Y_t`).
pub fn read_wide_csv<R: Read>(reader: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if idx == 0 && record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let mut row = Vec::with_capacity(record.len());
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| MirError::InvalidInput(format!("line {line}, column {}: cannot parse {field:?}", col + 1)))?;
            if !v.is_finite() {
                return Err(MirError::InvalidInput(format!("line {line}, column {}: non-finite value", col + 1)));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(MirError::InvalidInput(format!(
                    "line {line}: expected {} actors, found {}",
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MirError::InvalidInput("no data rows".into()));
    }
    let (periods, n) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(n, periods, |i, t| rows[t][i]))
}

/// Write an `n x T` matrix as a wide panel with an `actor_1..actor_n` header.
pub fn write_wide_csv<W: Write>(writer: W, y: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record((1..=y.nrows()).map(|i| format!("actor_{i}")))?;
    for t in 0..y.ncols() {
        w.write_record(y.column(t).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
