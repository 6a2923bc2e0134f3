//! CSV boundary of the store: `timestamp,<value column>` with RFC 3339 times.
//!
//! Values use Rust's shortest round-trip float rendering, so export followed
//! by import is bit-exact.

use wallet_core::reading::SeriesPoint;
use wallet_core::Timestamp;

use crate::{SeriesKey, Store, StoreError};

pub fn export_csv(points: &[SeriesPoint], value_column: &str) -> String {
    let mut out = String::with_capacity(16 + points.len() * 32);
    out.push_str("timestamp,");
    out.push_str(value_column);
    out.push('\n');
    for p in points {
        out.push_str(&p.timestamp.to_rfc3339());
        out.push(',');
        out.push_str(&p.value.to_string());
        out.push('\n');
    }
    out
}

/// Reads the `timestamp` column and the named value column; other columns
/// are ignored. Rows are returned in file order.
pub fn parse_csv(text: &str, value_column: &str) -> Result<Vec<SeriesPoint>, StoreError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| StoreError::Csv(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| StoreError::Csv(format!("missing column {name:?}")))
    };
    let (ti, vi) = (col("timestamp")?, col(value_column)?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| StoreError::Csv(e.to_string()))?;
        let line = i + 2;
        let ts = Timestamp::parse_rfc3339(&rec[ti]).map_err(|e| StoreError::Csv(format!("line {line}: bad timestamp {:?}", e.0)))?;
        let value: f64 = rec[vi]
            .parse()
            .map_err(|_| StoreError::Csv(format!("line {line}: bad value {:?}", &rec[vi])))?;
        if !value.is_finite() {
            return Err(StoreError::NonFinite(value));
        }
        out.push(SeriesPoint::new(ts, value));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImportSummary {
    pub rows: usize,
}

impl Store {
    /// `timestamp,value` for `from <= t < to`.
    pub fn export_csv(&self, key: &SeriesKey, from: Timestamp, to: Timestamp) -> Result<String, StoreError> {
        Ok(export_csv(&self.query(key, from, to)?, "value"))
    }

    /// Imports `timestamp,value`, or any CSV whose value column is named
    /// after the key's metric (for instance a `timestamp,air_pressure` feed).
    /// The file is parsed completely before anything is written.
    pub fn import_csv(&self, key: &SeriesKey, text: &str) -> Result<ImportSummary, StoreError> {
        let first = text.lines().next().unwrap_or_default();
        let column = if first.split(',').any(|h| h.trim() == key.metric) {
            key.metric.as_str()
        } else {
            "value"
        };
        let points = parse_csv(text, column)?;
        self.append_many(key, &points)?;
        Ok(ImportSummary { rows: points.len() })
    }
}
