//! Report writers: per-sample CSV tables and JSON summaries. Every value
//! is formatted the same way on every run so re-runs compare byte for
//! byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::write_json;
use crate::error::{Error, Result};
use crate::graph::display_name;

/// Version stamp recorded in every summary.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Quote a field when it contains a comma, quote, or line break; inner
/// quotes double.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Shortest representation that parses back to the same f64, so CSV cells
/// are both readable and lossless.
pub fn float_cell(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone)]
pub struct CsvTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        CsvTable { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::usage(format!(
                "row has {} fields, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let line = |fields: &[String]| {
            fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",")
        };
        out.push_str(&line(&self.columns));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// JSON summary accompanying each CSV: code version, seed, the config
/// that produced the run, the internal-id -> report-axis name mapping for
/// every layer mentioned, and command-specific statistics flattened in.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub code_version: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub layers: BTreeMap<String, String>,
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub stats: serde_json::Map<String, serde_json::Value>,
}

impl Summary {
    pub fn new<C: Serialize>(seed: u64, config: &C) -> Result<Self> {
        Ok(Summary {
            code_version: CODE_VERSION.to_string(),
            seed,
            layers: BTreeMap::new(),
            config: serde_json::to_value(config)?,
            stats: serde_json::Map::new(),
        })
    }

    pub fn layer(self, id: &str) -> Self {
        let name = display_name(id);
        self.layer_named(id, name)
    }

    /// For names needing resolution first (aliases, capture ids).
    pub fn layer_named(mut self, id: &str, display: impl Into<String>) -> Self {
        self.layers.insert(id.to_string(), display.into());
        self
    }

    pub fn stat<V: Serialize>(mut self, key: &str, value: V) -> Result<Self> {
        self.stats.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn mean_std(self, values: &[f64]) -> Result<Self> {
        let (mean, std) = crate::metrics::mean_std(values);
        self.stat("mean", mean)?.stat("std", std)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
