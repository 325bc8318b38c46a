use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub span: u32,
    pub method: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Append-only sequence of [`RunRecord`]s, stored as newline-delimited JSON.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    records: Vec<RunRecord>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Non-finite values cannot be represented and are rejected.
    pub fn push(&mut self, record: RunRecord) -> Result<()> {
        if !record.value.is_finite() {
            return Err(Error::Numeric(format!("run log value for {}", record.metric)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: &RunLog) {
        self.records.extend(other.records.iter().cloned());
    }

    pub fn get(&self, span: u32, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.span == span && r.metric == metric)
            .map(|r| r.value)
    }

    /// `(span, value)` pairs for one metric, in log order.
    pub fn series(&self, metric: &str) -> Vec<(u32, f64)> {
        self.records
            .iter()
            .filter(|r| r.metric == metric)
            .map(|r| (r.span, r.value))
            .collect()
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        let s = self.series(metric);
        (!s.is_empty()).then(|| s.iter().map(|(_, v)| v).sum::<f64>() / s.len() as f64)
    }

    pub fn record_line(r: &RunRecord) -> String {
        serde_json::to_string(r).expect("run records always serialize")
    }

    pub fn to_ndjson(&self) -> String {
        self.records.iter().map(|r| Self::record_line(r) + "\n").collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format(format!("run log line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading run log {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Appends `records` to the file at `path`.
    pub fn append_to(path: &Path, records: &[RunRecord]) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening run log {}", path.display()), e))?;
        let text: String = records.iter().map(|r| Self::record_line(r) + "\n").collect();
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(format!("appending to run log {}", path.display()), e))
    }
}
