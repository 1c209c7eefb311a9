use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch metrics in recording order. Contains no timing information, so
/// two runs with the same seed serialize to identical bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub rows: Vec<MetricRow>,
}

impl MetricsRecord {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Values of one `(split, metric)` series in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// `epoch,split,metric,value` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{:?}", r.epoch, r.split, r.metric, r.value).expect("string write");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        if lines.next() != Some("epoch,split,metric,value") {
            return Err(HarnessError::Malformed("metrics header".into()));
        }
        let mut record = Self::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || HarnessError::Malformed(format!("metrics row {line:?}"));
            if parts.len() != 4 {
                return Err(bad());
            }
            record.push(
                parts[0].parse().map_err(|_| bad())?,
                parts[1],
                parts[2],
                parts[3].parse().map_err(|_| bad())?,
            );
        }
        Ok(record)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_csv()).map_err(|e| HarnessError::io(path, e))
    }
}
