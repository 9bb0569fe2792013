use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    Skipped { reason: String },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub values: BTreeMap<String, f64>,
    pub dataset: String,
    pub backend: String,
    pub samples: usize,
    /// RFC 3339; left empty when timestamps are disabled.
    pub timestamp: Option<String>,
    pub config: serde_json::Value,
    pub status: ReportStatus,
    /// Per-item failures that did not abort the metric.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl EvalReport {
    pub fn new(metric: &str, dataset: &str, backend: &str) -> Self {
        Self {
            metric: metric.into(),
            values: BTreeMap::new(),
            dataset: dataset.into(),
            backend: backend.into(),
            samples: 0,
            timestamp: None,
            config: serde_json::Value::Null,
            status: ReportStatus::Ok,
            failures: Vec::new(),
        }
    }

    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub(crate) fn set(&mut self, key: &str, v: f64) {
        self.values.insert(key.to_string(), v);
    }

    /// Checks the report invariants: samples > 0 and finite values for
    /// completed metrics.
    pub(crate) fn checked(self) -> Result<Self> {
        if self.status == ReportStatus::Ok {
            if self.samples == 0 {
                return Err(EvalError::Contract(format!("{} report has no samples", self.metric)));
            }
            if let Some((k, v)) = self.values.iter().find(|(_, v)| !v.is_finite()) {
                return Err(EvalError::Contract(format!("{} value {k} is {v}", self.metric)));
            }
        }
        Ok(self)
    }

    pub fn stamped(mut self, timestamp: Option<String>) -> Self {
        self.timestamp = timestamp;
        self
    }
}

/// Plain-text table, one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            let status = match &r.status {
                ReportStatus::Ok => "ok".to_string(),
                ReportStatus::Skipped { .. } => "SKIPPED".to_string(),
                ReportStatus::Failed { .. } => "FAILED".to_string(),
            };
            let values = r
                .values
                .iter()
                .map(|(k, v)| format!("{k}={v:.4}"))
                .collect::<Vec<_>>()
                .join(" ");
            [r.backend.clone(), r.metric.clone(), status, r.samples.to_string(), values]
        })
        .collect();
    let header = ["backend", "metric", "status", "n", "values"];
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header);
    for row in &rows {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(path, json + "\n").map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_and_checks() {
        let mut r = EvalReport::new("perplexity", "test", "base");
        r.samples = 3;
        r.set("perplexity", 12.5);
        let mut s = EvalReport::new("perplexity", "test", "remote");
        s.status = ReportStatus::Skipped {
            reason: "no log-probabilities".into(),
        };
        let t = render_table(&[r.clone(), s]);
        assert!(t.contains("perplexity=12.5000"));
        assert!(t.contains("SKIPPED"));
        assert_eq!(t.lines().count(), 3);
        assert!(r.clone().checked().is_ok());
        r.set("bad", f64::NAN);
        assert!(r.checked().is_err());
    }
}
