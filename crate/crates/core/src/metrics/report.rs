use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `(task, model, metric, value, stratum)` row. `stratum` is `all` for
/// whole-test-set figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub model: String,
    pub metric: String,
    pub value: String,
    pub stratum: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, task: &str, model: &str, metric: &str, value: f64, stratum: &str) {
        self.push_raw(task, model, metric, format_value(value), stratum);
    }

    pub fn push_raw(
        &mut self,
        task: &str,
        model: &str,
        metric: &str,
        value: String,
        stratum: &str,
    ) {
        self.rows.push(ReportRow {
            task: task.into(),
            model: model.into(),
            metric: metric.into(),
            value,
            stratum: stratum.into(),
        });
    }

    pub fn get(&self, metric: &str, stratum: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.stratum == stratum)
            .and_then(|r| r.value.parse().ok())
    }

    /// CSV with a `# config_hash=` comment line first.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# config_hash={}", self.config_hash).map_err(|e| Error::io("<report>", e))?;
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8")
    }
}

pub fn format_value(v: f64) -> String {
    format!("{v:.6}")
}
