use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label of the unmodified condition.
pub const FULL: &str = "full";

/// One number in the task × intervention matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub intervention: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// `value − full value` for the same (model, task, metric, seed).
    pub delta_vs_full: Option<f64>,
    pub p_value: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
    pub model: String,
    pub calibration_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub provenance: Provenance,
    pub rows: Vec<MetricRow>,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "model",
    "intervention",
    "task",
    "metric",
    "value",
    "ci_lo",
    "ci_hi",
    "delta_vs_full",
    "p_value",
    "seed",
    "config_hash",
];

pub fn version_string() -> String {
    format!("ablate-lab v{}", env!("CARGO_PKG_VERSION"))
}

impl MetricReport {
    pub fn full_row(&self, row: &MetricRow) -> Option<&MetricRow> {
        self.rows.iter().find(|r| {
            r.intervention == FULL
                && r.model == row.model
                && r.task == row.task
                && r.metric == row.metric
                && r.seed == row.seed
        })
    }

    /// Every delta row must point at an existing Full row and equal the
    /// recomputed difference.
    pub fn check_deltas(&self) -> Result<()> {
        for r in &self.rows {
            if let Some(d) = r.delta_vs_full {
                let full = self.full_row(r).ok_or_else(|| {
                    Error::Contract(format!("delta row {}/{}/{} has no full row", r.intervention, r.task, r.metric))
                })?;
                if (d - (r.value - full.value)).abs() > 1e-9 {
                    return Err(Error::Contract(format!(
                        "delta for {}/{}/{} disagrees with stored values",
                        r.intervention, r.task, r.metric
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn interventions(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.intervention) {
                out.push(r.intervention.clone());
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.intervention.clone(),
                r.task.clone(),
                r.metric.clone(),
                r.value.to_string(),
                opt(r.ci_lo),
                opt(r.ci_hi),
                opt(r.delta_vs_full),
                opt(r.p_value),
                r.seed.to_string(),
                r.config_hash.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Parses rows written by [`to_csv`](Self::to_csv).
    pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        if header != CSV_COLUMNS {
            return Err(Error::Contract(format!("unexpected CSV header {header:?}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Contract(format!("bad number {s:?} in CSV")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() { Ok(None) } else { num(s).map(Some) }
        };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            rows.push(MetricRow {
                model: rec[0].to_owned(),
                intervention: rec[1].to_owned(),
                task: rec[2].to_owned(),
                metric: rec[3].to_owned(),
                value: num(&rec[4])?,
                ci_lo: opt(&rec[5])?,
                ci_hi: opt(&rec[6])?,
                delta_vs_full: opt(&rec[7])?,
                p_value: opt(&rec[8])?,
                seed: rec[9]
                    .parse()
                    .map_err(|_| Error::Contract(format!("bad seed {:?} in CSV", &rec[9])))?,
                config_hash: rec[10].to_owned(),
            });
        }
        Ok(rows)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Plain-text table for terminals.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<22} {:<16} {:<26} {:>10} {:>22} {:>10} {:>8}\n",
            "model", "intervention", "task", "metric", "value", "ci", "delta", "p"
        );
        for r in &self.rows {
            let ci = match (r.ci_lo, r.ci_hi) {
                (Some(lo), Some(hi)) => format!("[{lo:.4}, {hi:.4}]"),
                _ => String::new(),
            };
            let delta = r.delta_vs_full.map(|d| format!("{d:+.4}")).unwrap_or_default();
            let p = r.p_value.map(|p| format!("{p:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{:<12} {:<22} {:<16} {:<26} {:>10.4} {:>22} {:>10} {:>8}\n",
                r.model, r.intervention, r.task, r.metric, r.value, ci, delta, p
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(intervention: &str, value: f64, delta: Option<f64>) -> MetricRow {
        MetricRow {
            model: "m".into(),
            intervention: intervention.into(),
            task: "classification".into(),
            metric: "top1".into(),
            value,
            ci_lo: Some(value - 0.1),
            ci_hi: None,
            delta_vs_full: delta,
            p_value: delta.map(|_| 0.5),
            seed: 7,
            config_hash: "abc".into(),
        }
    }

    fn report() -> MetricReport {
        MetricReport {
            provenance: Provenance {
                config_hash: "abc".into(),
                seeds: vec![7],
                version: version_string(),
                model: "m".into(),
                calibration_id: None,
            },
            rows: vec![row(FULL, 0.75, None), row("zero_registers", 0.5, Some(-0.25))],
        }
    }

    #[test]
    fn json_and_csv_round_trip() {
        let r = report();
        assert_eq!(MetricReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert_eq!(MetricReport::rows_from_csv(&r.to_csv().unwrap()).unwrap(), r.rows);
        let header = r.to_csv().unwrap().lines().next().unwrap().to_owned();
        assert_eq!(header, CSV_COLUMNS.join(","));
    }

    #[test]
    fn delta_check_catches_orphans() {
        let mut r = report();
        r.check_deltas().unwrap();
        r.rows.remove(0);
        assert!(r.check_deltas().is_err());
    }
}
