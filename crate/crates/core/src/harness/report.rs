use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ErrorPolicy, HarnessError};
use crate::dataset::io_err;
use crate::metrics::MetricReport;
use crate::prompting::StrategyKind;

const REPORT_FORMAT: &str = "overlaydetect-report";
const REPORT_VERSION: u32 = 1;
const UNDEFINED: &str = "—";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub created_unix_secs: u64,
    /// SHA-256 over the strategy configuration (templates, checkpoint, endpoint).
    pub config_hash: String,
    pub error_policy: ErrorPolicy,
    pub error_count: usize,
    pub tool_version: String,
}

impl RunMetadata {
    pub fn now(config_hash: String, error_policy: ErrorPolicy, error_count: usize) -> Self {
        let created_unix_secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunMetadata {
            created_unix_secs,
            config_hash,
            error_policy,
            error_count,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub strategy: Option<StrategyKind>,
    pub metrics: MetricReport,
    pub metadata: RunMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub format: String,
    pub version: u32,
    /// SHA-256 of the evaluation manifest file.
    pub fingerprint: String,
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn new(fingerprint: impl Into<String>, rows: Vec<ReportRow>) -> Self {
        ComparisonReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            fingerprint: fingerprint.into(),
            rows,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let report: ComparisonReport =
            serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(HarnessError::Parse(format!(
                "unsupported report format {:?} version {}",
                report.format, report.version
            )));
        }
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        fs::write(path, render_report(self, ReportFormat::Machine)).map_err(io_err(path))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TableText,
    Machine,
}

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:.2}"))
}

fn table(rows: &[[String; 4]]) -> String {
    let mut widths = [0usize; 4];
    for row in rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String; 4]| {
        let cells: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", cells.join(" | "))
    };
    let mut out = line(&rows[0]);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in &rows[1..] {
        out.push_str(&line(row));
    }
    out
}

/// `TableText` is a Model | Precision | Recall | Accuracy table with two
/// decimals and "—" for undefined values; `Machine` is pretty JSON at full
/// precision.
pub fn render_report(report: &ComparisonReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Machine => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::TableText => {
            let mut rows = vec![["Model", "Precision", "Recall", "Accuracy"].map(String::from)];
            for r in &report.rows {
                rows.push([
                    r.name.clone(),
                    cell(r.metrics.precision),
                    cell(r.metrics.recall),
                    cell(Some(r.metrics.accuracy)),
                ]);
            }
            table(&rows)
        }
    }
}

/// Concatenates rows of reports over the same dataset, in argument order.
pub fn compare(reports: &[ComparisonReport]) -> Result<ComparisonReport, HarnessError> {
    let first = reports
        .first()
        .ok_or_else(|| HarnessError::Contract("compare needs at least one report".into()))?;
    for r in &reports[1..] {
        if r.fingerprint != first.fingerprint {
            return Err(HarnessError::FingerprintMismatch(first.fingerprint.clone(), r.fingerprint.clone()));
        }
    }
    Ok(ComparisonReport::new(
        first.fingerprint.clone(),
        reports.iter().flat_map(|r| r.rows.iter().cloned()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ConfusionMatrix;

    fn row(name: &str, p: Option<f64>, r: Option<f64>, a: f64) -> ReportRow {
        ReportRow {
            name: name.into(),
            strategy: None,
            metrics: MetricReport {
                precision: p,
                recall: r,
                accuracy: a,
                matrix: ConfusionMatrix::default(),
                n: 0,
            },
            metadata: RunMetadata {
                created_unix_secs: 0,
                config_hash: String::new(),
                error_policy: ErrorPolicy::CountAsNegative,
                error_count: 0,
                tool_version: "0".into(),
            },
        }
    }

    #[test]
    fn published_row_format() {
        let rep = ComparisonReport::new("f", vec![row("Fine-tuned LLM", Some(0.98), Some(0.84), 0.83)]);
        let text = render_report(&rep, ReportFormat::TableText);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "| Model          | Precision | Recall | Accuracy |");
        assert_eq!(lines[1], "|----------------|-----------|--------|----------|");
        assert_eq!(lines[2], "| Fine-tuned LLM | 0.98      | 0.84   | 0.83     |");
    }

    #[test]
    fn undefined_renders_dash() {
        let rep = ComparisonReport::new("f", vec![row("m", None, Some(0.0), 0.5)]);
        let text = render_report(&rep, ReportFormat::TableText);
        assert!(text.lines().nth(2).unwrap().contains("| —         | 0.00   | 0.50     |"));
    }

    #[test]
    fn machine_round_trip_rerenders_identically() {
        let rep = ComparisonReport::new(
            "abc",
            vec![row("A", Some(2.0 / 3.0), None, 0.1 + 0.2), row("Pre-trained LLM", Some(0.655), Some(0.8), 0.6)],
        );
        let machine = render_report(&rep, ReportFormat::Machine);
        let back = ComparisonReport::from_json(&machine).unwrap();
        assert_eq!(back, rep);
        assert_eq!(render_report(&back, ReportFormat::TableText), render_report(&rep, ReportFormat::TableText));
        assert_eq!(render_report(&back, ReportFormat::Machine), machine);
    }

    #[test]
    fn compare_checks_fingerprints() {
        let a = ComparisonReport::new("x", vec![row("A", None, None, 0.0)]);
        let b = ComparisonReport::new("x", vec![row("B", None, None, 1.0)]);
        let c = ComparisonReport::new("y", vec![row("C", None, None, 1.0)]);
        let ab = compare(&[a.clone(), b]).unwrap();
        assert_eq!(ab.rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["A", "B"]);
        assert!(matches!(compare(&[a, c]), Err(HarnessError::FingerprintMismatch(..))));
        assert!(compare(&[]).is_err());
    }
}
