//! Confusion counts, the four detection metrics and report rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::Label;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predicted} predictions but {truth} labels")]
    LengthMismatch { predicted: usize, truth: usize },
}

/// Abnormal is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, predicted: Label, truth: Label) {
        match (predicted.is_abnormal(), truth.is_abnormal()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

pub fn confusion(predicted: &[Label], truth: &[Label]) -> Result<ConfusionCounts, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in predicted.iter().zip(truth) {
        c.add(*p, *t);
    }
    Ok(c)
}

/// `None` marks a metric with a zero denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Precision is TP / (TP + FP), the share of flagged items that are true
/// anomalies.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Metrics {
        precision,
        recall,
        f1,
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowSource {
    Measured,
    PublishedReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub attackers: Option<usize>,
    pub victims: Option<usize>,
    pub metrics: Metrics,
    pub source: RowSource,
}

impl MetricRow {
    pub fn measured(scenario: &str, attackers: Option<usize>, victims: Option<usize>, c: &ConfusionCounts) -> Self {
        MetricRow {
            scenario: scenario.to_string(),
            attackers,
            victims,
            metrics: metrics(c),
            source: RowSource::Measured,
        }
    }

    fn reference(scenario: &str, attackers: Option<usize>, victims: Option<usize>, m: [Option<f64>; 4]) -> Self {
        MetricRow {
            scenario: scenario.to_string(),
            attackers,
            victims,
            metrics: Metrics {
                precision: m[0],
                recall: m[1],
                f1: m[2],
                accuracy: m[3],
            },
            source: RowSource::PublishedReference,
        }
    }

    pub fn label(&self) -> String {
        match self.source {
            RowSource::Measured => self.scenario.clone(),
            RowSource::PublishedReference => format!("{} (published-reference)", self.scenario),
        }
    }
}

/// Published results for the simulated gossip attacks.
pub fn gossip_reference_rows() -> Vec<MetricRow> {
    vec![
        MetricRow::reference(
            "Eclipse single victim",
            Some(100),
            Some(1),
            [Some(1.00), Some(0.99), Some(0.99), Some(0.99)],
        ),
        MetricRow::reference(
            "Covert flash",
            Some(100),
            Some(20),
            [Some(1.00), Some(0.80), Some(0.89), Some(0.80)],
        ),
        MetricRow::reference(
            "Eclipse network",
            Some(200),
            Some(50),
            [Some(1.00), Some(0.79), Some(0.88), Some(0.79)],
        ),
    ]
}

/// Published mainnet discovery results. The baseline has no accuracy.
pub fn discovery_reference_rows() -> Vec<MetricRow> {
    vec![
        MetricRow::reference(
            "LSTM top-k detector",
            None,
            None,
            [Some(0.81), Some(0.88), Some(0.85), Some(0.87)],
        ),
        MetricRow::reference("RFC baseline", None, None, [Some(0.71), Some(0.95), Some(0.62), None]),
    ]
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "Scenario",
    "Attackers",
    "Victims",
    "Precision",
    "Recall",
    "F1 score",
    "Accuracy",
];

pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "—".to_string(), |x| format!("{x:.2}"))
}

fn fmt_count(v: Option<usize>) -> String {
    v.map_or_else(|| "—".to_string(), |x| x.to_string())
}

fn cells(row: &MetricRow) -> [String; 7] {
    let m = &row.metrics;
    [
        row.label(),
        fmt_count(row.attackers),
        fmt_count(row.victims),
        fmt_metric(m.precision),
        fmt_metric(m.recall),
        fmt_metric(m.f1),
        fmt_metric(m.accuracy),
    ]
}

/// Markdown table with a fixed header; `note` is appended below it.
pub fn render_markdown(rows: &[MetricRow], note: Option<&str>) -> String {
    let mut out = format!("| {} |\n", REPORT_COLUMNS.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len())));
    for row in rows {
        out.push_str(&format!("| {} |\n", cells(row).join(" | ")));
    }
    if let Some(n) = note {
        out.push('\n');
        out.push_str(n);
        out.push('\n');
    }
    out
}

pub fn render_csv(rows: &[MetricRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS).expect("in-memory write");
    for row in rows {
        w.write_record(cells(row)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}
