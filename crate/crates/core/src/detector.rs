//! Decision rules turning model forecasts into anomaly verdicts.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Label, PeerRef};
use crate::nn::{Batch, DenseWindows, NnError, SequenceModel, TokenWindows};

/// Windows per forward pass during scoring.
pub const SCORING_CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    Config(String),
    #[error("no validation windows to calibrate on")]
    EmptyCalibration,
    #[error("{0} windows but {1} target indices")]
    IndexMismatch(usize, usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Numeric,
    Categorical,
}

fn default_k() -> usize {
    5
}
fn default_quantile() -> f64 {
    0.99
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub mode: DetectorMode,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_quantile")]
    pub threshold_quantile: f64,
    /// Also report a peer-level row: a peer is abnormal if any of its
    /// records is.
    #[serde(default)]
    pub aggregate_per_peer: bool,
}

impl DetectorConfig {
    pub fn numeric() -> Self {
        DetectorConfig {
            mode: DetectorMode::Numeric,
            k: default_k(),
            threshold_quantile: default_quantile(),
            aggregate_per_peer: false,
        }
    }

    pub fn categorical(k: usize) -> Self {
        DetectorConfig {
            mode: DetectorMode::Categorical,
            k,
            ..Self::numeric()
        }
    }

    /// `vocab_size` is checked against `k` in categorical mode when given.
    pub fn validate(&self, vocab_size: Option<usize>) -> Result<(), DetectorError> {
        if self.k == 0 {
            return Err(DetectorError::Config("k must be at least 1".into()));
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile <= 1.0) {
            return Err(DetectorError::Config(format!(
                "threshold_quantile {} outside (0, 1]",
                self.threshold_quantile
            )));
        }
        if let (DetectorMode::Categorical, Some(v)) = (self.mode, vocab_size) {
            if self.k > v {
                return Err(DetectorError::Config(format!(
                    "k {} exceeds vocabulary size {v}",
                    self.k
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forecast {
    Vector(Vec<f64>),
    TopK(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observed {
    Vector(Vec<f64>),
    Token(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub window_index: usize,
    /// Index of the record that supplied the window's target.
    pub target_index: usize,
    pub predicted: Forecast,
    pub observed: Observed,
    pub score: f64,
    pub flagged: bool,
}

/// Linear-interpolation quantile at position `q * (n - 1)` of the sorted
/// values. `None` for an empty input.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Forecasts for every window, in window order.
pub fn forecast_dense(model: &SequenceModel, windows: &DenseWindows) -> Result<Vec<Vec<f64>>, DetectorError> {
    let n = windows.len();
    let per = windows.steps * windows.features;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + SCORING_CHUNK).min(n);
        let batch = Batch::Dense {
            data: &windows.inputs[start * per..end * per],
            batch: end - start,
            steps: windows.steps,
            features: windows.features,
        };
        let pred = model.predict(&batch)?;
        out.extend((0..pred.rows).map(|r| pred.row(r).to_vec()));
        start = end;
    }
    Ok(out)
}

/// Next-token distributions for every window.
pub fn forecast_tokens(model: &SequenceModel, windows: &TokenWindows) -> Result<Vec<Vec<f64>>, DetectorError> {
    let n = windows.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + SCORING_CHUNK).min(n);
        let batch = Batch::Tokens {
            ids: &windows.inputs[start * windows.steps..end * windows.steps],
            batch: end - start,
            steps: windows.steps,
        };
        let pred = model.predict(&batch)?;
        out.extend((0..pred.rows).map(|r| pred.row(r).to_vec()));
        start = end;
    }
    Ok(out)
}

/// L2 forecast errors of every window.
pub fn numeric_scores(model: &SequenceModel, windows: &DenseWindows) -> Result<Vec<f64>, DetectorError> {
    let f = windows.features;
    Ok(forecast_dense(model, windows)?
        .iter()
        .enumerate()
        .map(|(i, p)| l2(p, &windows.targets[i * f..(i + 1) * f]))
        .collect())
}

/// Threshold = `q`-quantile of forecast errors on normal validation windows.
pub fn calibrate_threshold(model: &SequenceModel, validation: &DenseWindows, q: f64) -> Result<f64, DetectorError> {
    let scores = numeric_scores(model, validation)?;
    quantile(&scores, q).ok_or(DetectorError::EmptyCalibration)
}

/// Flag windows whose forecast error is strictly above `threshold`.
pub fn detect_numeric(
    model: &SequenceModel,
    windows: &DenseWindows,
    target_indices: &[usize],
    threshold: f64,
) -> Result<Vec<AnomalyVerdict>, DetectorError> {
    if windows.len() != target_indices.len() {
        return Err(DetectorError::IndexMismatch(windows.len(), target_indices.len()));
    }
    let f = windows.features;
    let forecasts = forecast_dense(model, windows)?;
    Ok(forecasts
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let observed = windows.targets[i * f..(i + 1) * f].to_vec();
            let score = l2(&p, &observed);
            AnomalyVerdict {
                window_index: i,
                target_index: target_indices[i],
                predicted: Forecast::Vector(p),
                observed: Observed::Vector(observed),
                score,
                flagged: score > threshold,
            }
        })
        .collect())
}

/// Ids of the `k` largest probabilities, highest first; equal
/// probabilities rank the lower id first.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Flag windows whose observed next token is outside the top-`k`
/// predictions. The score is the negative log-probability of the observed
/// token.
pub fn detect_categorical(
    model: &SequenceModel,
    windows: &TokenWindows,
    target_indices: &[usize],
    k: usize,
) -> Result<Vec<AnomalyVerdict>, DetectorError> {
    if windows.len() != target_indices.len() {
        return Err(DetectorError::IndexMismatch(windows.len(), target_indices.len()));
    }
    let dists = forecast_tokens(model, windows)?;
    Ok(dists
        .into_iter()
        .enumerate()
        .map(|(i, p)| categorical_verdict(i, target_indices[i], &p, windows.targets[i], k))
        .collect())
}

pub fn categorical_verdict(
    window_index: usize,
    target_index: usize,
    probs: &[f64],
    observed: usize,
    k: usize,
) -> AnomalyVerdict {
    let top = top_k(probs, k);
    let flagged = !top.contains(&observed);
    let p = probs.get(observed).copied().unwrap_or(0.0).max(1e-12);
    AnomalyVerdict {
        window_index,
        target_index,
        predicted: Forecast::TopK(top),
        observed: Observed::Token(observed),
        score: -p.ln(),
        flagged,
    }
}

/// Per-record predictions: a record inherits the flag of the window it is
/// the target of; other records are normal.
pub fn verdicts_to_event_labels(verdicts: &[AnomalyVerdict], n_records: usize) -> Vec<Label> {
    let mut labels = vec![Label::Normal; n_records];
    for v in verdicts {
        if v.flagged && v.target_index < n_records {
            labels[v.target_index] = Label::Abnormal;
        }
    }
    labels
}

/// A peer is abnormal if any of its labels is.
pub fn aggregate_by_peer(peers: &[PeerRef], labels: &[Label]) -> BTreeMap<PeerRef, Label> {
    let mut out = BTreeMap::new();
    for (p, l) in peers.iter().zip(labels) {
        let e = out.entry(*p).or_insert(Label::Normal);
        if l.is_abnormal() {
            *e = Label::Abnormal;
        }
    }
    out
}

pub fn write_verdicts_jsonl<W: Write>(mut out: W, verdicts: &[AnomalyVerdict]) -> Result<(), DetectorError> {
    for v in verdicts {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_verdicts_jsonl(text: &str) -> Result<Vec<AnomalyVerdict>, DetectorError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DetectorError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{HeadKind, ModelInput, ModelSpec};
    use proptest::prelude::*;

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile(&[2.5; 7], 0.3), Some(2.5));
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&v, 0.99).unwrap() - 99.01).abs() < 1e-9);
        assert_eq!(quantile(&v, 1.0), Some(100.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn top_k_examples() {
        let p = [0.4, 0.3, 0.2, 0.05, 0.05];
        assert_eq!(top_k(&p, 2), vec![0, 1]);
        assert!(categorical_verdict(0, 0, &p, 2, 2).flagged);
        for k in 1..=5 {
            assert!(!categorical_verdict(0, 0, &p, 0, k).flagged);
        }
        assert!((0..5).all(|o| !categorical_verdict(0, 0, &p, o, 5).flagged));
        // tie at rank k goes to the lower id
        assert_eq!(top_k(&p, 4), vec![0, 1, 2, 3]);
        assert!(categorical_verdict(0, 0, &p, 4, 4).flagged);
    }

    fn tiny_model() -> SequenceModel {
        SequenceModel::init(
            ModelSpec {
                input: ModelInput::Features { count: 2 },
                hidden_size: 3,
                num_layers: 1,
                num_directions: 1,
                output_dim: 2,
                head: HeadKind::Regression,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn numeric_rule_is_strict() {
        let model = tiny_model();
        let mut w = DenseWindows {
            steps: 2,
            features: 2,
            ..Default::default()
        };
        w.push(&[vec![0.1, 0.2], vec![0.3, 0.4]], &[0.0, 0.0]);
        let forecast = forecast_dense(&model, &w).unwrap()[0].clone();
        // observed equal to the forecast
        let mut exact = DenseWindows {
            steps: 2,
            features: 2,
            ..Default::default()
        };
        exact.push(&[vec![0.1, 0.2], vec![0.3, 0.4]], &forecast);
        let v = detect_numeric(&model, &exact, &[7], 0.1).unwrap();
        assert_eq!(v[0].score, 0.0);
        assert!(!v[0].flagged);
        assert_eq!(v[0].target_index, 7);

        let score = numeric_scores(&model, &w).unwrap()[0];
        assert!(!detect_numeric(&model, &w, &[0], score).unwrap()[0].flagged);
        assert!(detect_numeric(&model, &w, &[0], score - 1e-9).unwrap()[0].flagged);
        assert!(!detect_numeric(&model, &w, &[0], f64::INFINITY).unwrap()[0].flagged);
        assert!(detect_numeric(&model, &w, &[], score).is_err());
        let t = calibrate_threshold(&model, &w, 0.5).unwrap();
        assert_eq!(t, score);
    }

    #[test]
    fn event_label_projection() {
        assert!(verdicts_to_event_labels(&[], 10).iter().all(|l| *l == Label::Normal));
        let v = categorical_verdict(0, 4, &[0.9, 0.1], 1, 1);
        let labels = verdicts_to_event_labels(&[v], 6);
        let abnormal: Vec<usize> = (0..6).filter(|&i| labels[i].is_abnormal()).collect();
        assert_eq!(abnormal, vec![4]);
    }

    #[test]
    fn peer_aggregation() {
        let peers = [PeerRef(0), PeerRef(1), PeerRef(0)];
        let labels = [Label::Normal, Label::Normal, Label::Abnormal];
        let agg = aggregate_by_peer(&peers, &labels);
        assert_eq!(agg[&PeerRef(0)], Label::Abnormal);
        assert_eq!(agg[&PeerRef(1)], Label::Normal);
    }

    #[test]
    fn verdict_jsonl_round_trip() {
        let v = vec![
            categorical_verdict(0, 10, &[0.5, 0.3, 0.2], 2, 1),
            AnomalyVerdict {
                window_index: 1,
                target_index: 11,
                predicted: Forecast::Vector(vec![0.5, 0.25]),
                observed: Observed::Vector(vec![1.0, 0.0]),
                score: 0.5,
                flagged: true,
            },
        ];
        let mut buf = Vec::new();
        write_verdicts_jsonl(&mut buf, &v).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_verdicts_jsonl(&text).unwrap(), v);
    }

    #[test]
    fn config_checks() {
        assert!(DetectorConfig::categorical(5).validate(Some(4)).is_err());
        assert!(DetectorConfig::categorical(0).validate(None).is_err());
        let mut c = DetectorConfig::numeric();
        c.threshold_quantile = 0.0;
        assert!(c.validate(None).is_err());
        assert!(DetectorConfig::numeric().validate(None).is_ok());
    }

    proptest! {
        #[test]
        fn larger_k_never_flags_more(probs in prop::collection::vec(0.0f64..1.0, 2..12), obs in 0usize..12) {
            let obs = obs % probs.len();
            let mut prev = true;
            for k in 1..=probs.len() {
                let flagged = categorical_verdict(0, 0, &probs, obs, k).flagged;
                prop_assert!(prev || !flagged);
                prev = flagged;
            }
            prop_assert!(!prev);
        }

        #[test]
        fn quantile_within_range(values in prop::collection::vec(-1e3f64..1e3, 1..50), q in 0.0f64..=1.0) {
            let x = quantile(&values, q).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
        }
    }
}
