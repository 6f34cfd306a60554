//! Record-to-sequence preparation: cleaning, time binning, min-max scaling,
//! discovery-log tokenization and sliding windows.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{
    BinnedTraceVector, DiscoveryLogRecord, GossipTraceRecord, Label, LabeledToken, PeerRef, EVENT_KINDS,
};

pub const DEFAULT_BIN_MS: i64 = 300;
pub const DEFAULT_WINDOW: usize = 10;
pub const DEFAULT_STEP: usize = 1;
pub const DEFAULT_MIN_TOKEN_COUNT: usize = 1;
pub const DEFAULT_MAX_TOKEN_LEN: usize = 64;
/// Number of distinct recent IPs remembered when classifying novelty.
pub const NOVELTY_WINDOW: usize = 1024;
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("scaler is not fitted")]
    UnfittedScaler,
    #[error("feature width {found} does not match scaler width {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("no normal items available for training")]
    NoNormalData,
    #[error("records are not time-ordered at index {0}")]
    Unordered(usize),
    #[error("unsupported artifact version {0}")]
    Version(u32),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Validity and timing shared by both record kinds.
pub trait TimedRecord {
    fn timestamp_ms(&self) -> i64;
    fn is_valid(&self) -> bool;
}

impl TimedRecord for GossipTraceRecord {
    fn timestamp_ms(&self) -> i64 {
        self.timestamp_ms
    }

    fn is_valid(&self) -> bool {
        self.timestamp_ms >= 0
    }
}

impl TimedRecord for DiscoveryLogRecord {
    fn timestamp_ms(&self) -> i64 {
        self.timestamp_ms
    }

    fn is_valid(&self) -> bool {
        self.timestamp_ms >= 0 && self.bucket_in_range()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub kept: usize,
    pub dropped_invalid: usize,
    pub dropped_out_of_range: usize,
}

impl CleanReport {
    pub fn dropped(&self) -> usize {
        self.dropped_invalid + self.dropped_out_of_range
    }
}

/// Drop records that violate their type invariants or fall outside the
/// half-open time range `[start, end)`. Duplicates are kept.
pub fn clean<R: TimedRecord + Clone>(records: &[R], time_range: Option<(i64, i64)>) -> (Vec<R>, CleanReport) {
    let mut report = CleanReport::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if !r.is_valid() {
            report.dropped_invalid += 1;
        } else if time_range.is_some_and(|(lo, hi)| r.timestamp_ms() < lo || r.timestamp_ms() >= hi) {
            report.dropped_out_of_range += 1;
        } else {
            out.push(r.clone());
        }
    }
    report.kept = out.len();
    (out, report)
}

/// Count events per `(peer, bin)`.
///
/// Output is grouped by peer (ascending) and time-ordered within a peer.
/// Empty bins between a peer's first and last event are emitted as zero
/// vectors. A bin is honest only if every record in it is honest.
pub fn bin_traces(records: &[GossipTraceRecord], bin_ms: i64) -> Result<Vec<BinnedTraceVector>, PipelineError> {
    if bin_ms <= 0 {
        return Err(PipelineError::InvalidParameter(format!("bin width {bin_ms}")));
    }
    if let Some(i) = records.windows(2).position(|w| w[1].timestamp_ms < w[0].timestamp_ms) {
        return Err(PipelineError::Unordered(i + 1));
    }
    let mut per_peer: BTreeMap<PeerRef, BTreeMap<i64, BinnedTraceVector>> = BTreeMap::new();
    for r in records {
        let start = r.timestamp_ms.div_euclid(bin_ms) * bin_ms;
        let bin = per_peer
            .entry(r.peer)
            .or_default()
            .entry(start)
            .or_insert_with(|| BinnedTraceVector {
                bin_start_ms: start,
                counts: [0; EVENT_KINDS],
                peer: r.peer,
                honest: true,
            });
        bin.counts[usize::from(r.event.code())] += 1;
        bin.honest &= r.honest;
    }
    let mut out = Vec::new();
    for (peer, bins) in per_peer {
        let (Some(&first), Some(&last)) = (bins.keys().next(), bins.keys().next_back()) else {
            continue;
        };
        let mut filled = bins;
        let mut t = first;
        while t <= last {
            filled.entry(t).or_insert_with(|| BinnedTraceVector {
                bin_start_ms: t,
                counts: [0; EVENT_KINDS],
                peer,
                honest: true,
            });
            t += bin_ms;
        }
        out.extend(filled.into_values());
    }
    Ok(out)
}

/// Split binned vectors into per-peer sequences.
pub fn group_by_peer(bins: &[BinnedTraceVector]) -> BTreeMap<PeerRef, Vec<BinnedTraceVector>> {
    let mut out: BTreeMap<PeerRef, Vec<BinnedTraceVector>> = BTreeMap::new();
    for b in bins {
        out.entry(b.peer).or_default().push(b.clone());
    }
    out
}

/// Per-feature min-max scaler.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub version: u32,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

impl Scaler {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, PipelineError> {
        let first = rows.first().ok_or(PipelineError::NoNormalData)?;
        let width = first.len();
        let mut mins = vec![f64::INFINITY; width];
        let mut maxs = vec![f64::NEG_INFINITY; width];
        for row in rows {
            if row.len() != width {
                return Err(PipelineError::FeatureWidth {
                    expected: width,
                    found: row.len(),
                });
            }
            for (k, v) in row.iter().enumerate() {
                mins[k] = mins[k].min(*v);
                maxs[k] = maxs[k].max(*v);
            }
        }
        Ok(Scaler {
            version: ARTIFACT_VERSION,
            mins,
            maxs,
        })
    }

    pub fn width(&self) -> usize {
        self.mins.len()
    }

    fn check(&self, row: &[f64]) -> Result<(), PipelineError> {
        if self.mins.is_empty() {
            return Err(PipelineError::UnfittedScaler);
        }
        if row.len() != self.width() {
            return Err(PipelineError::FeatureWidth {
                expected: self.width(),
                found: row.len(),
            });
        }
        Ok(())
    }

    /// `(x - min) / (max - min)`, or 0 for a feature that was constant in
    /// training. Values outside the training range are not clipped.
    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>, PipelineError> {
        self.check(row)?;
        Ok(row
            .iter()
            .zip(self.mins.iter().zip(&self.maxs))
            .map(|(x, (lo, hi))| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
            .collect())
    }

    pub fn inverse(&self, row: &[f64]) -> Result<Vec<f64>, PipelineError> {
        self.check(row)?;
        Ok(row
            .iter()
            .zip(self.mins.iter().zip(&self.maxs))
            .map(|(x, (lo, hi))| if hi > lo { lo + x * (hi - lo) } else { *lo })
            .collect())
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, PipelineError> {
        rows.iter().map(|r| self.transform(r)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scaler serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let s: Scaler = serde_json::from_str(text)?;
        if s.version != ARTIFACT_VERSION {
            return Err(PipelineError::Version(s.version));
        }
        Ok(s)
    }
}

pub fn fit_scaler(train: &[Vec<f64>]) -> Result<Scaler, PipelineError> {
    Scaler::fit(train)
}

pub fn apply_scaler(scaler: &Scaler, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, PipelineError> {
    scaler.transform_all(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Novelty {
    FirstSeen,
    Repeat,
}

/// Tokenization key of one discovery record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenKey {
    pub bucket: u16,
    pub novelty: Novelty,
    pub evicted_nothing: bool,
}

impl TokenKey {
    pub fn render(&self, max_len: usize) -> String {
        let novelty = match self.novelty {
            Novelty::FirstSeen => "new",
            Novelty::Repeat => "seen",
        };
        let slot = if self.evicted_nothing { "free" } else { "evict" };
        let mut s = format!("b{}:{novelty}:{slot}", self.bucket);
        s.truncate(max_len);
        s
    }
}

/// FIFO memory of the last `capacity` distinct IPs.
#[derive(Debug, Clone)]
pub struct NoveltyTracker {
    capacity: usize,
    order: VecDeque<Ipv4Addr>,
    members: HashSet<Ipv4Addr>,
}

impl NoveltyTracker {
    pub fn new(capacity: usize) -> Self {
        NoveltyTracker {
            capacity,
            order: VecDeque::new(),
            members: HashSet::new(),
        }
    }

    pub fn observe(&mut self, ip: Ipv4Addr) -> Novelty {
        if self.members.contains(&ip) {
            return Novelty::Repeat;
        }
        self.members.insert(ip);
        self.order.push_back(ip);
        if self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.members.remove(&old);
            }
        }
        Novelty::FirstSeen
    }
}

/// Token keys for a record stream, classifying added-IP novelty in order.
pub fn token_keys(records: &[DiscoveryLogRecord]) -> Vec<TokenKey> {
    let mut tracker = NoveltyTracker::new(NOVELTY_WINDOW);
    records
        .iter()
        .map(|r| TokenKey {
            bucket: r.bucket,
            novelty: tracker.observe(*r.added.ip()),
            evicted_nothing: r.evicted_nothing(),
        })
        .collect()
}

/// Dense token ids for rendered keys; the last id is the out-of-vocabulary
/// token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub version: u32,
    pub min_token_count: usize,
    pub max_token_len: usize,
    /// Keys in id order.
    pub keys: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Fit on training keys. Keys seen fewer than `min_token_count` times map
    /// to OOV. Ids follow first appearance.
    pub fn fit(keys: &[TokenKey], min_token_count: usize, max_token_len: usize) -> Result<Self, PipelineError> {
        if max_token_len == 0 {
            return Err(PipelineError::InvalidParameter("max_token_len must be positive".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        for k in keys {
            let s = k.render(max_token_len);
            let c = counts.entry(s.clone()).or_insert(0);
            if *c == 0 {
                order.push(s);
            }
            *c += 1;
        }
        let kept: Vec<String> = order.into_iter().filter(|s| counts[s] >= min_token_count).collect();
        Ok(Self::from_keys(kept, min_token_count, max_token_len))
    }

    fn from_keys(keys: Vec<String>, min_token_count: usize, max_token_len: usize) -> Self {
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Vocabulary {
            version: ARTIFACT_VERSION,
            min_token_count,
            max_token_len,
            keys,
            index,
        }
    }

    /// Number of ids including OOV.
    pub fn size(&self) -> usize {
        self.keys.len() + 1
    }

    pub fn oov_id(&self) -> usize {
        self.keys.len()
    }

    pub fn id_of(&self, key: &TokenKey) -> usize {
        self.index
            .get(&key.render(self.max_token_len))
            .copied()
            .unwrap_or(self.oov_id())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let v: Vocabulary = serde_json::from_str(text)?;
        if v.version != ARTIFACT_VERSION {
            return Err(PipelineError::Version(v.version));
        }
        Ok(Self::from_keys(v.keys, v.min_token_count, v.max_token_len))
    }
}

/// Map records to labeled tokens with a fitted vocabulary.
pub fn tokenize_discovery(records: &[DiscoveryLogRecord], vocab: &Vocabulary) -> Vec<LabeledToken> {
    token_keys(records)
        .iter()
        .zip(records)
        .map(|(k, r)| LabeledToken {
            token_id: vocab.id_of(k),
            label: r.label,
        })
        .collect()
}

/// Fit a vocabulary on `records` and tokenize them with it.
pub fn fit_tokenize_discovery(
    records: &[DiscoveryLogRecord],
    min_token_count: usize,
    max_token_len: usize,
) -> Result<(Vec<LabeledToken>, Vocabulary), PipelineError> {
    let vocab = Vocabulary::fit(&token_keys(records), min_token_count, max_token_len)?;
    Ok((tokenize_discovery(records, &vocab), vocab))
}

/// One window: the `m` items before `target_index` and the item at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window<T> {
    pub inputs: Vec<T>,
    pub target: T,
    pub target_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSet<T> {
    pub window_size: usize,
    pub step_size: usize,
    pub windows: Vec<Window<T>>,
}

/// Closed-form number of windows for a sequence of length `len`.
pub fn window_count(len: usize, m: usize, s: usize) -> usize {
    if len <= m {
        0
    } else {
        (len - 1 - m) / s + 1
    }
}

/// Windows for targets `t = m, m + s, m + 2s, ... <= len - 1`.
pub fn make_windows<T: Clone>(seq: &[T], m: usize, s: usize) -> Result<WindowSet<T>, PipelineError> {
    if m == 0 || s == 0 {
        return Err(PipelineError::InvalidParameter(format!(
            "window size {m} and step size {s} must be at least 1"
        )));
    }
    let windows = (m..seq.len())
        .step_by(s)
        .map(|t| Window {
            inputs: seq[t - m..t].to_vec(),
            target: seq[t].clone(),
            target_index: t,
        })
        .collect();
    Ok(WindowSet {
        window_size: m,
        step_size: s,
        windows,
    })
}

/// Normal-only training items and the remaining labeled items.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEvalSplit<T> {
    pub train: Vec<T>,
    pub eval: Vec<T>,
}

/// Time-ordered split: the first `floor(train_fraction * n_normal)` normal
/// items form the training set and everything else, abnormal items
/// included, goes to evaluation.
pub fn split_train_eval<T>(
    items: Vec<T>,
    train_fraction: f64,
    label_of: impl Fn(&T) -> Label,
) -> Result<TrainEvalSplit<T>, PipelineError> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(PipelineError::InvalidParameter(format!(
            "train fraction {train_fraction}"
        )));
    }
    let n_normal = items.iter().filter(|i| !label_of(i).is_abnormal()).count();
    if n_normal == 0 {
        return Err(PipelineError::NoNormalData);
    }
    let quota = (train_fraction * n_normal as f64).floor() as usize;
    let mut split = TrainEvalSplit {
        train: Vec::with_capacity(quota),
        eval: Vec::new(),
    };
    for item in items {
        if split.train.len() < quota && !label_of(&item).is_abnormal() {
            split.train.push(item);
        } else {
            split.eval.push(item);
        }
    }
    Ok(split)
}
