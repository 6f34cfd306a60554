//! End-to-end experiment wiring: configuration, presets and the five stages
//! (simulate, prepare, train, detect, evaluate) with their on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{
    aggregate_by_peer, calibrate_threshold, detect_categorical, detect_numeric, verdicts_to_event_labels,
    write_verdicts_jsonl, DetectorConfig, DetectorError, DetectorMode,
};
use crate::eval::{self, confusion, ConfusionCounts, MetricRow, Metrics};
use crate::events::{self, EventsError, Label, PeerRef, EVENT_KINDS};
use crate::netsim::{self, run_simulation, Scenario, SimConfig, SimError, SimManifest};
use crate::nn::{
    self, load_checkpoint, save_checkpoint, DenseWindows, HeadKind, LossKind, ModelInput, ModelSpec, NnError,
    SequenceModel, TokenWindows, TrainConfig, WindowData,
};
use crate::pipeline::{
    self, bin_traces, clean, split_train_eval, token_keys, CleanReport, PipelineError, Scaler, Vocabulary,
    ARTIFACT_VERSION,
};

pub const TRACES_FILE: &str = "traces.csv";
pub const DISCOVERY_FILE: &str = "discovery.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEQUENCES_FILE: &str = "sequences.json";
pub const SCALER_FILE: &str = "scaler.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const VERDICTS_FILE: &str = "verdicts.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const DETECTION_FILE: &str = "detection.json";
pub const REPORT_MD_FILE: &str = "report.md";
pub const REPORT_CSV_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Events(#[from] EventsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

impl ExperimentError {
    /// Configuration problems, as opposed to failures while running a stage.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::UnknownPreset(_)
                | ExperimentError::Sim(SimError::InvalidConfig(_))
        )
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn default_bin() -> i64 {
    pipeline::DEFAULT_BIN_MS
}
fn default_window() -> usize {
    pipeline::DEFAULT_WINDOW
}
fn default_step() -> usize {
    pipeline::DEFAULT_STEP
}
fn default_min_count() -> usize {
    pipeline::DEFAULT_MIN_TOKEN_COUNT
}
fn default_max_len() -> usize {
    pipeline::DEFAULT_MAX_TOKEN_LEN
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_validation_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_bin")]
    pub bin_ms: i64,
    #[serde(default = "default_window")]
    pub window_size: usize,
    #[serde(default = "default_step")]
    pub step_size: usize,
    #[serde(default = "default_min_count")]
    pub min_token_count: usize,
    #[serde(default = "default_max_len")]
    pub max_token_len: usize,
    /// Share of the clean (all-normal) windows used for fitting.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Tail of the fitting windows held out for early stopping and
    /// threshold calibration.
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    /// Optional `[start, end)` filter applied while cleaning.
    #[serde(default)]
    pub time_range_ms: Option<(i64, i64)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// LSTM shape and optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHyperparameters {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_directions: usize,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
}

impl ModelHyperparameters {
    /// Values used for simulated gossip traces.
    pub fn testground() -> Self {
        ModelHyperparameters {
            hidden_size: 20,
            num_layers: 2,
            num_directions: 2,
            embedding_dim: 5,
            epochs: 100,
            batch_size: 1000,
            learning_rate: 0.01,
            patience: 5,
        }
    }

    /// Values used for discovery logs.
    pub fn mainnet() -> Self {
        ModelHyperparameters {
            hidden_size: 128,
            num_layers: 2,
            num_directions: 2,
            embedding_dim: 10,
            epochs: 100,
            batch_size: 1024,
            learning_rate: 0.01,
            patience: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Global seed; replaces the simulator and training seeds.
    pub seed: u64,
    pub sim: SimConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    pub model: ModelHyperparameters,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Simulator config with the global seed applied.
    pub fn effective_sim(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            ..self.sim.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.model.epochs,
            batch_size: self.model.batch_size,
            learning_rate: self.model.learning_rate,
            patience: self.model.patience,
            random_seed: self.seed,
            loss: match self.detector.mode {
                DetectorMode::Numeric => LossKind::Mse,
                DetectorMode::Categorical => LossKind::CrossEntropy,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        self.effective_sim().validate()?;
        let p = &self.pipeline;
        if p.bin_ms <= 0 {
            return bad("pipeline.bin_ms must be positive");
        }
        if p.window_size == 0 || p.step_size == 0 {
            return bad("pipeline.window_size and pipeline.step_size must be at least 1");
        }
        if p.max_token_len == 0 {
            return bad("pipeline.max_token_len must be positive");
        }
        if !(p.train_fraction > 0.0 && p.train_fraction <= 1.0) {
            return bad("pipeline.train_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&p.validation_fraction) {
            return bad("pipeline.validation_fraction must lie in [0, 1)");
        }
        if matches!(p.time_range_ms, Some((lo, hi)) if lo >= hi) {
            return bad("pipeline.time_range_ms must be an increasing pair");
        }
        self.train_config().validate()?;
        let m = &self.model;
        if m.hidden_size == 0 || m.num_layers == 0 || !(1..=2).contains(&m.num_directions) {
            return bad("model needs hidden_size >= 1, num_layers >= 1 and num_directions in {1, 2}");
        }
        if self.detector.mode == DetectorMode::Categorical && m.embedding_dim == 0 {
            return bad("model.embedding_dim must be positive for categorical data");
        }
        self.detector.validate(None)?;
        let discovery = self.sim.scenario == Scenario::DiscoveryPoisoning;
        if discovery != (self.detector.mode == DetectorMode::Categorical) {
            return bad("discovery-poisoning data needs the categorical detector and gossip traces the numeric one");
        }
        Ok(())
    }
}

pub const PRESET_NAMES: [&str; 7] = [
    "eclipse-single",
    "covert",
    "eclipse-net",
    "discovery-poisoning",
    "eclipse-single-half",
    "covert-half",
    "eclipse-net-half",
];

pub fn experiment_preset(name: &str) -> Result<ExperimentConfig> {
    let sim = netsim::preset(name).ok_or_else(|| ExperimentError::UnknownPreset(name.to_string()))?;
    let discovery = sim.scenario == Scenario::DiscoveryPoisoning;
    let (model, detector, pipeline) = if discovery {
        let pipeline = PipelineConfig {
            train_fraction: 0.55,
            ..PipelineConfig::default()
        };
        (
            ModelHyperparameters::mainnet(),
            DetectorConfig::categorical(5),
            pipeline,
        )
    } else {
        let mut det = DetectorConfig::numeric();
        det.aggregate_per_peer = sim.n_victims > 1;
        (ModelHyperparameters::testground(), det, PipelineConfig::default())
    };
    Ok(ExperimentConfig {
        name: name.to_string(),
        seed: sim.seed,
        sim,
        pipeline,
        model,
        detector,
        out_dir: None,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Config echo, simulator summary and content digests of every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub simulation: SimManifest,
    pub artifacts: BTreeMap<String, String>,
}

fn update_manifest(out: &Path, names: &[&str]) -> Result<()> {
    let path = out.join(MANIFEST_FILE);
    let mut manifest: Manifest = read_json(&path)?;
    for name in names {
        let file = out.join(name);
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        manifest.artifacts.insert(name.to_string(), netsim::sha256_hex(&bytes));
    }
    write_file(&path, manifest_json(&manifest).as_bytes())
}

fn manifest_json(m: &Manifest) -> String {
    serde_json::to_string_pretty(m).expect("manifest serializes") + "\n"
}

pub fn read_manifest(out: &Path) -> Result<Manifest> {
    read_json(&out.join(MANIFEST_FILE))
}

fn ensure_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub trace_records: usize,
    pub discovery_records: usize,
    pub abnormal_records: usize,
}

pub fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<SimulateSummary> {
    config.validate()?;
    ensure_dir(out)?;
    let sim = run_simulation(&config.effective_sim())?;
    write_file(&out.join(TRACES_FILE), &events::traces_to_bytes(&sim.traces))?;
    write_file(&out.join(DISCOVERY_FILE), &events::discovery_to_bytes(&sim.discovery))?;
    let manifest = Manifest {
        config: config.clone(),
        simulation: sim.manifest.clone(),
        artifacts: BTreeMap::new(),
    };
    write_file(&out.join(MANIFEST_FILE), manifest_json(&manifest).as_bytes())?;
    update_manifest(out, &[TRACES_FILE, DISCOVERY_FILE])?;
    let abnormal = sim.traces.iter().filter(|r| !r.honest).count()
        + sim.discovery.iter().filter(|r| r.label.is_abnormal()).count();
    Ok(SimulateSummary {
        trace_records: sim.traces.len(),
        discovery_records: sim.discovery.len(),
        abnormal_records: abnormal,
    })
}

/// One scored unit: a binned trace vector or a discovery record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedItem {
    pub peer: u32,
    pub time_ms: i64,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counts: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<usize>,
}

/// Model-ready data: items grouped into contiguous per-peer sequences and
/// window target indices split into training, validation and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedData {
    pub version: u32,
    pub mode: DetectorMode,
    pub window_size: usize,
    pub step_size: usize,
    pub clean_report: CleanReport,
    pub items: Vec<PreparedItem>,
    /// `[start, end)` item ranges, one per peer.
    pub sequences: Vec<(usize, usize)>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub eval: Vec<usize>,
}

impl PreparedData {
    /// Target indices of every window, ordered by target time then peer.
    fn window_targets(&self) -> Vec<usize> {
        let mut targets = Vec::new();
        for &(start, end) in &self.sequences {
            let len = end - start;
            let set = pipeline::make_windows(&(0..len).collect::<Vec<_>>(), self.window_size, self.step_size)
                .expect("window parameters validated");
            targets.extend(set.windows.iter().map(|w| start + w.target_index));
        }
        targets.sort_by_key(|&t| (self.items[t].time_ms, self.items[t].peer, t));
        targets
    }

    /// True when the window ending at `target` touches an abnormal item.
    fn contaminated(&self, target: usize) -> bool {
        self.items[target - self.window_size..=target]
            .iter()
            .any(|i| i.label.is_abnormal())
    }

    fn assign_split(&mut self, p: &PipelineConfig) -> Result<()> {
        let targets = self.window_targets();
        let split = split_train_eval(targets, p.train_fraction, |&t| {
            if self.contaminated(t) {
                Label::Abnormal
            } else {
                Label::Normal
            }
        })?;
        let mut fit = split.train;
        let n_val = ((fit.len() as f64) * p.validation_fraction).floor() as usize;
        let n_val = n_val.min(fit.len().saturating_sub(1));
        self.validation = fit.split_off(fit.len() - n_val);
        self.train = fit;
        self.eval = split.eval;
        if self.train.is_empty() {
            return Err(PipelineError::NoNormalData.into());
        }
        Ok(())
    }

    /// Items covered by fitting windows (normal by construction).
    fn fitting_items(&self) -> Vec<usize> {
        let mut covered = vec![false; self.items.len()];
        for &t in self.train.iter().chain(&self.validation) {
            for c in &mut covered[t - self.window_size..=t] {
                *c = true;
            }
        }
        (0..self.items.len()).filter(|&i| covered[i]).collect()
    }

    pub fn dense_windows(&self, scaled: &[Vec<f64>], targets: &[usize]) -> DenseWindows {
        let mut w = DenseWindows {
            steps: self.window_size,
            features: EVENT_KINDS,
            ..Default::default()
        };
        for &t in targets {
            w.push(&scaled[t - self.window_size..t], &scaled[t]);
        }
        w
    }

    pub fn token_windows(&self, targets: &[usize]) -> TokenWindows {
        let tokens: Vec<usize> = self.items.iter().map(|i| i.token.unwrap_or(0)).collect();
        let mut w = TokenWindows {
            steps: self.window_size,
            ..Default::default()
        };
        for &t in targets {
            w.push(&tokens[t - self.window_size..t], tokens[t]);
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub items: usize,
    pub train_windows: usize,
    pub validation_windows: usize,
    pub eval_windows: usize,
    pub dropped_records: usize,
    pub vocabulary_size: Option<usize>,
}

pub fn cmd_prepare(config: &ExperimentConfig, out: &Path) -> Result<PrepareSummary> {
    config.validate()?;
    let p = &config.pipeline;
    let mut artifacts = vec![SEQUENCES_FILE];
    let mut vocabulary_size = None;
    let prepared = match config.detector.mode {
        DetectorMode::Numeric => {
            let path = out.join(TRACES_FILE);
            let records = events::parse_traces(read_text(&path)?.as_bytes())?;
            let (records, report) = clean(&records, p.time_range_ms);
            let bins = bin_traces(&records, p.bin_ms)?;
            let items: Vec<PreparedItem> = bins
                .iter()
                .map(|b| PreparedItem {
                    peer: b.peer.0,
                    time_ms: b.bin_start_ms,
                    label: b.label(),
                    counts: b.counts.to_vec(),
                    token: None,
                })
                .collect();
            let mut prepared = new_prepared(config, report, items);
            prepared.assign_split(p)?;
            let rows: Vec<Vec<f64>> = prepared
                .fitting_items()
                .iter()
                .map(|&i| counts_as_f64(&prepared.items[i]))
                .collect();
            let scaler = Scaler::fit(&rows)?;
            write_file(&out.join(SCALER_FILE), scaler.to_json().as_bytes())?;
            artifacts.push(SCALER_FILE);
            prepared
        }
        DetectorMode::Categorical => {
            let path = out.join(DISCOVERY_FILE);
            let records = events::parse_discovery(read_text(&path)?.as_bytes())?;
            let (records, report) = clean(&records, p.time_range_ms);
            let keys = token_keys(&records);
            let items: Vec<PreparedItem> = records
                .iter()
                .map(|r| PreparedItem {
                    peer: 0,
                    time_ms: r.timestamp_ms,
                    label: r.label,
                    counts: Vec::new(),
                    token: None,
                })
                .collect();
            let mut prepared = new_prepared(config, report, items);
            prepared.assign_split(p)?;
            let fit_keys: Vec<_> = prepared.fitting_items().iter().map(|&i| keys[i]).collect();
            let vocab = Vocabulary::fit(&fit_keys, p.min_token_count, p.max_token_len)?;
            for (item, key) in prepared.items.iter_mut().zip(&keys) {
                item.token = Some(vocab.id_of(key));
            }
            config.detector.validate(Some(vocab.size()))?;
            vocabulary_size = Some(vocab.size());
            write_file(&out.join(VOCAB_FILE), vocab.to_json().as_bytes())?;
            artifacts.push(VOCAB_FILE);
            prepared
        }
    };
    let text = serde_json::to_string(&prepared).expect("prepared data serializes");
    write_file(&out.join(SEQUENCES_FILE), text.as_bytes())?;
    update_manifest(out, &artifacts)?;
    Ok(PrepareSummary {
        items: prepared.items.len(),
        train_windows: prepared.train.len(),
        validation_windows: prepared.validation.len(),
        eval_windows: prepared.eval.len(),
        dropped_records: prepared.clean_report.dropped(),
        vocabulary_size,
    })
}

fn counts_as_f64(item: &PreparedItem) -> Vec<f64> {
    item.counts.iter().map(|&c| f64::from(c)).collect()
}

fn new_prepared(config: &ExperimentConfig, clean_report: CleanReport, items: Vec<PreparedItem>) -> PreparedData {
    let mut sequences = Vec::new();
    let mut start = 0;
    for i in 1..=items.len() {
        if i == items.len() || items[i].peer != items[start].peer {
            sequences.push((start, i));
            start = i;
        }
    }
    PreparedData {
        version: ARTIFACT_VERSION,
        mode: config.detector.mode,
        window_size: config.pipeline.window_size,
        step_size: config.pipeline.step_size,
        clean_report,
        items,
        sequences,
        train: Vec::new(),
        validation: Vec::new(),
        eval: Vec::new(),
    }
}

fn load_prepared(out: &Path) -> Result<PreparedData> {
    let prepared: PreparedData = read_json(&out.join(SEQUENCES_FILE))?;
    if prepared.version != ARTIFACT_VERSION {
        return Err(PipelineError::Version(prepared.version).into());
    }
    Ok(prepared)
}

/// Scaled feature vectors of every item.
fn scaled_items(out: &Path, prepared: &PreparedData) -> Result<Vec<Vec<f64>>> {
    let scaler = Scaler::from_json(&read_text(&out.join(SCALER_FILE))?)?;
    Ok(prepared
        .items
        .iter()
        .map(|i| scaler.transform(&counts_as_f64(i)))
        .collect::<std::result::Result<_, _>>()?)
}

fn window_data(out: &Path, prepared: &PreparedData, sets: &[&[usize]]) -> Result<Vec<WindowData>> {
    match prepared.mode {
        DetectorMode::Numeric => {
            let scaled = scaled_items(out, prepared)?;
            Ok(sets
                .iter()
                .map(|t| WindowData::Dense(prepared.dense_windows(&scaled, t)))
                .collect())
        }
        DetectorMode::Categorical => Ok(sets
            .iter()
            .map(|t| WindowData::Tokens(prepared.token_windows(t)))
            .collect()),
    }
}

pub fn model_spec(config: &ExperimentConfig, vocabulary_size: Option<usize>) -> ModelSpec {
    let m = &config.model;
    let (input, output_dim, head) = match (config.detector.mode, vocabulary_size) {
        (DetectorMode::Categorical, Some(v)) => (
            ModelInput::Tokens {
                vocab_size: v,
                embedding_dim: m.embedding_dim,
            },
            v,
            HeadKind::Classification,
        ),
        _ => (
            ModelInput::Features { count: EVENT_KINDS },
            EVENT_KINDS,
            HeadKind::Regression,
        ),
    };
    ModelSpec {
        input,
        hidden_size: m.hidden_size,
        num_layers: m.num_layers,
        num_directions: m.num_directions,
        output_dim,
        head,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub best_validation_loss: f64,
}

pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    config.validate()?;
    let prepared = load_prepared(out)?;
    let vocab_size = match prepared.mode {
        DetectorMode::Categorical => Some(Vocabulary::from_json(&read_text(&out.join(VOCAB_FILE))?)?.size()),
        DetectorMode::Numeric => None,
    };
    let data = window_data(out, &prepared, &[&prepared.train, &prepared.validation])?;
    let mut model = SequenceModel::init(model_spec(config, vocab_size), config.seed)?;
    let history = nn::train(&mut model, &data[0], &data[1], &config.train_config())?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(HISTORY_FILE), history.to_csv().as_bytes())?;
    update_manifest(out, &[CHECKPOINT_FILE, HISTORY_FILE])?;
    let best = history
        .epochs
        .iter()
        .find(|e| e.epoch == history.best_epoch)
        .map_or(f64::NAN, |e| e.validation_loss);
    Ok(TrainSummary {
        epochs_run: history.epochs.len(),
        best_epoch: history.best_epoch,
        stopped_early: history.stopped_early,
        best_validation_loss: best,
    })
}

/// Decision parameters used by a detect run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionInfo {
    pub mode: DetectorMode,
    pub threshold: Option<f64>,
    pub k: Option<usize>,
    pub scored: usize,
    pub flagged: usize,
}

pub fn cmd_detect(config: &ExperimentConfig, out: &Path) -> Result<DetectionInfo> {
    config.validate()?;
    let prepared = load_prepared(out)?;
    let model = load_checkpoint(&out.join(CHECKPOINT_FILE))?;
    let data = window_data(out, &prepared, &[&prepared.validation, &prepared.train, &prepared.eval])?;
    let (verdicts, threshold, k) = match (&data[0], &data[1], &data[2]) {
        (WindowData::Dense(val), WindowData::Dense(train), WindowData::Dense(eval)) => {
            let calibration = if val.is_empty() { train } else { val };
            let threshold = calibrate_threshold(&model, calibration, config.detector.threshold_quantile)?;
            (
                detect_numeric(&model, eval, &prepared.eval, threshold)?,
                Some(threshold),
                None,
            )
        }
        (_, _, WindowData::Tokens(eval)) => {
            config.detector.validate(Some(model.spec.output_dim))?;
            let k = config.detector.k;
            (detect_categorical(&model, eval, &prepared.eval, k)?, None, Some(k))
        }
        _ => unreachable!("window kinds follow the prepared mode"),
    };

    let mut buf = Vec::new();
    write_verdicts_jsonl(&mut buf, &verdicts)?;
    write_file(&out.join(VERDICTS_FILE), &buf)?;

    let predicted = verdicts_to_event_labels(&verdicts, prepared.items.len());
    let mut scored = vec![false; prepared.items.len()];
    for &t in &prepared.eval {
        scored[t] = true;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "peer", "time_ms", "label", "predicted", "scored"])
        .map_err(EventsError::from)?;
    for (i, item) in prepared.items.iter().enumerate() {
        w.write_record([
            i.to_string(),
            item.peer.to_string(),
            item.time_ms.to_string(),
            item.label.to_string(),
            predicted[i].to_string(),
            scored[i].to_string(),
        ])
        .map_err(EventsError::from)?;
    }
    let bytes = w.into_inner().map_err(|e| EventsError::Csv(e.into_error().into()))?;
    write_file(&out.join(PREDICTIONS_FILE), &bytes)?;

    let info = DetectionInfo {
        mode: prepared.mode,
        threshold,
        k,
        scored: verdicts.len(),
        flagged: verdicts.iter().filter(|v| v.flagged).count(),
    };
    let text = serde_json::to_string_pretty(&info).expect("detection info serializes") + "\n";
    write_file(&out.join(DETECTION_FILE), text.as_bytes())?;
    update_manifest(out, &[VERDICTS_FILE, PREDICTIONS_FILE, DETECTION_FILE])?;
    Ok(info)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub peer: u32,
    pub time_ms: i64,
    pub label: String,
    pub predicted: String,
    pub scored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub confusion: ConfusionCounts,
    pub metrics: Metrics,
    pub peer_confusion: Option<ConfusionCounts>,
}

fn parse_label(s: &str) -> Result<Label> {
    s.parse().map_err(ExperimentError::Events)
}

pub fn cmd_evaluate(config: &ExperimentConfig, out: &Path) -> Result<EvaluationSummary> {
    config.validate()?;
    let text = read_text(&out.join(PREDICTIONS_FILE))?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let (mut predicted, mut truth, mut peers) = (Vec::new(), Vec::new(), Vec::new());
    for row in reader.deserialize::<PredictionRow>() {
        let row = row.map_err(EventsError::from)?;
        if row.scored {
            predicted.push(parse_label(&row.predicted)?);
            truth.push(parse_label(&row.label)?);
            peers.push(PeerRef(row.peer));
        }
    }
    let counts = confusion(&predicted, &truth)?;
    let sim = &config.sim;
    let mut rows = vec![MetricRow::measured(
        &config.name,
        Some(sim.n_attackers),
        Some(sim.n_victims),
        &counts,
    )];
    let peer_confusion = if config.detector.aggregate_per_peer {
        let p = aggregate_by_peer(&peers, &predicted);
        let t = aggregate_by_peer(&peers, &truth);
        let c = confusion(
            &p.into_values().collect::<Vec<_>>(),
            &t.into_values().collect::<Vec<_>>(),
        )?;
        rows.push(MetricRow::measured(
            &format!("{} (per peer)", config.name),
            Some(sim.n_attackers),
            Some(sim.n_victims),
            &c,
        ));
        Some(c)
    } else {
        None
    };
    let (unit, references) = match config.detector.mode {
        DetectorMode::Numeric => (
            "300 ms binned trace vector of one monitored peer",
            eval::gossip_reference_rows(),
        ),
        DetectorMode::Categorical => ("discovery table insertion record", eval::discovery_reference_rows()),
    };
    rows.extend(references);
    let note = format!(
        "Metrics are record-level: one scored unit is a {unit} that is the target of an evaluation window \
         (TP={}, FP={}, TN={}, FN={}). Rows marked published-reference are external results shown for \
         comparison and were not produced by this run.",
        counts.tp, counts.fp, counts.tn, counts.fn_
    );
    let md = format!("# {}\n\n{}", config.name, eval::render_markdown(&rows, Some(&note)));
    write_file(&out.join(REPORT_MD_FILE), md.as_bytes())?;
    write_file(&out.join(REPORT_CSV_FILE), eval::render_csv(&rows).as_bytes())?;
    update_manifest(out, &[REPORT_MD_FILE, REPORT_CSV_FILE])?;
    Ok(EvaluationSummary {
        confusion: counts,
        metrics: eval::metrics(&counts),
        peer_confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub simulate: SimulateSummary,
    pub prepare: PrepareSummary,
    pub train: TrainSummary,
    pub detect: DetectionInfo,
    pub evaluate: EvaluationSummary,
}

/// Run every stage in order into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    Ok(ExperimentSummary {
        simulate: cmd_simulate(config, out)?,
        prepare: cmd_prepare(config, out)?,
        train: cmd_train(config, out)?,
        detect: cmd_detect(config, out)?,
        evaluate: cmd_evaluate(config, out)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_gossip() -> ExperimentConfig {
        let mut c = experiment_preset("eclipse-single").unwrap();
        c.sim.n_honest = 12;
        c.sim.n_attackers = 20;
        c.sim.duration_ms = 60_000;
        c.sim.warmup_ms = 2_000;
        c.sim.attack_start_ms = Some(40_000);
        c.model.hidden_size = 4;
        c.model.epochs = 3;
        c
    }

    #[test]
    fn presets_carry_table_values() {
        let e = experiment_preset("eclipse-single").unwrap();
        assert_eq!(
            (e.model.hidden_size, e.model.batch_size, e.model.patience, e.seed),
            (20, 1000, 5, 50)
        );
        let d = experiment_preset("discovery-poisoning").unwrap();
        assert_eq!(
            (
                d.model.hidden_size,
                d.model.embedding_dim,
                d.detector.k,
                d.model.patience,
                d.seed
            ),
            (128, 10, 5, 30, 42)
        );
        for name in PRESET_NAMES {
            experiment_preset(name).unwrap().validate().unwrap();
        }
        assert!(matches!(
            experiment_preset("nope"),
            Err(ExperimentError::UnknownPreset(_))
        ));
    }

    #[test]
    fn config_rejects_unknown_keys_and_mismatched_modes() {
        let c = tiny_gossip();
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string())
            .unwrap_err()
            .is_config_error());
        let mut bad = c.clone();
        bad.detector = DetectorConfig::categorical(5);
        assert!(bad.validate().is_err());
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn tiny_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_gossip();
        let summary = run_experiment(&c, dir.path()).unwrap();
        assert!(summary.prepare.train_windows > 0);
        assert!(summary.train.epochs_run <= 3);
        let manifest = read_manifest(dir.path()).unwrap();
        for f in [
            TRACES_FILE,
            SEQUENCES_FILE,
            SCALER_FILE,
            CHECKPOINT_FILE,
            VERDICTS_FILE,
            REPORT_CSV_FILE,
        ] {
            assert!(manifest.artifacts.contains_key(f), "{f}");
        }
        let prepared = load_prepared(dir.path()).unwrap();
        for &t in prepared.train.iter().chain(&prepared.validation) {
            assert!(!prepared.contaminated(t));
        }
        let report = fs::read_to_string(dir.path().join(REPORT_MD_FILE)).unwrap();
        assert!(report.contains("published-reference"));
    }

    #[test]
    fn missing_artifacts_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_train(&tiny_gossip(), dir.path()).unwrap_err();
        assert!(matches!(err, ExperimentError::MissingArtifact(_)));
        assert!(!err.is_config_error());
    }
}
