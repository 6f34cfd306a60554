//! Record types shared by the simulator and the detection pipeline, plus
//! their CSV encodings.
//!
//! Two record streams exist: gossip trace events observed at a monitored
//! node, and peer-table replacement events from the discovery layer. Both
//! carry a ground-truth label that is only used for evaluation.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of gossip event kinds (codes `0..=12`).
pub const EVENT_KINDS: usize = 13;

/// Header of `traces.csv`.
pub const TRACE_HEADER: [&str; 4] = ["timestamp_ms", "peer", "event_code", "honest"];

/// Header of `discovery.csv`.
pub const DISCOVERY_HEADER: [&str; 7] = [
    "timestamp_ms",
    "removed_ip",
    "removed_port",
    "added_ip",
    "added_port",
    "bucket",
    "label",
];

/// Endpoint used in the "removed" slot when an insertion evicted nobody.
pub const SENTINEL_ENDPOINT: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0);

#[derive(Debug, Error)]
pub enum EventsError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("unexpected header: expected `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("unknown gossip event code {0}")]
    UnknownEventCode(i64),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
}

/// Gossipsub trace event kinds, in trace-enum order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum GossipEventType {
    PublishMessage = 0,
    RejectMessage = 1,
    DuplicateMessage = 2,
    DeliverMessage = 3,
    AddPeer = 4,
    RemovePeer = 5,
    RecvRpc = 6,
    SendRpc = 7,
    DropRpc = 8,
    Join = 9,
    Leave = 10,
    Graft = 11,
    Prune = 12,
}

impl GossipEventType {
    pub const ALL: [GossipEventType; EVENT_KINDS] = [
        GossipEventType::PublishMessage,
        GossipEventType::RejectMessage,
        GossipEventType::DuplicateMessage,
        GossipEventType::DeliverMessage,
        GossipEventType::AddPeer,
        GossipEventType::RemovePeer,
        GossipEventType::RecvRpc,
        GossipEventType::SendRpc,
        GossipEventType::DropRpc,
        GossipEventType::Join,
        GossipEventType::Leave,
        GossipEventType::Graft,
        GossipEventType::Prune,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Result<Self, EventsError> {
        usize::try_from(code)
            .ok()
            .and_then(|c| Self::ALL.get(c).copied())
            .ok_or(EventsError::UnknownEventCode(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            GossipEventType::PublishMessage => "PublishMessage",
            GossipEventType::RejectMessage => "RejectMessage",
            GossipEventType::DuplicateMessage => "DuplicateMessage",
            GossipEventType::DeliverMessage => "DeliverMessage",
            GossipEventType::AddPeer => "AddPeer",
            GossipEventType::RemovePeer => "RemovePeer",
            GossipEventType::RecvRpc => "RecvRPC",
            GossipEventType::SendRpc => "SendRPC",
            GossipEventType::DropRpc => "DropRPC",
            GossipEventType::Join => "Join",
            GossipEventType::Leave => "Leave",
            GossipEventType::Graft => "Graft",
            GossipEventType::Prune => "Prune",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name)
    }
}

impl fmt::Display for GossipEventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Index of a simulated peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct PeerRef(pub u32);

impl fmt::Display for PeerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ground-truth class of a record. `Abnormal` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }

    pub fn from_honest(honest: bool) -> Self {
        if honest {
            Label::Normal
        } else {
            Label::Abnormal
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = EventsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Label::Normal),
            "abnormal" => Ok(Label::Abnormal),
            other => Err(EventsError::UnknownLabel(other.to_string())),
        }
    }
}

/// One gossip event observed at a monitored node.
///
/// `peer` is the monitored node whose tracer emitted the event. `honest` is
/// false when the remote side of the event is an attacker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GossipTraceRecord {
    pub timestamp_ms: i64,
    pub peer: PeerRef,
    pub event: GossipEventType,
    pub honest: bool,
}

impl GossipTraceRecord {
    pub fn label(&self) -> Label {
        Label::from_honest(self.honest)
    }
}

/// Per-kind event counts of one peer over one time bin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinnedTraceVector {
    pub bin_start_ms: i64,
    pub counts: [u32; EVENT_KINDS],
    pub peer: PeerRef,
    pub honest: bool,
}

impl BinnedTraceVector {
    pub fn label(&self) -> Label {
        Label::from_honest(self.honest)
    }

    pub fn features(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| f64::from(c)).collect()
    }
}

/// One peer-table change: `removed` was evicted to make room for `added`
/// in `bucket`. `removed == SENTINEL_ENDPOINT` means nothing was evicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscoveryLogRecord {
    pub timestamp_ms: i64,
    pub removed: SocketAddrV4,
    pub added: SocketAddrV4,
    pub bucket: u16,
    pub label: Label,
}

impl DiscoveryLogRecord {
    pub fn evicted_nothing(&self) -> bool {
        self.removed == SENTINEL_ENDPOINT
    }

    pub fn bucket_in_range(&self) -> bool {
        (1..=256).contains(&self.bucket)
    }
}

/// A vocabulary token with its ground-truth label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledToken {
    pub token_id: usize,
    pub label: Label,
}

fn open(path: &Path) -> Result<File, EventsError> {
    File::open(path).map_err(|source| EventsError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn create(path: &Path) -> Result<File, EventsError> {
    File::create(path).map_err(|source| EventsError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<(), EventsError> {
    let found = reader.headers()?;
    if found.iter().ne(expected.iter().copied()) {
        return Err(EventsError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn row_err(line: u64, message: impl Into<String>) -> EventsError {
    EventsError::Row {
        line,
        message: message.into(),
    }
}

fn field<'r>(record: &'r csv::StringRecord, idx: usize, line: u64) -> Result<&'r str, EventsError> {
    record
        .get(idx)
        .ok_or_else(|| row_err(line, format!("missing column {idx}")))
}

fn parse_int<T: FromStr>(s: &str, what: &str, line: u64) -> Result<T, EventsError> {
    s.parse().map_err(|_| row_err(line, format!("invalid {what} `{s}`")))
}

fn parse_bool(s: &str, line: u64) -> Result<bool, EventsError> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(row_err(line, format!("invalid boolean `{other}`"))),
    }
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input)
}

pub fn parse_traces<R: Read>(input: R) -> Result<Vec<GossipTraceRecord>, EventsError> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &TRACE_HEADER)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = line_of(&row);
        let timestamp_ms = parse_int(field(&row, 0, line)?, "timestamp", line)?;
        let peer = PeerRef(parse_int(field(&row, 1, line)?, "peer", line)?);
        let code: i64 = parse_int(field(&row, 2, line)?, "event code", line)?;
        let event =
            GossipEventType::from_code(code).map_err(|_| row_err(line, format!("unknown event code {code}")))?;
        let honest = parse_bool(field(&row, 3, line)?, line)?;
        out.push(GossipTraceRecord {
            timestamp_ms,
            peer,
            event,
            honest,
        });
    }
    Ok(out)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<GossipTraceRecord>, EventsError> {
    parse_traces(open(path)?)
}

pub fn write_traces<W: Write>(out: W, records: &[GossipTraceRecord]) -> Result<(), EventsError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(TRACE_HEADER)?;
    for r in records {
        writer.write_record([
            r.timestamp_ms.to_string(),
            r.peer.0.to_string(),
            r.event.code().to_string(),
            r.honest.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| EventsError::Csv(e.into()))?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, records: &[GossipTraceRecord]) -> Result<(), EventsError> {
    write_traces(create(path)?, records)
}

fn parse_endpoint(row: &csv::StringRecord, ip_idx: usize, line: u64) -> Result<SocketAddrV4, EventsError> {
    let ip: Ipv4Addr = parse_int(field(row, ip_idx, line)?, "IPv4 address", line)?;
    let port: i64 = parse_int(field(row, ip_idx + 1, line)?, "port", line)?;
    let port = u16::try_from(port).map_err(|_| row_err(line, format!("port {port} out of range")))?;
    Ok(SocketAddrV4::new(ip, port))
}

pub fn parse_discovery<R: Read>(input: R) -> Result<Vec<DiscoveryLogRecord>, EventsError> {
    let mut reader = csv_reader(input);
    check_header(&mut reader, &DISCOVERY_HEADER)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = line_of(&row);
        let timestamp_ms = parse_int(field(&row, 0, line)?, "timestamp", line)?;
        let removed = parse_endpoint(&row, 1, line)?;
        let added = parse_endpoint(&row, 3, line)?;
        let bucket: i64 = parse_int(field(&row, 5, line)?, "bucket", line)?;
        if !(1..=256).contains(&bucket) {
            return Err(row_err(line, format!("bucket {bucket} outside 1..=256")));
        }
        let label = field(&row, 6, line)?
            .parse()
            .map_err(|e: EventsError| row_err(line, e.to_string()))?;
        out.push(DiscoveryLogRecord {
            timestamp_ms,
            removed,
            added,
            bucket: bucket as u16,
            label,
        });
    }
    Ok(out)
}

pub fn read_discovery_csv(path: &Path) -> Result<Vec<DiscoveryLogRecord>, EventsError> {
    parse_discovery(open(path)?)
}

pub fn write_discovery<W: Write>(out: W, records: &[DiscoveryLogRecord]) -> Result<(), EventsError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(DISCOVERY_HEADER)?;
    for r in records {
        writer.write_record([
            r.timestamp_ms.to_string(),
            r.removed.ip().to_string(),
            r.removed.port().to_string(),
            r.added.ip().to_string(),
            r.added.port().to_string(),
            r.bucket.to_string(),
            r.label.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| EventsError::Csv(e.into()))?;
    Ok(())
}

pub fn write_discovery_csv(path: &Path, records: &[DiscoveryLogRecord]) -> Result<(), EventsError> {
    write_discovery(create(path)?, records)
}

/// Serialize traces to an in-memory CSV document.
pub fn traces_to_bytes(records: &[GossipTraceRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_traces(&mut buf, records).expect("writing to memory cannot fail");
    buf
}

pub fn discovery_to_bytes(records: &[DiscoveryLogRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_discovery(&mut buf, records).expect("writing to memory cannot fail");
    buf
}
