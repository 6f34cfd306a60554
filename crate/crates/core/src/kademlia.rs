//! Discovery-layer peer table: 256-bit node ids, the XOR metric,
//! log-distance buckets with oldest-entry eviction and a per-bucket
//! same-IP limit.

use std::collections::HashSet;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{DiscoveryLogRecord, Label, SENTINEL_ENDPOINT};

pub const ID_BYTES: usize = 32;
pub const ID_BITS: u16 = 256;
pub const DEFAULT_BUCKET_CAPACITY: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KademliaError {
    #[error("candidate id equals the table's own id")]
    SelfInsert,
    #[error("bucket {0} outside 1..=256")]
    BucketOutOfRange(u16),
}

/// 256-bit node identifier, big-endian.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub [u8; ID_BYTES]);

impl NodeId {
    pub const ZERO: NodeId = NodeId([0; ID_BYTES]);

    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut bytes = [0u8; ID_BYTES];
        rng.fill_bytes(&mut bytes);
        NodeId(bytes)
    }

    pub fn xor(&self, other: &NodeId) -> NodeId {
        let mut out = [0u8; ID_BYTES];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(other.0.iter())) {
            *o = a ^ b;
        }
        NodeId(out)
    }

    /// Number of significant bits (0 for the zero id).
    pub fn bit_len(&self) -> u16 {
        for (i, byte) in self.0.iter().enumerate() {
            if *byte != 0 {
                let byte_bits = 8 - byte.leading_zeros() as u16;
                return (ID_BYTES - 1 - i) as u16 * 8 + byte_bits;
            }
        }
        0
    }

    /// Bit `index` counted from the least significant end.
    pub fn bit(&self, index: u16) -> bool {
        let byte = ID_BYTES - 1 - usize::from(index / 8);
        self.0[byte] >> (index % 8) & 1 == 1
    }

    fn flip_bit(&mut self, index: u16) {
        let byte = ID_BYTES - 1 - usize::from(index / 8);
        self.0[byte] ^= 1 << (index % 8);
    }

    fn set_bit(&mut self, index: u16, value: bool) {
        let byte = ID_BYTES - 1 - usize::from(index / 8);
        let mask = 1 << (index % 8);
        if value {
            self.0[byte] |= mask;
        } else {
            self.0[byte] &= !mask;
        }
    }

    pub fn from_low_u64(value: u64) -> Self {
        let mut bytes = [0u8; ID_BYTES];
        bytes[ID_BYTES - 8..].copy_from_slice(&value.to_be_bytes());
        NodeId(bytes)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", hex::encode(self.0))
    }
}

pub fn xor_distance(a: &NodeId, b: &NodeId) -> NodeId {
    a.xor(b)
}

/// Bit length of `a XOR b`: 0 iff `a == b`, otherwise `1..=256`.
pub fn log_distance(a: &NodeId, b: &NodeId) -> u16 {
    a.xor(b).bit_len()
}

/// Build an id at log-distance `target_bucket` from `victim`: the bits above
/// the bucket bit are copied, the bucket bit is flipped and the lower bits are
/// random.
pub fn craft_node_id(victim: &NodeId, target_bucket: u16, rng: &mut impl RngCore) -> Result<NodeId, KademliaError> {
    if !(1..=ID_BITS).contains(&target_bucket) {
        return Err(KademliaError::BucketOutOfRange(target_bucket));
    }
    let mut out = *victim;
    let flip = target_bucket - 1;
    out.flip_bit(flip);
    let noise = NodeId::random(rng);
    for bit in 0..flip {
        out.set_bit(bit, noise.bit(bit));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerEntry {
    pub id: NodeId,
    pub ip: Ipv4Addr,
    pub port: u16,
    pub inserted_at_ms: i64,
}

impl PeerEntry {
    pub fn endpoint(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.ip, self.port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableConfig {
    pub bucket_capacity: usize,
    pub ip_limit_enabled: bool,
    pub max_per_ip_per_bucket: usize,
}

impl Default for TableConfig {
    fn default() -> Self {
        TableConfig {
            bucket_capacity: DEFAULT_BUCKET_CAPACITY,
            ip_limit_enabled: false,
            max_per_ip_per_bucket: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InsertOutcome {
    AddedNoEvict,
    Replaced(PeerEntry),
    RejectedIpLimit,
}

/// Result of [`RoutingTable::insert`]. `record` is `None` exactly when the
/// insertion was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Insertion {
    pub bucket: u16,
    pub outcome: InsertOutcome,
    pub record: Option<DiscoveryLogRecord>,
}

#[derive(Debug, Clone)]
pub struct RoutingTable {
    self_id: NodeId,
    config: TableConfig,
    // index 0 holds log-distance 1
    buckets: Vec<Vec<PeerEntry>>,
}

impl RoutingTable {
    pub fn new(self_id: NodeId, config: TableConfig) -> Self {
        RoutingTable {
            self_id,
            config,
            buckets: vec![Vec::new(); usize::from(ID_BITS)],
        }
    }

    pub fn self_id(&self) -> &NodeId {
        &self.self_id
    }

    pub fn config(&self) -> &TableConfig {
        &self.config
    }

    pub fn bucket(&self, index: u16) -> &[PeerEntry] {
        match index {
            1..=ID_BITS => &self.buckets[usize::from(index - 1)],
            _ => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All entries with their bucket index.
    pub fn entries(&self) -> impl Iterator<Item = (u16, &PeerEntry)> {
        self.buckets
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.iter().map(move |e| (i as u16 + 1, e)))
    }

    /// Insert `candidate`, evicting the oldest entry when the bucket is full.
    /// A candidate whose id is already present replaces that entry.
    pub fn insert(&mut self, candidate: PeerEntry, now_ms: i64) -> Result<Insertion, KademliaError> {
        if candidate.id == self.self_id {
            return Err(KademliaError::SelfInsert);
        }
        let bucket_index = log_distance(&self.self_id, &candidate.id);
        let capacity = self.config.bucket_capacity;
        let ip_limit = self
            .config
            .ip_limit_enabled
            .then_some(self.config.max_per_ip_per_bucket);
        let bucket = &mut self.buckets[usize::from(bucket_index - 1)];

        let existing = bucket.iter().position(|e| e.id == candidate.id);
        if let Some(limit) = ip_limit {
            let same_ip = bucket
                .iter()
                .filter(|e| e.ip == candidate.ip && e.id != candidate.id)
                .count();
            if same_ip >= limit {
                return Ok(Insertion {
                    bucket: bucket_index,
                    outcome: InsertOutcome::RejectedIpLimit,
                    record: None,
                });
            }
        }

        let entry = PeerEntry {
            inserted_at_ms: now_ms,
            ..candidate
        };
        let outcome = if let Some(pos) = existing {
            InsertOutcome::Replaced(std::mem::replace(&mut bucket[pos], entry))
        } else if bucket.len() < capacity {
            bucket.push(entry);
            InsertOutcome::AddedNoEvict
        } else {
            // oldest first; earlier position breaks timestamp ties
            let oldest = bucket
                .iter()
                .enumerate()
                .min_by_key(|(i, e)| (e.inserted_at_ms, *i))
                .map(|(i, _)| i)
                .expect("full bucket is non-empty");
            let evicted = bucket.remove(oldest);
            bucket.push(entry);
            InsertOutcome::Replaced(evicted)
        };

        let removed = match &outcome {
            InsertOutcome::Replaced(old) => old.endpoint(),
            _ => SENTINEL_ENDPOINT,
        };
        Ok(Insertion {
            bucket: bucket_index,
            record: Some(DiscoveryLogRecord {
                timestamp_ms: now_ms,
                removed,
                added: entry.endpoint(),
                bucket: bucket_index,
                label: Label::Normal,
            }),
            outcome,
        })
    }

    /// Fraction of all stored entries owned by `attackers`; 0 on an empty table.
    pub fn occupation_ratio(&self, attackers: &HashSet<NodeId>) -> f64 {
        ratio(self.entries().map(|(_, e)| e), attackers)
    }

    /// Fraction of one bucket's entries owned by `attackers`.
    pub fn bucket_occupation(&self, index: u16, attackers: &HashSet<NodeId>) -> f64 {
        ratio(self.bucket(index).iter(), attackers)
    }
}

fn ratio<'a>(entries: impl Iterator<Item = &'a PeerEntry>, attackers: &HashSet<NodeId>) -> f64 {
    let (mut total, mut owned) = (0usize, 0usize);
    for e in entries {
        total += 1;
        owned += usize::from(attackers.contains(&e.id));
    }
    if total == 0 {
        0.0
    } else {
        owned as f64 / total as f64
    }
}

pub fn occupation_ratio(table: &RoutingTable, attackers: &HashSet<NodeId>) -> f64 {
    table.occupation_ratio(attackers)
}
