//! Seeded discrete-event simulator of a gossipsub-like mesh and of a
//! Kademlia discovery table, under baseline and attack scenarios.
//!
//! Peers `0..n_honest` are honest and the first `n_victims` of them are
//! monitored: only their tracers emit records. Attackers are numbered after
//! the honest peers.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashSet};
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::{
    discovery_to_bytes, traces_to_bytes, DiscoveryLogRecord, GossipEventType, GossipTraceRecord, Label, PeerRef,
};
use crate::kademlia::{craft_node_id, NodeId, PeerEntry, RoutingTable, TableConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Baseline,
    EclipseSingleVictim,
    CovertFlash,
    EclipseNetwork,
    DiscoveryPoisoning,
}

impl Scenario {
    pub fn has_attack(self) -> bool {
        self != Scenario::Baseline
    }
}

fn default_heartbeat() -> i64 {
    700
}
fn default_publish_rate() -> f64 {
    2.0
}
fn default_mesh_degree() -> usize {
    8
}
fn default_max_peers() -> usize {
    24
}
fn default_gossip_fanout() -> usize {
    3
}
fn default_multiplier() -> f64 {
    10.0
}
fn default_invalid_fraction() -> f64 {
    0.01
}
fn default_churn() -> f64 {
    1.0 / 300.0
}
fn default_min_delay() -> i64 {
    10
}
fn default_max_delay() -> i64 {
    60
}
fn default_warmup() -> i64 {
    10_000
}
fn default_discovery_rate() -> f64 {
    2.0
}
fn default_true() -> bool {
    true
}
fn default_capacity() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub n_honest: usize,
    pub n_attackers: usize,
    pub n_victims: usize,
    pub duration_ms: i64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_ms: i64,
    #[serde(default = "default_publish_rate")]
    pub publish_rate_per_peer_per_s: f64,
    #[serde(default = "default_mesh_degree")]
    pub mesh_degree: usize,
    /// Covert flash only: time at which attackers stop propagating.
    #[serde(default)]
    pub covert_switch_ms: Option<i64>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to half the duration.
    #[serde(default)]
    pub attack_start_ms: Option<i64>,
    /// Attacker action rate as a multiple of the honest publish rate.
    #[serde(default = "default_multiplier")]
    pub attack_rate_multiplier: f64,
    #[serde(default = "default_max_peers")]
    pub max_peers: usize,
    #[serde(default = "default_gossip_fanout")]
    pub gossip_fanout: usize,
    #[serde(default = "default_invalid_fraction")]
    pub invalid_message_fraction: f64,
    /// Departure rate of non-monitored honest peers.
    #[serde(default = "default_churn")]
    pub churn_rate_per_peer_per_s: f64,
    #[serde(default = "default_min_delay")]
    pub min_hop_delay_ms: i64,
    #[serde(default = "default_max_delay")]
    pub max_hop_delay_ms: i64,
    /// Records before this time are not emitted (mesh formation).
    #[serde(default = "default_warmup")]
    pub warmup_ms: i64,
    /// Discovery only: honest table insertions per second.
    #[serde(default = "default_discovery_rate")]
    pub discovery_rate_per_s: f64,
    /// Discovery only: attacker insertions per second once the attack runs.
    #[serde(default = "default_discovery_rate")]
    pub attack_discovery_rate_per_s: f64,
    #[serde(default = "default_true")]
    pub ip_limit_enabled: bool,
    #[serde(default = "default_capacity")]
    pub bucket_capacity: usize,
}

impl SimConfig {
    pub fn new(scenario: Scenario, n_honest: usize, n_attackers: usize, n_victims: usize, duration_ms: i64) -> Self {
        SimConfig {
            scenario,
            n_honest,
            n_attackers,
            n_victims,
            duration_ms,
            heartbeat_ms: default_heartbeat(),
            publish_rate_per_peer_per_s: default_publish_rate(),
            mesh_degree: default_mesh_degree(),
            covert_switch_ms: None,
            seed: 0,
            attack_start_ms: None,
            attack_rate_multiplier: default_multiplier(),
            max_peers: default_max_peers(),
            gossip_fanout: default_gossip_fanout(),
            invalid_message_fraction: default_invalid_fraction(),
            churn_rate_per_peer_per_s: default_churn(),
            min_hop_delay_ms: default_min_delay(),
            max_hop_delay_ms: default_max_delay(),
            warmup_ms: default_warmup(),
            discovery_rate_per_s: default_discovery_rate(),
            attack_discovery_rate_per_s: default_discovery_rate(),
            ip_limit_enabled: true,
            bucket_capacity: default_capacity(),
        }
    }

    pub fn attack_start(&self) -> i64 {
        self.attack_start_ms.unwrap_or(self.duration_ms / 2)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.duration_ms <= 0 {
            return bad(format!("duration_ms must be positive, got {}", self.duration_ms));
        }
        if self.n_victims > self.n_honest {
            return bad(format!(
                "n_victims {} exceeds n_honest {}",
                self.n_victims, self.n_honest
            ));
        }
        if self.heartbeat_ms <= 0 {
            return bad("heartbeat_ms must be positive".into());
        }
        if self.mesh_degree < 3 {
            return bad("mesh_degree must be at least 3".into());
        }
        if self.max_peers < self.mesh_degree {
            return bad("max_peers must be at least mesh_degree".into());
        }
        for (name, v) in [
            ("publish_rate_per_peer_per_s", self.publish_rate_per_peer_per_s),
            ("attack_rate_multiplier", self.attack_rate_multiplier),
            ("churn_rate_per_peer_per_s", self.churn_rate_per_peer_per_s),
            ("discovery_rate_per_s", self.discovery_rate_per_s),
            ("attack_discovery_rate_per_s", self.attack_discovery_rate_per_s),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.invalid_message_fraction) {
            return bad("invalid_message_fraction must lie in [0, 1]".into());
        }
        if self.min_hop_delay_ms < 1 || self.max_hop_delay_ms < self.min_hop_delay_ms {
            return bad("hop delays must satisfy 1 <= min <= max".into());
        }
        if self.warmup_ms < 0 || self.warmup_ms >= self.duration_ms {
            return bad("warmup_ms must lie in [0, duration_ms)".into());
        }
        let start = self.attack_start();
        if self.scenario.has_attack() {
            if self.n_attackers == 0 || self.n_victims == 0 {
                return bad("attack scenarios need at least one attacker and one victim".into());
            }
            if start < self.warmup_ms || start >= self.duration_ms {
                return bad(format!("attack_start_ms {start} outside [warmup_ms, duration_ms)"));
            }
        }
        match self.scenario {
            Scenario::CovertFlash => match self.covert_switch_ms {
                Some(s) if s > start && s < self.duration_ms => {}
                _ => return bad("covert_switch_ms must lie in (attack start, duration_ms)".into()),
            },
            _ if self.covert_switch_ms.is_some() => {
                return bad("covert_switch_ms only applies to covert-flash".into());
            }
            _ => {}
        }
        if self.scenario == Scenario::DiscoveryPoisoning {
            if self.n_victims != 1 {
                return bad("discovery poisoning models exactly one victim table".into());
            }
            if self.n_attackers > 256 * 256 {
                return bad("at most 65536 attacker addresses are available".into());
            }
            if self.bucket_capacity == 0 {
                return bad("bucket_capacity must be positive".into());
            }
        } else if self.n_honest < 2 {
            return bad("gossip scenarios need at least two honest peers".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub config: SimConfig,
    pub trace_records: usize,
    pub discovery_records: usize,
    pub traces_sha256: String,
    pub discovery_sha256: String,
}

/// Internal message bookkeeping exposed for invariant checks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub messages_published: u64,
    pub deliveries: u64,
    /// Deliveries of a message id with no earlier publish. Always zero.
    pub orphan_deliveries: u64,
    /// Largest number of peers that delivered a single message.
    pub max_deliveries_per_message: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub traces: Vec<GossipTraceRecord>,
    pub discovery: Vec<DiscoveryLogRecord>,
    pub manifest: SimManifest,
    pub stats: SimStats,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn run_simulation(config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let (traces, discovery, stats) = match config.scenario {
        Scenario::DiscoveryPoisoning => (Vec::new(), simulate_discovery(config), SimStats::default()),
        _ => {
            let mut sim = GossipSim::new(config);
            sim.run();
            (sim.records, Vec::new(), sim.stats)
        }
    };
    let manifest = SimManifest {
        config: config.clone(),
        trace_records: traces.len(),
        discovery_records: discovery.len(),
        traces_sha256: sha256_hex(&traces_to_bytes(&traces)),
        discovery_sha256: sha256_hex(&discovery_to_bytes(&discovery)),
    };
    Ok(SimOutput {
        traces,
        discovery,
        manifest,
        stats,
    })
}

/// Named desk-scale scenarios. Attacker and victim counts of the three
/// gossip attacks follow the published experiment table; the `-half`
/// variants halve every population.
pub fn scenario_presets() -> Vec<(String, SimConfig)> {
    let mut eclipse_single = SimConfig::new(Scenario::EclipseSingleVictim, 40, 100, 1, 400_000);
    eclipse_single.attack_start_ms = Some(280_000);
    eclipse_single.seed = 50;

    let mut covert = SimConfig::new(Scenario::CovertFlash, 40, 100, 20, 100_000);
    covert.attack_start_ms = Some(60_000);
    covert.covert_switch_ms = Some(66_000);
    covert.seed = 50;

    let mut eclipse_net = SimConfig::new(Scenario::EclipseNetwork, 70, 200, 50, 150_000);
    eclipse_net.publish_rate_per_peer_per_s = 0.5;
    eclipse_net.attack_start_ms = Some(100_000);
    eclipse_net.seed = 50;

    let mut discovery = SimConfig::new(Scenario::DiscoveryPoisoning, 20_000, 16, 1, 1_500_000);
    discovery.discovery_rate_per_s = 2.0;
    discovery.attack_discovery_rate_per_s = 2.0;
    discovery.attack_start_ms = Some(1_000_000);
    discovery.seed = 42;

    let halve = |name: &str, c: &SimConfig| {
        let mut h = c.clone();
        h.n_attackers = (c.n_attackers / 2).max(1);
        h.n_victims = (c.n_victims / 2).max(1);
        if c.scenario != Scenario::DiscoveryPoisoning {
            h.n_honest = (c.n_honest / 2).max(h.n_victims).max(2);
        }
        (format!("{name}-half"), h)
    };
    let base = vec![
        ("eclipse-single".to_string(), eclipse_single),
        ("covert".to_string(), covert),
        ("eclipse-net".to_string(), eclipse_net),
        ("discovery-poisoning".to_string(), discovery),
    ];
    let halves: Vec<(String, SimConfig)> = base
        .iter()
        .filter(|(_, c)| c.scenario != Scenario::DiscoveryPoisoning)
        .map(|(n, c)| halve(n, c))
        .collect();
    base.into_iter().chain(halves).collect()
}

pub fn preset(name: &str) -> Option<SimConfig> {
    scenario_presets().into_iter().find(|(n, _)| n == name).map(|(_, c)| c)
}

fn peer_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Control {
    Graft,
    Prune,
    IHave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Publish,
    Receive { msg: u32, from: u32 },
    Control { kind: Control, from: u32 },
    Heartbeat,
    Leave,
    Rejoin,
    AttackStart,
    AttackAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Scheduled {
    t: i64,
    peer: u32,
    seq: u64,
    action: Action,
}

impl Ord for Scheduled {
    // reversed so the max-heap pops the earliest (t, peer, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.t, other.peer, other.seq).cmp(&(self.t, self.peer, self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy)]
struct Message {
    valid: bool,
    deliveries: u32,
}

struct GossipSim<'a> {
    cfg: &'a SimConfig,
    n_honest: u32,
    n_total: u32,
    rngs: Vec<ChaCha8Rng>,
    conns: Vec<BTreeSet<u32>>,
    mesh: Vec<BTreeSet<u32>>,
    online: Vec<bool>,
    seen: Vec<HashSet<u32>>,
    messages: Vec<Message>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    records: Vec<GossipTraceRecord>,
    stats: SimStats,
}

impl<'a> GossipSim<'a> {
    fn new(cfg: &'a SimConfig) -> Self {
        let n_total = cfg.n_honest + cfg.n_attackers;
        let mut sim = GossipSim {
            cfg,
            n_honest: cfg.n_honest as u32,
            n_total: n_total as u32,
            rngs: (0..n_total as u64).map(|p| peer_rng(cfg.seed, p)).collect(),
            conns: vec![BTreeSet::new(); n_total],
            mesh: vec![BTreeSet::new(); n_total],
            online: (0..n_total).map(|p| p < cfg.n_honest).collect(),
            seen: vec![HashSet::new(); n_total],
            messages: Vec::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            records: Vec::new(),
            stats: SimStats::default(),
        };
        sim.bootstrap();
        sim
    }

    fn is_attacker(&self, p: u32) -> bool {
        p >= self.n_honest
    }

    fn is_victim(&self, p: u32) -> bool {
        (p as usize) < self.cfg.n_victims
    }

    fn silenced(&self, p: u32, t: i64) -> bool {
        self.is_attacker(p)
            && self.cfg.scenario == Scenario::CovertFlash
            && self.cfg.covert_switch_ms.is_some_and(|s| t >= s)
    }

    fn schedule(&mut self, t: i64, peer: u32, action: Action) {
        if t >= self.cfg.duration_ms {
            return;
        }
        self.seq += 1;
        self.queue.push(Scheduled {
            t,
            peer,
            seq: self.seq,
            action,
        });
    }

    fn exp_delay(&mut self, p: u32, rate_per_s: f64) -> Option<i64> {
        if rate_per_s <= 0.0 {
            return None;
        }
        let exp = Exp::new(rate_per_s / 1000.0).expect("positive rate");
        Some(exp.sample(&mut self.rngs[p as usize]).ceil().max(1.0) as i64)
    }

    fn hop_delay(&mut self, p: u32) -> i64 {
        let (lo, hi) = (self.cfg.min_hop_delay_ms, self.cfg.max_hop_delay_ms);
        self.rngs[p as usize].gen_range(lo..=hi)
    }

    fn record(&mut self, t: i64, at: u32, event: GossipEventType, counterparty: Option<u32>) {
        if !self.is_victim(at) || t < self.cfg.warmup_ms {
            return;
        }
        let honest = counterparty.is_none_or(|c| !self.is_attacker(c));
        self.records.push(GossipTraceRecord {
            timestamp_ms: t,
            peer: PeerRef(at),
            event,
            honest,
        });
    }

    fn bootstrap(&mut self) {
        let d = self.cfg.mesh_degree;
        for p in 0..self.n_honest {
            let others: Vec<u32> = (0..self.n_honest).filter(|&q| q != p).collect();
            let picks: Vec<u32> = others
                .choose_multiple(&mut self.rngs[p as usize], d.min(others.len()))
                .copied()
                .collect();
            for q in picks {
                self.connect(0, p, q);
            }
        }
        for p in 0..self.n_honest {
            let phase = self.rngs[p as usize].gen_range(0..self.cfg.heartbeat_ms);
            self.schedule(phase, p, Action::Heartbeat);
            if let Some(dt) = self.exp_delay(p, self.cfg.publish_rate_per_peer_per_s) {
                self.schedule(dt, p, Action::Publish);
            }
            if !self.is_victim(p) {
                if let Some(dt) = self.exp_delay(p, self.cfg.churn_rate_per_peer_per_s) {
                    self.schedule(dt, p, Action::Leave);
                }
            }
        }
        if self.cfg.scenario.has_attack() {
            let start = self.cfg.attack_start();
            for a in self.n_honest..self.n_total {
                let stagger = self.rngs[a as usize].gen_range(0..2000);
                self.schedule(start + stagger, a, Action::AttackStart);
            }
        }
    }

    fn run(&mut self) {
        while let Some(ev) = self.queue.pop() {
            let (t, p) = (ev.t, ev.peer);
            if !self.online[p as usize] && !matches!(ev.action, Action::Rejoin | Action::AttackStart) {
                continue;
            }
            match ev.action {
                Action::Publish => self.on_publish(t, p),
                Action::Receive { msg, from } => self.on_receive(t, p, msg, from),
                Action::Control { kind, from } => self.on_control(t, p, kind, from),
                Action::Heartbeat => self.on_heartbeat(t, p),
                Action::Leave => self.on_leave(t, p),
                Action::Rejoin => self.on_rejoin(t, p),
                Action::AttackStart => self.on_attack_start(t, p),
                Action::AttackAction => self.on_attack_action(t, p),
            }
        }
    }

    /// Open a connection; a full endpoint drops a random existing peer first.
    fn connect(&mut self, t: i64, a: u32, b: u32) {
        if a == b || self.conns[a as usize].contains(&b) {
            return;
        }
        for x in [a, b] {
            if self.conns[x as usize].len() >= self.cfg.max_peers {
                let existing: Vec<u32> = self.conns[x as usize].iter().copied().collect();
                let drop = *existing
                    .choose(&mut self.rngs[x as usize])
                    .expect("full set is non-empty");
                self.disconnect(t, x, drop);
            }
        }
        self.conns[a as usize].insert(b);
        self.conns[b as usize].insert(a);
        self.record(t, a, GossipEventType::AddPeer, Some(b));
        self.record(t, b, GossipEventType::AddPeer, Some(a));
    }

    fn disconnect(&mut self, t: i64, a: u32, b: u32) {
        if !self.conns[a as usize].remove(&b) {
            return;
        }
        self.conns[b as usize].remove(&a);
        self.mesh[a as usize].remove(&b);
        self.mesh[b as usize].remove(&a);
        self.record(t, a, GossipEventType::RemovePeer, Some(b));
        self.record(t, b, GossipEventType::RemovePeer, Some(a));
    }

    fn send_message(&mut self, t: i64, from: u32, to: u32, msg: u32) {
        self.record(t, from, GossipEventType::SendRpc, Some(to));
        let dt = self.hop_delay(from);
        self.schedule(t + dt, to, Action::Receive { msg, from });
    }

    fn send_control(&mut self, t: i64, from: u32, to: u32, kind: Control) {
        self.record(t, from, GossipEventType::SendRpc, Some(to));
        match kind {
            Control::Graft => self.record(t, from, GossipEventType::Graft, Some(to)),
            Control::Prune => self.record(t, from, GossipEventType::Prune, Some(to)),
            Control::IHave => {}
        }
        let dt = self.hop_delay(from);
        self.schedule(t + dt, to, Action::Control { kind, from });
    }

    fn on_publish(&mut self, t: i64, p: u32) {
        if let Some(dt) = self.exp_delay(p, self.cfg.publish_rate_per_peer_per_s) {
            self.schedule(t + dt, p, Action::Publish);
        }
        if self.silenced(p, t) {
            return;
        }
        let valid = self.rngs[p as usize].gen::<f64>() >= self.cfg.invalid_message_fraction;
        let msg = self.messages.len() as u32;
        self.messages.push(Message { valid, deliveries: 0 });
        self.stats.messages_published += 1;
        self.seen[p as usize].insert(msg);
        self.record(t, p, GossipEventType::PublishMessage, None);
        let targets: Vec<u32> = self.mesh[p as usize].iter().copied().collect();
        for q in targets {
            self.send_message(t, p, q, msg);
        }
    }

    fn on_receive(&mut self, t: i64, p: u32, msg: u32, from: u32) {
        if !self.conns[p as usize].contains(&from) {
            // connection closed while in flight
            return;
        }
        self.record(t, p, GossipEventType::RecvRpc, Some(from));
        if !self.seen[p as usize].insert(msg) {
            self.record(t, p, GossipEventType::DuplicateMessage, Some(from));
            return;
        }
        if !self.messages[msg as usize].valid {
            self.record(t, p, GossipEventType::RejectMessage, Some(from));
            return;
        }
        self.record(t, p, GossipEventType::DeliverMessage, Some(from));
        let m = &mut self.messages[msg as usize];
        m.deliveries += 1;
        self.stats.deliveries += 1;
        self.stats.max_deliveries_per_message = self.stats.max_deliveries_per_message.max(u64::from(m.deliveries));
        if self.is_attacker(p) && (self.cfg.scenario != Scenario::CovertFlash || self.silenced(p, t)) {
            return;
        }
        let targets: Vec<u32> = self.mesh[p as usize].iter().copied().filter(|&q| q != from).collect();
        for q in targets {
            self.send_message(t, p, q, msg);
        }
    }

    fn on_control(&mut self, t: i64, p: u32, kind: Control, from: u32) {
        if !self.conns[p as usize].contains(&from) {
            return;
        }
        self.record(t, p, GossipEventType::RecvRpc, Some(from));
        match kind {
            Control::Graft => {
                self.record(t, p, GossipEventType::Graft, Some(from));
                self.mesh[p as usize].insert(from);
            }
            Control::Prune => {
                self.record(t, p, GossipEventType::Prune, Some(from));
                self.mesh[p as usize].remove(&from);
            }
            Control::IHave => {}
        }
    }

    /// Mesh maintenance toward `mesh_degree`, then IHAVE gossip.
    fn on_heartbeat(&mut self, t: i64, p: u32) {
        self.schedule(t + self.cfg.heartbeat_ms, p, Action::Heartbeat);
        let d = self.cfg.mesh_degree;
        let (d_lo, d_hi) = (d - 2, d + 4);
        let pi = p as usize;
        let mesh_len = self.mesh[pi].len();
        if mesh_len < d_lo {
            let candidates: Vec<u32> = self.conns[pi].difference(&self.mesh[pi]).copied().collect();
            let picks: Vec<u32> = candidates
                .choose_multiple(&mut self.rngs[pi], d - mesh_len)
                .copied()
                .collect();
            for q in picks {
                self.mesh[pi].insert(q);
                self.send_control(t, p, q, Control::Graft);
            }
        } else if mesh_len > d_hi {
            let members: Vec<u32> = self.mesh[pi].iter().copied().collect();
            let drops: Vec<u32> = members
                .choose_multiple(&mut self.rngs[pi], mesh_len - d)
                .copied()
                .collect();
            for q in drops {
                self.mesh[pi].remove(&q);
                self.send_control(t, p, q, Control::Prune);
            }
        }
        let outside: Vec<u32> = self.conns[pi].difference(&self.mesh[pi]).copied().collect();
        let gossip: Vec<u32> = if self.silenced(p, t) {
            // advertise withheld messages to every connection
            self.conns[pi].iter().copied().collect()
        } else {
            outside
                .choose_multiple(&mut self.rngs[pi], self.cfg.gossip_fanout)
                .copied()
                .collect()
        };
        for q in gossip {
            self.send_control(t, p, q, Control::IHave);
        }
    }

    fn on_leave(&mut self, t: i64, p: u32) {
        let peers: Vec<u32> = self.conns[p as usize].iter().copied().collect();
        for q in peers {
            self.disconnect(t, p, q);
        }
        self.online[p as usize] = false;
        let away = self.rngs[p as usize].gen_range(5_000..30_000);
        self.schedule(t + away, p, Action::Rejoin);
    }

    fn on_rejoin(&mut self, t: i64, p: u32) {
        self.online[p as usize] = true;
        let candidates: Vec<u32> = (0..self.n_honest)
            .filter(|&q| q != p && self.online[q as usize])
            .collect();
        let picks: Vec<u32> = candidates
            .choose_multiple(&mut self.rngs[p as usize], self.cfg.mesh_degree)
            .copied()
            .collect();
        for q in picks {
            self.connect(t, p, q);
        }
        if let Some(dt) = self.exp_delay(p, self.cfg.churn_rate_per_peer_per_s) {
            self.schedule(t + dt, p, Action::Leave);
        }
    }

    fn on_attack_start(&mut self, t: i64, a: u32) {
        self.online[a as usize] = true;
        let victims: Vec<u32> = (0..self.cfg.n_victims as u32).collect();
        match self.cfg.scenario {
            Scenario::EclipseSingleVictim => self.connect(t, a, 0),
            Scenario::EclipseNetwork => {
                for v in victims {
                    self.connect(t, a, v);
                }
            }
            Scenario::CovertFlash => {
                for v in victims {
                    self.connect(t, a, v);
                }
                let others: Vec<u32> = (self.cfg.n_victims as u32..self.n_honest).collect();
                let picks: Vec<u32> = others
                    .choose_multiple(&mut self.rngs[a as usize], self.cfg.mesh_degree)
                    .copied()
                    .collect();
                for q in picks {
                    self.connect(t, a, q);
                }
                // from here on the attacker runs the honest procedure
                self.schedule(t + 1, a, Action::Heartbeat);
                if let Some(dt) = self.exp_delay(a, self.cfg.publish_rate_per_peer_per_s) {
                    self.schedule(t + dt, a, Action::Publish);
                }
                return;
            }
            Scenario::Baseline | Scenario::DiscoveryPoisoning => return,
        }
        self.schedule_attack_action(t, a);
    }

    fn schedule_attack_action(&mut self, t: i64, a: u32) {
        let rate = self.cfg.publish_rate_per_peer_per_s * self.cfg.attack_rate_multiplier;
        if let Some(dt) = self.exp_delay(a, rate) {
            self.schedule(t + dt, a, Action::AttackAction);
        }
    }

    /// One flood step against a victim: junk message, graft, IHAVE spam or a
    /// reconnect. An attacker that lost its slot reconnects first, displacing
    /// another connection.
    fn on_attack_action(&mut self, t: i64, a: u32) {
        self.schedule_attack_action(t, a);
        let ai = a as usize;
        let target = match self.cfg.scenario {
            Scenario::EclipseNetwork => self.rngs[ai].gen_range(0..self.cfg.n_victims as u32),
            _ => 0,
        };
        if !self.conns[ai].contains(&target) {
            self.connect(t, a, target);
        }
        match self.rngs[ai].gen_range(0..4) {
            0 => {
                let msg = self.messages.len() as u32;
                self.messages.push(Message {
                    valid: false,
                    deliveries: 0,
                });
                self.seen[ai].insert(msg);
                let dt = self.hop_delay(a);
                self.schedule(t + dt, target, Action::Receive { msg, from: a });
            }
            1 => self.send_control(t, a, target, Control::Graft),
            2 => self.send_control(t, a, target, Control::IHave),
            _ => {
                self.disconnect(t, a, target);
                self.connect(t, a, target);
                self.send_control(t, a, target, Control::Graft);
            }
        }
    }
}

/// First attacker address; attackers use consecutive virtual IPs from here.
pub const ATTACKER_IP_BASE: Ipv4Addr = Ipv4Addr::new(16, 0, 0, 1);
pub const DISCOVERY_PORT: u16 = 30303;
/// Lowest bucket targeted by poisoning insertions.
pub const POISON_MIN_BUCKET: u16 = 252;

pub fn attacker_ip(index: usize) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(ATTACKER_IP_BASE) + index as u32)
}

/// Victim-table insertion log under honest churn, with attacker insertions of
/// crafted ids into buckets `252..=256` after the attack start.
fn simulate_discovery(cfg: &SimConfig) -> Vec<DiscoveryLogRecord> {
    let mut setup = peer_rng(cfg.seed, 0);
    let victim = NodeId::random(&mut setup);
    let mut used_ips = HashSet::new();
    let mut population = Vec::with_capacity(cfg.n_honest);
    while population.len() < cfg.n_honest {
        let ip = Ipv4Addr::new(
            setup.gen_range(17..224),
            setup.gen(),
            setup.gen(),
            setup.gen_range(1..255),
        );
        if used_ips.insert(ip) {
            population.push(PeerEntry {
                id: NodeId::random(&mut setup),
                ip,
                port: DISCOVERY_PORT,
                inserted_at_ms: 0,
            });
        }
    }
    let mut table = RoutingTable::new(
        victim,
        TableConfig {
            bucket_capacity: cfg.bucket_capacity,
            ip_limit_enabled: cfg.ip_limit_enabled,
            max_per_ip_per_bucket: 1,
        },
    );

    let mut honest_rng = peer_rng(cfg.seed, 1);
    let mut attack_rng = peer_rng(cfg.seed, 2);
    let next = |rng: &mut ChaCha8Rng, rate: f64, t: i64| -> Option<i64> {
        (rate > 0.0).then(|| {
            let exp = Exp::new(rate / 1000.0).expect("positive rate");
            t + exp.sample(rng).ceil().max(1.0) as i64
        })
    };
    let mut t_honest = next(&mut honest_rng, cfg.discovery_rate_per_s, 0);
    let mut t_attack = if cfg.scenario.has_attack() {
        next(&mut attack_rng, cfg.attack_discovery_rate_per_s, cfg.attack_start())
    } else {
        None
    };
    let n_ips = cfg.n_attackers;
    let mut out = Vec::new();
    loop {
        let honest_first = match (t_honest, t_attack) {
            (Some(h), Some(a)) => h <= a,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (None, None) => break,
        };
        let t = if honest_first { t_honest } else { t_attack }.expect("one source is live");
        if t >= cfg.duration_ms {
            break;
        }
        let (candidate, label) = if honest_first {
            t_honest = next(&mut honest_rng, cfg.discovery_rate_per_s, t);
            (
                *population.choose(&mut honest_rng).expect("population non-empty"),
                Label::Normal,
            )
        } else {
            t_attack = next(&mut attack_rng, cfg.attack_discovery_rate_per_s, t);
            let bucket = attack_rng.gen_range(POISON_MIN_BUCKET..=256);
            let id = craft_node_id(&victim, bucket, &mut attack_rng).expect("bucket in range");
            let taken: HashSet<Ipv4Addr> = table.bucket(bucket).iter().map(|e| e.ip).collect();
            let free: Vec<usize> = (0..n_ips).filter(|&i| !taken.contains(&attacker_ip(i))).collect();
            let slot = free
                .choose(&mut attack_rng)
                .copied()
                .unwrap_or_else(|| attack_rng.gen_range(0..n_ips));
            let entry = PeerEntry {
                id,
                ip: attacker_ip(slot),
                port: DISCOVERY_PORT,
                inserted_at_ms: t,
            };
            (entry, Label::Abnormal)
        };
        if candidate.id == victim {
            continue;
        }
        let insertion = table.insert(candidate, t).expect("non-self insert");
        if t < cfg.warmup_ms {
            continue;
        }
        if let Some(mut record) = insertion.record {
            record.label = label;
            out.push(record);
        }
    }
    out
}

/// Endpoint equality helper for analysis code.
pub fn is_attacker_endpoint(addr: &SocketAddrV4, n_attackers: usize) -> bool {
    let base = u32::from(ATTACKER_IP_BASE);
    let ip = u32::from(*addr.ip());
    ip >= base && ip < base + n_attackers as u32
}
