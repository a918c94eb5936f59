//! Deterministic in-process network: clients, servers and proxies run the
//! full round under an adversary script that controls every link.
//!
//! Time is virtual. Each round starts at `round × round_ticks`; clients
//! stamp their frames with a seeded jitter inside the publish window. All
//! effects within a round are applied in a fixed order, so a (config,
//! script, seed) triple always yields the same [`Trace`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ed25519_dalek::SigningKey;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::SKETCH_FRAME_BYTES;
use crate::client::{trim_body, ClientConfig, ClientMetrics, ClientState};
use crate::dpf::{domain_bits, share_write, PointFunction};
use crate::envelope::{open, seal, SealContext, SealMode, SealedFrame, ServerKey, Tick};
use crate::error::{Error, Result};
use crate::model::{Phase, RowLayout, TopicDirectory, TopicId};
use crate::pir::{proxy_combine, MASKED_ANSWER_HEADER};
use crate::server::{
    reveal_and_group, DuplicatePolicy, HaltReason, IngestOutcome, PublishVerdict, RevealReport,
    ServerConfig, ServerMetrics, ServerState,
};

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub servers: usize,
    pub clients: usize,
    pub rounds: u64,
    pub seed: u64,
    /// `false` sends share bodies unencrypted (leak control only).
    pub encrypt: bool,
    /// Keep full frame bytes and opened bodies in the trace.
    pub capture: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            servers: 2,
            clients: 10,
            rounds: 5,
            seed: 1,
            encrypt: true,
            capture: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WriteConfig {
    /// `ℓ_w`, a power of two.
    pub rows: usize,
    /// `LS`, payload bytes per row including the checksum byte.
    pub payload: usize,
    pub max_delay: u8,
    pub duplicates: DuplicatePolicy,
}

impl Default for WriteConfig {
    fn default() -> Self {
        Self {
            rows: 1024,
            payload: 64,
            max_delay: 3,
            duplicates: DuplicatePolicy::Dedupe,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReadConfig {
    pub alignment: usize,
    pub expiry: u32,
    /// Rounds between directory updates.
    pub epoch: u64,
    /// Subscription slots per client.
    pub slots: usize,
    /// Largest block size in bytes, 0 for unbounded.
    pub block_cap: usize,
}

impl Default for ReadConfig {
    fn default() -> Self {
        Self {
            alignment: 1024,
            expiry: 20,
            epoch: 10,
            slots: 1,
            block_cap: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub topics: u32,
    /// Chance that a client queues a message in a given round.
    pub publish_prob: f64,
    /// Chance that a queued message uses delayed publishing.
    pub delay_prob: f64,
    /// Topics each client subscribes to; at most `slots`.
    pub interests: usize,
    /// No new messages from this round on.
    pub publish_until: Option<u64>,
    pub message_len: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            topics: 4,
            publish_prob: 0.5,
            delay_prob: 0.0,
            interests: 1,
            publish_until: None,
            message_len: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    /// Path of a script file or the name of a built-in script.
    pub script: Option<String>,
}

/// Scenario file: `[network]`, `[write]`, `[read]`, `[workload]` and
/// `[adversary]` tables of `key = value` pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub network: NetworkConfig,
    pub write: WriteConfig,
    pub read: ReadConfig,
    pub workload: WorkloadConfig,
    pub adversary: AdversaryConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layout(&self) -> RowLayout {
        RowLayout {
            payload_len: self.write.payload,
        }
    }

    pub fn seal_mode(&self) -> SealMode {
        if self.network.encrypt {
            SealMode::Encrypted
        } else {
            SealMode::Plaintext
        }
    }

    pub fn client_config(&self) -> ClientConfig {
        ClientConfig {
            n_servers: self.network.servers,
            domain: self.write.rows,
            layout: self.layout(),
            slots: self.read.slots,
            max_delay: self.write.max_delay,
            clock: Default::default(),
            seal_mode: self.seal_mode(),
        }
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            alignment: self.read.alignment,
            expiry_rounds: self.read.expiry,
            max_delay: self.write.max_delay,
            block_cap: self.read.block_cap,
            seal_mode: self.seal_mode(),
            duplicate_policy: self.write.duplicates,
            ..ServerConfig::new(self.network.servers, self.write.rows, self.layout())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.network.servers;
        if !(2..=255).contains(&n) {
            return Err(config_err(format!("servers must be in 2..=255, got {n}")));
        }
        if self.network.clients == 0 {
            return Err(config_err("at least one client is required"));
        }
        domain_bits(self.write.rows).map_err(|_| {
            config_err(format!(
                "rows must be a power of two ≥ 2, got {}",
                self.write.rows
            ))
        })?;
        RowLayout::new(self.write.payload).map_err(|e| config_err(e.to_string()))?;
        let cap = self.layout().body_capacity();
        if self.workload.message_len == 0 || self.workload.message_len > cap {
            return Err(config_err(format!(
                "message_len must be in 1..={cap} for payload {}",
                self.write.payload
            )));
        }
        if self.workload.delay_prob > 0.0 {
            let dcap = self.client_config().delayed_capacity();
            if self.workload.message_len > dcap {
                return Err(config_err(format!(
                    "delayed messages hold at most {dcap} bytes at payload {}",
                    self.write.payload
                )));
            }
        }
        for (name, p) in [
            ("publish_prob", self.workload.publish_prob),
            ("delay_prob", self.workload.delay_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err(format!("{name} must be a probability, got {p}")));
            }
        }
        if self.workload.topics == 0 || self.workload.topics >= u32::MAX - 1 {
            return Err(config_err("topics must be positive"));
        }
        if self.read.epoch == 0 || self.read.alignment == 0 || self.read.expiry == 0 {
            return Err(config_err("epoch, alignment and expiry must be positive"));
        }
        if self.read.slots > 255 {
            return Err(config_err("at most 255 subscription slots"));
        }
        if self.workload.interests > self.read.slots {
            return Err(config_err(format!(
                "{} interests do not fit in {} slots",
                self.workload.interests, self.read.slots
            )));
        }
        if self.workload.interests > self.workload.topics as usize {
            return Err(config_err("more interests than topics"));
        }
        Ok(())
    }
}

// ------------------------------------------------------------ adversary

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Observe,
    /// Re-deliver the client's frame to `server` in round `to`.
    Replay {
        client: u64,
        server: u8,
        to: u64,
    },
    /// Flip one ciphertext bit (taken modulo the ciphertext length).
    Modify {
        client: u64,
        server: u8,
        bit: usize,
    },
    Drop {
        client: u64,
        server: u8,
    },
    Delay {
        client: u64,
        server: u8,
        rounds: u64,
    },
    /// A frame from a client id nobody committed.
    Inject {
        server: u8,
    },
    /// A frame claiming to be from `client`, signed with the adversary's key.
    InjectForged {
        client: u64,
        server: u8,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptAction {
    pub round: u64,
    pub action: Action,
}

/// Corruptions and scheduled link actions.
///
/// Text form, one directive per line, `#` starts a comment:
///
/// ```text
/// corrupt servers=1 clients=3,4
/// 2 replay client=0 server=0 to=3
/// 2 modify client=0 server=0 bit=77
/// 2 drop client=0 server=0
/// 2 delay client=0 server=0 rounds=1
/// 2 inject server=0
/// 2 inject_forged client=0 server=0
/// 2 observe
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryScript {
    pub corrupted_servers: BTreeSet<u8>,
    pub corrupted_clients: BTreeSet<u64>,
    pub actions: Vec<ScriptAction>,
}

/// Names accepted by [`AdversaryScript::builtin`].
pub const BUILTIN_SCRIPTS: &[&str] = &[
    "none",
    "observe",
    "replay-same-round",
    "replay-cross-round",
    "modify",
    "drop",
    "forged-substitute",
    "sybil",
    "delay",
];

fn parse_list<T: std::str::FromStr + Ord>(v: &str) -> std::result::Result<BTreeSet<T>, String> {
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| format!("bad list item {s:?}"))
        })
        .collect()
}

impl AdversaryScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut script = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| config_err(format!("script line {}: {m}", lineno + 1));
            let mut words = line.split_whitespace();
            let first = words.next().unwrap();
            let mut kv = BTreeMap::new();
            let rest: Vec<&str> = words.collect();
            let (round, action_name, pairs) = if first == "corrupt" {
                (None, "corrupt", &rest[..])
            } else {
                let round = first
                    .parse::<u64>()
                    .map_err(|_| err(format!("expected a round number, got {first:?}")))?;
                let name = rest.first().ok_or_else(|| err("missing action".into()))?;
                (Some(round), *name, &rest[1..])
            };
            for p in pairs {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, got {p:?}")))?;
                kv.insert(k, v);
            }
            let num = |k: &str, default: Option<u64>| -> Result<u64> {
                match kv.get(k) {
                    Some(v) => v.parse().map_err(|_| err(format!("{k} is not a number"))),
                    None => default.ok_or_else(|| err(format!("missing {k}="))),
                }
            };
            let Some(round) = round else {
                if let Some(v) = kv.get("servers") {
                    script.corrupted_servers = parse_list(v).map_err(err)?;
                }
                if let Some(v) = kv.get("clients") {
                    script.corrupted_clients = parse_list(v).map_err(err)?;
                }
                continue;
            };
            let server = num("server", Some(0))? as u8;
            let action = match action_name {
                "observe" => Action::Observe,
                "replay" => Action::Replay {
                    client: num("client", None)?,
                    server,
                    to: num("to", Some(round))?,
                },
                "modify" => Action::Modify {
                    client: num("client", None)?,
                    server,
                    bit: num("bit", Some(0))? as usize,
                },
                "drop" => Action::Drop {
                    client: num("client", None)?,
                    server,
                },
                "delay" => Action::Delay {
                    client: num("client", None)?,
                    server,
                    rounds: num("rounds", Some(1))?,
                },
                "inject" => Action::Inject { server },
                "inject_forged" => Action::InjectForged {
                    client: num("client", None)?,
                    server,
                },
                other => return Err(err(format!("unknown action {other:?}"))),
            };
            script.actions.push(ScriptAction { round, action });
        }
        Ok(script)
    }

    /// Built-in scripts, all aimed at client 0's link to server 0 in round 1.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "none" => "",
            "observe" => "corrupt servers=1\n0 observe",
            "replay-same-round" => "1 replay client=0 server=0 to=1",
            "replay-cross-round" | "replay" => "1 replay client=0 server=0 to=2",
            "modify" => "1 modify client=0 server=0 bit=77",
            "drop" => "1 drop client=0 server=0",
            "forged-substitute" => "1 drop client=0 server=0\n1 inject_forged client=0 server=0",
            "sybil" => "1 inject server=0",
            "delay" => "1 delay client=0 server=0 rounds=1",
            _ => return None,
        };
        Some(Self::parse(text).expect("built-in scripts parse"))
    }

    /// A file path or a built-in name.
    pub fn load(source: &str) -> Result<Self> {
        if let Some(s) = Self::builtin(source) {
            return Ok(s);
        }
        let text = std::fs::read_to_string(source)
            .map_err(|e| config_err(format!("cannot read script {source}: {e}")))?;
        Self::parse(&text)
    }

    pub fn validate(&self, n_servers: usize) -> Result<()> {
        if self.corrupted_servers.len() >= n_servers {
            return Err(config_err("at least one server must stay honest"));
        }
        if let Some(s) = self
            .corrupted_servers
            .iter()
            .find(|&&s| s as usize >= n_servers)
        {
            return Err(config_err(format!("no server {s}")));
        }
        Ok(())
    }

    fn at(&self, round: u64) -> impl Iterator<Item = &Action> {
        self.actions
            .iter()
            .filter(move |a| a.round == round)
            .map(|a| &a.action)
    }
}

// ---------------------------------------------------------------- trace

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Client(u64),
    Server(u8),
    Adversary,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Client(c) => write!(f, "client{c}"),
            Endpoint::Server(s) => write!(f, "server{s}"),
            Endpoint::Adversary => write!(f, "adversary"),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Write,
    Subscribe,
    Sketch,
    Share,
    Answer,
    Response,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Frame {
        round: u64,
        tick: Tick,
        from: Endpoint,
        to: Endpoint,
        kind: FrameKind,
        /// Wire length.
        bytes: usize,
        /// Payload carried (`B` for answers and responses, otherwise `bytes`).
        payload: usize,
        /// First 8 bytes of SHA-256 over the wire bytes, hex.
        digest: String,
        /// Full wire bytes, hex, when capture is on.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wire: Option<String>,
    },
    /// A frame body as decrypted by its recipient (capture only).
    Opened {
        round: u64,
        server: u8,
        client: u64,
        kind: FrameKind,
        body: String,
    },
    Ingest {
        round: u64,
        server: u8,
        client: u64,
        outcome: IngestOutcome,
    },
    Halt {
        round: u64,
        server: u8,
        reason: HaltReason,
    },
    ShareDigest {
        round: u64,
        server: u8,
        digest: String,
    },
    Reveal {
        round: u64,
        report: RevealReport,
        digest: String,
    },
    Abort {
        round: u64,
        reason: String,
    },
    Directory {
        round: u64,
        version: u64,
        topics: Vec<u32>,
    },
    Delivery {
        round: u64,
        client: u64,
        topic: u32,
        messages: usize,
    },
    Adversary {
        round: u64,
        action: Action,
    },
}

impl TraceEvent {
    pub fn round(&self) -> u64 {
        match self {
            TraceEvent::Frame { round, .. }
            | TraceEvent::Ingest { round, .. }
            | TraceEvent::Opened { round, .. }
            | TraceEvent::Halt { round, .. }
            | TraceEvent::ShareDigest { round, .. }
            | TraceEvent::Reveal { round, .. }
            | TraceEvent::Abort { round, .. }
            | TraceEvent::Directory { round, .. }
            | TraceEvent::Delivery { round, .. }
            | TraceEvent::Adversary { round, .. } => *round,
        }
    }
}

/// Append-only event log of one run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

fn short_digest(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl Trace {
    pub fn push(&mut self, e: TraceEvent) {
        self.events.push(e);
    }

    /// One JSON object per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Malformed(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self { events })
    }

    /// Hex SHA-256 of the NDJSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_ndjson().as_bytes()))
    }

    pub fn halts(&self) -> Vec<(u64, u8, HaltReason)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Halt {
                    round,
                    server,
                    reason,
                } => Some((*round, *server, *reason)),
                _ => None,
            })
            .collect()
    }

    pub fn reveals(&self) -> Vec<&RevealReport> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Reveal { report, .. } => Some(report),
                _ => None,
            })
            .collect()
    }

    /// Sum of `bytes` (or `payload`) over frames matching the filter.
    pub fn frame_bytes(
        &self,
        payload: bool,
        mut keep: impl FnMut(u64, Endpoint, Endpoint, FrameKind) -> bool,
    ) -> u64 {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Frame {
                    round,
                    from,
                    to,
                    kind,
                    bytes,
                    payload: p,
                    ..
                } if keep(*round, *from, *to, *kind) => {
                    Some(if payload { *p } else { *bytes } as u64)
                }
                _ => None,
            })
            .sum()
    }

    /// Bytes a client put on the wire in `round`.
    pub fn client_upstream(&self, client: u64, round: u64) -> u64 {
        self.frame_bytes(false, |r, from, _, _| {
            r == round && from == Endpoint::Client(client)
        })
    }

    /// Response payload bytes a client received over the whole run.
    pub fn client_downstream_payload(&self, client: u64) -> u64 {
        self.frame_bytes(true, |_, _, to, kind| {
            to == Endpoint::Client(client) && kind == FrameKind::Response
        })
    }
}

/// What the adversary sees: every frame on every link, the public reveals
/// and directories, and the internal state of corrupted servers: their
/// share digests, ingest decisions and (under capture) every body they
/// decrypted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryView {
    pub corrupted_servers: BTreeSet<u8>,
    pub events: Vec<TraceEvent>,
}

impl AdversaryView {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_vec(self).expect("view serializes"),
        ))
    }
}

pub fn adversary_view(trace: &Trace, script: &AdversaryScript) -> AdversaryView {
    let events = trace
        .events
        .iter()
        .filter(|e| match e {
            TraceEvent::Frame { .. }
            | TraceEvent::Reveal { .. }
            | TraceEvent::Directory { .. }
            | TraceEvent::Abort { .. }
            | TraceEvent::Adversary { .. } => true,
            TraceEvent::ShareDigest { server, .. }
            | TraceEvent::Opened { server, .. }
            | TraceEvent::Halt { server, .. }
            | TraceEvent::Ingest { server, .. } => script.corrupted_servers.contains(server),
            TraceEvent::Delivery { client, .. } => script.corrupted_clients.contains(client),
        })
        .cloned()
        .collect();
    AdversaryView {
        corrupted_servers: script.corrupted_servers.clone(),
        events,
    }
}

// ------------------------------------------------------------------ run

/// Ground truth for one real message write.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedMessage {
    pub round: u64,
    pub client: u64,
    pub topic: TopicId,
    pub body: Vec<u8>,
    pub delay: Option<u8>,
    pub index: usize,
    /// Another non-cover write used the same row this round.
    pub collided: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveredMessage {
    pub round: u64,
    pub topic: TopicId,
    pub body: Vec<u8>,
}

/// Wall time and operation counts per protocol step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCosts {
    pub dpf_gen_ops: u64,
    pub dpf_gen_secs: f64,
    pub expand_ops: u64,
    pub expand_secs: f64,
    pub audit_ops: u64,
    pub audit_secs: f64,
    pub combine_group_ops: u64,
    pub combine_group_secs: f64,
    pub pir_answer_ops: u64,
    pub pir_answer_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub seed: u64,
    pub rounds: u64,
    pub trace: Trace,
    pub published: Vec<PublishedMessage>,
    pub delivered: BTreeMap<u64, Vec<DeliveredMessage>>,
    /// Topics each client holds a real subscription slot for.
    pub interests: BTreeMap<u64, Vec<TopicId>>,
    pub aborted_rounds: BTreeSet<u64>,
    pub costs: PhaseCosts,
    pub server_metrics: Vec<ServerMetrics>,
    pub client_metrics: BTreeMap<u64, ClientMetrics>,
}

impl Run {
    /// The first halt of the honest servers, if any.
    pub fn first_halt(&self) -> Option<(u64, u8, HaltReason)> {
        self.trace.halts().into_iter().next()
    }
}

#[cfg(not(target_arch = "wasm32"))]
pub(crate) struct Stopwatch(std::time::Instant);

#[cfg(not(target_arch = "wasm32"))]
impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self(std::time::Instant::now())
    }
    pub(crate) fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[cfg(target_arch = "wasm32")]
pub(crate) struct Stopwatch;

#[cfg(target_arch = "wasm32")]
impl Stopwatch {
    pub(crate) fn start() -> Self {
        Self
    }
    pub(crate) fn secs(&self) -> f64 {
        0.0
    }
}

struct Pending {
    tick: Tick,
    from: Endpoint,
    frame: SealedFrame,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    script: &'a AdversaryScript,
    rng: ChaCha20Rng,
    servers: Vec<ServerState>,
    keys: Vec<ServerKey>,
    clients: Vec<ClientState>,
    schedule: Option<&'a Schedule>,
    adversary_key: SigningKey,
    trace: Trace,
    future: BTreeMap<u64, Vec<Pending>>,
    run_published: Vec<PublishedMessage>,
    delivered: BTreeMap<u64, Vec<DeliveredMessage>>,
    aborted: BTreeSet<u64>,
    costs: PhaseCosts,
    next_sybil: u64,
}

impl Sim<'_> {
    fn frame_event(
        &mut self,
        round: u64,
        tick: Tick,
        from: Endpoint,
        to: Endpoint,
        kind: FrameKind,
        wire: &[u8],
        payload: usize,
    ) {
        self.trace.push(TraceEvent::Frame {
            round,
            tick,
            from,
            to,
            kind,
            bytes: wire.len(),
            payload,
            digest: short_digest(wire),
            wire: self.cfg.network.capture.then(|| hex::encode(wire)),
        });
    }

    fn record_open(&mut self, round: u64, frame: &SealedFrame, kind: FrameKind) {
        if !self.cfg.network.capture {
            return;
        }
        let Some(key) = self.keys.get(frame.recipient as usize) else {
            return;
        };
        if let Ok((_, body)) = open(frame, key, self.cfg.seal_mode()) {
            self.trace.push(TraceEvent::Opened {
                round,
                server: frame.recipient,
                client: frame.client_id,
                kind,
                body: hex::encode(body),
            });
        }
    }

    fn cover_frame(
        &mut self,
        round: u64,
        client: u64,
        server: u8,
        key: &SigningKey,
    ) -> Result<SealedFrame> {
        let n = self.cfg.network.servers;
        let domain = self.cfg.write.rows;
        let index = self.rng.gen_range(0..domain);
        let width = self.cfg.layout().width();
        let shares = share_write(
            &PointFunction::new(index, vec![0u8; width]),
            n,
            domain,
            &mut self.rng,
        )?;
        let pk = self.servers[server as usize].public_key();
        let ctx = SealContext {
            recipient: server,
            recipient_pk: &pk,
            round,
            now: self.servers[0].config.clock.round_start(round) + 100,
            client_id: client,
            signing_key: key,
            mode: self.cfg.seal_mode(),
        };
        Ok(seal(
            &shares[server as usize].to_bytes(),
            &ctx,
            &mut self.rng,
        ))
    }

    fn publish_phase(&mut self, round: u64) -> Result<()> {
        let clock = self.servers[0].config.clock;
        let start = clock.round_start(round);
        let publishing = self.cfg.workload.publish_until.map_or(true, |u| round < u);
        let mut outbox: Vec<Pending> = Vec::new();
        let mut real_at: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let first_new = self.run_published.len();

        if let Some(schedule) = self.schedule {
            for c in schedule.communications.iter().filter(|c| c.round == round) {
                let client = self
                    .clients
                    .get_mut(c.publisher as usize)
                    .ok_or_else(|| config_err(format!("no client {}", c.publisher)))?;
                client.enqueue(c.topic, &c.message, c.delay)?;
            }
        }
        for ci in 0..self.clients.len() {
            if self.schedule.is_none()
                && publishing
                && self.rng.gen_bool(self.cfg.workload.publish_prob)
            {
                let topic = TopicId(self.rng.gen_range(1..=self.cfg.workload.topics));
                let mut body = vec![0u8; self.cfg.workload.message_len];
                self.rng.fill_bytes(&mut body);
                let last = body.len() - 1;
                body[last] |= 1;
                let delay = (self.rng.gen_bool(self.cfg.workload.delay_prob))
                    .then(|| self.rng.gen_range(0..=self.cfg.write.max_delay));
                self.clients[ci].enqueue(topic, &body, delay)?;
            }
            let now = start + self.rng.gen_range(0..=clock.publish_ticks / 2);
            let sw = Stopwatch::start();
            let frames = self.clients[ci].make_publish(round, now, &mut self.rng)?;
            self.costs.dpf_gen_secs += sw.secs();
            self.costs.dpf_gen_ops += 1;
            let client = &self.clients[ci];
            if let Some(rec) = client.last_publish.as_ref().filter(|r| r.round == round) {
                if let Some(m) = &rec.message {
                    real_at
                        .entry(rec.index)
                        .or_default()
                        .push(self.run_published.len());
                    self.run_published.push(PublishedMessage {
                        round,
                        client: client.id,
                        topic: m.topic,
                        body: trim_body(&m.body),
                        delay: m.delay,
                        index: rec.index,
                        collided: false,
                    });
                }
            }
            let from = Endpoint::Client(client.id);
            outbox.extend(frames.into_iter().map(|frame| Pending {
                tick: now,
                from,
                frame,
            }));
        }
        for idxs in real_at.values().filter(|v| v.len() > 1) {
            for &i in idxs {
                self.run_published[i].collided = true;
            }
        }
        debug_assert!(self.run_published[first_new..]
            .iter()
            .all(|m| m.round == round));

        self.apply_script(round, &mut outbox)?;
        outbox.extend(self.future.remove(&round).unwrap_or_default());
        outbox.sort_by_key(|p| (p.tick, p.frame.client_id, p.frame.recipient));

        for p in outbox {
            let server = p.frame.recipient;
            let wire = p.frame.to_bytes();
            self.frame_event(
                round,
                p.tick,
                p.from,
                Endpoint::Server(server),
                FrameKind::Write,
                &wire,
                wire.len(),
            );
            if (server as usize) >= self.servers.len() {
                continue;
            }
            self.record_open(round, &p.frame, FrameKind::Write);
            let s = &mut self.servers[server as usize];
            let was_halted = s.halted().is_some();
            let sw = Stopwatch::start();
            let outcome = s.ingest_write(&p.frame);
            self.costs.expand_secs += sw.secs();
            self.costs.expand_ops += 1;
            self.trace.push(TraceEvent::Ingest {
                round,
                server,
                client: p.frame.client_id,
                outcome,
            });
            if let (false, IngestOutcome::Halted(reason)) = (was_halted, outcome) {
                self.trace.push(TraceEvent::Halt {
                    round,
                    server,
                    reason,
                });
            }
        }
        Ok(())
    }

    fn apply_script(&mut self, round: u64, outbox: &mut Vec<Pending>) -> Result<()> {
        let actions: Vec<Action> = self.script.at(round).cloned().collect();
        let originals: Vec<(u64, u8, Tick, SealedFrame)> = outbox
            .iter()
            .map(|p| {
                (
                    p.frame.client_id,
                    p.frame.recipient,
                    p.tick,
                    p.frame.clone(),
                )
            })
            .collect();
        let find = |c: u64, s: u8| originals.iter().find(|o| o.0 == c && o.1 == s).cloned();
        let round_start = self.servers[0].config.clock.round_start(round);
        for action in actions {
            self.trace.push(TraceEvent::Adversary {
                round,
                action: action.clone(),
            });
            match action {
                Action::Observe => {}
                Action::Drop { client, server } => {
                    outbox
                        .retain(|p| !(p.frame.client_id == client && p.frame.recipient == server));
                }
                Action::Modify {
                    client,
                    server,
                    bit,
                } => {
                    for p in outbox.iter_mut() {
                        if p.frame.client_id == client && p.frame.recipient == server {
                            let ct = &mut p.frame.ciphertext;
                            let b = bit % (ct.len() * 8);
                            ct[b / 8] ^= 1 << (b % 8);
                        }
                    }
                }
                Action::Replay { client, server, to } => {
                    if let Some((_, _, tick, frame)) = find(client, server) {
                        let p = Pending {
                            tick: self.servers[0].config.clock.round_start(to)
                                + (tick - round_start)
                                + 1,
                            from: Endpoint::Adversary,
                            frame,
                        };
                        if to == round {
                            outbox.push(p);
                        } else if to > round {
                            self.future.entry(to).or_default().push(p);
                        }
                    }
                }
                Action::Delay {
                    client,
                    server,
                    rounds,
                } => {
                    let mut kept = Vec::new();
                    for p in outbox.drain(..) {
                        if p.frame.client_id == client && p.frame.recipient == server && rounds > 0
                        {
                            let to = round + rounds;
                            let tick = self.servers[0].config.clock.round_start(to)
                                + (p.tick - round_start);
                            self.future
                                .entry(to)
                                .or_default()
                                .push(Pending { tick, ..p });
                        } else {
                            kept.push(p);
                        }
                    }
                    *outbox = kept;
                }
                Action::Inject { server } => {
                    if (server as usize) < self.servers.len() {
                        let id = self.next_sybil;
                        self.next_sybil += 1;
                        let key = SigningKey::generate(&mut self.rng);
                        let frame = self.cover_frame(round, id, server, &key)?;
                        outbox.push(Pending {
                            tick: round_start + 100,
                            from: Endpoint::Adversary,
                            frame,
                        });
                    }
                }
                Action::InjectForged { client, server } => {
                    if (server as usize) < self.servers.len() {
                        let key = self.adversary_key.clone();
                        let frame = self.cover_frame(round, client, server, &key)?;
                        outbox.push(Pending {
                            tick: round_start + 100,
                            from: Endpoint::Adversary,
                            frame,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn audit_phase(&mut self, round: u64) -> bool {
        let n = self.servers.len();
        let tick =
            self.servers[0].config.clock.round_start(round) + self.servers[0].config.clock.window();
        let all: Vec<_> = self.servers.iter().map(|s| s.sketches().clone()).collect();
        for (i, sk) in all.iter().enumerate() {
            if self.servers[i].halted().is_some() {
                continue;
            }
            for j in (0..n).filter(|&j| j != i) {
                let mut wire = Vec::with_capacity(sk.len() * SKETCH_FRAME_BYTES);
                for s in sk.values() {
                    wire.extend_from_slice(&s.to_bytes());
                }
                self.frame_event(
                    round,
                    tick,
                    Endpoint::Server(i as u8),
                    Endpoint::Server(j as u8),
                    FrameKind::Sketch,
                    &wire,
                    wire.len(),
                );
            }
        }
        let mut ok = true;
        for i in 0..n {
            let was_halted = self.servers[i].halted().is_some();
            let peers: Vec<_> = all
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, m)| m)
                .collect();
            let sw = Stopwatch::start();
            let verdict = self.servers[i].end_publish_phase(&peers);
            self.costs.audit_secs += sw.secs();
            self.costs.audit_ops += all[i].len() as u64;
            if let PublishVerdict::Halt(reason) = verdict {
                ok = false;
                if !was_halted {
                    self.trace.push(TraceEvent::Halt {
                        round,
                        server: i as u8,
                        reason,
                    });
                }
            }
            let dw_digest = short_digest(self.servers[i].dw.matrix().as_bytes());
            self.trace.push(TraceEvent::ShareDigest {
                round,
                server: i as u8,
                digest: dw_digest,
            });
        }
        ok
    }

    fn abort(&mut self, round: u64, reason: String) {
        self.trace.push(TraceEvent::Abort { round, reason });
        self.aborted.insert(round);
        for c in &mut self.clients {
            c.round_aborted(round);
        }
    }

    fn reveal_phase(&mut self, round: u64) -> Result<bool> {
        let clock = self.servers[0].config.clock;
        let tick = clock.round_start(round) + clock.window() + 1;
        let n = self.servers.len();
        for i in 0..n {
            let wire = self.servers[i].dw.to_frame(i as u8);
            for j in (0..n).filter(|&j| j != i) {
                self.frame_event(
                    round,
                    tick,
                    Endpoint::Server(i as u8),
                    Endpoint::Server(j as u8),
                    FrameKind::Share,
                    &wire,
                    wire.len(),
                );
            }
        }
        let sw = Stopwatch::start();
        let result = reveal_and_group(&mut self.servers);
        self.costs.combine_group_secs += sw.secs();
        self.costs.combine_group_ops += 1;
        match result {
            Ok(report) => {
                let mut h = Sha256::new();
                for b in self.servers[0].dr.blocks() {
                    h.update(b);
                }
                self.trace.push(TraceEvent::Reveal {
                    round,
                    report,
                    digest: hex::encode(&h.finalize()[..8]),
                });
                Ok(true)
            }
            Err(Error::Availability(msg)) => {
                self.abort(round, msg);
                Ok(false)
            }
            Err(e) => Err(e),
        }
    }

    fn serve_phase(&mut self, round: u64) -> Result<()> {
        let clock = self.servers[0].config.clock;
        let tick = clock.round_start(round) + clock.publish_ticks + clock.round_ticks / 2;
        let n = self.servers.len();
        let block_size = self.servers[0].dr.block_size();
        let mut gathered: BTreeMap<(u64, u8), Vec<Option<Vec<u8>>>> = BTreeMap::new();
        let mut proxies: BTreeMap<u64, u8> = BTreeMap::new();
        for i in 0..n {
            let sw = Stopwatch::start();
            let answers = self.servers[i].serve_subscriptions()?;
            self.costs.pir_answer_secs += sw.secs();
            self.costs.pir_answer_ops += answers.len() as u64;
            for (proxy, ans) in answers {
                if proxy as usize != i {
                    let wire = ans.to_bytes();
                    self.frame_event(
                        round,
                        tick,
                        Endpoint::Server(i as u8),
                        Endpoint::Server(proxy),
                        FrameKind::Answer,
                        &wire,
                        ans.payload.len(),
                    );
                }
                proxies.insert(ans.client_id, proxy);
                gathered
                    .entry((ans.client_id, ans.slot))
                    .or_insert_with(|| vec![None; n])[i] = Some(ans.payload);
            }
        }
        for ci in 0..self.clients.len() {
            let id = self.clients[ci].id;
            let slots = self.clients[ci].slots.len();
            if slots == 0 {
                continue;
            }
            let mut responses = Vec::with_capacity(slots);
            for slot in 0..slots as u8 {
                let combined = gathered
                    .remove(&(id, slot))
                    .and_then(|parts| parts.into_iter().collect::<Option<Vec<_>>>())
                    .and_then(|parts| proxy_combine(&parts).ok());
                if let Some(c) = &combined {
                    let mut wire = Vec::with_capacity(MASKED_ANSWER_HEADER + c.len());
                    wire.extend_from_slice(&round.to_le_bytes());
                    wire.extend_from_slice(&id.to_le_bytes());
                    wire.push(slot);
                    wire.extend_from_slice(&(c.len() as u32).to_le_bytes());
                    wire.extend_from_slice(c);
                    let proxy = proxies.get(&id).copied().unwrap_or(0);
                    self.frame_event(
                        round,
                        tick + 1,
                        Endpoint::Server(proxy),
                        Endpoint::Client(id),
                        FrameKind::Response,
                        &wire,
                        c.len(),
                    );
                }
                responses.push(combined);
            }
            let deliveries =
                self.clients[ci].decode_round(round, block_size, &responses, &mut self.rng);
            for d in deliveries {
                self.trace.push(TraceEvent::Delivery {
                    round,
                    client: id,
                    topic: d.topic.0,
                    messages: d.messages.len(),
                });
                let log = self.delivered.entry(id).or_default();
                log.extend(d.messages.into_iter().map(|body| DeliveredMessage {
                    round,
                    topic: d.topic,
                    body,
                }));
            }
        }
        Ok(())
    }

    /// Directory rebuild on every server, then subscription refresh.
    fn update_directory(&mut self, round: u64) -> Result<()> {
        let mut dirs = Vec::new();
        for s in &mut self.servers {
            dirs.push(s.update_directory().clone());
        }
        if dirs.iter().any(|d| d.entries != dirs[0].entries) {
            return Err(Error::Availability(
                "servers disagree on the directory".into(),
            ));
        }
        let dir = dirs.swap_remove(0);
        self.trace.push(TraceEvent::Directory {
            round,
            version: dir.version,
            topics: dir.topics_by_block().iter().map(|t| t.0).collect(),
        });
        self.distribute_directory(round, &dir, round + 1)
    }

    fn distribute_directory(
        &mut self,
        round: u64,
        dir: &TopicDirectory,
        first_round: u64,
    ) -> Result<()> {
        let clock = self.servers[0].config.clock;
        let tick = clock.round_start(round) + clock.round_ticks - 1;
        let frame = dir.to_frame();
        for ci in 0..self.clients.len() {
            let id = self.clients[ci].id;
            self.frame_event(
                round,
                tick,
                Endpoint::Server(0),
                Endpoint::Client(id),
                FrameKind::Directory,
                &frame,
                frame.len(),
            );
            let subs =
                self.clients[ci].refresh_subscriptions(dir, first_round, tick, &mut self.rng)?;
            let proxy = self.clients[ci].proxy;
            for f in subs {
                let wire = f.to_bytes();
                self.frame_event(
                    round,
                    tick,
                    Endpoint::Client(id),
                    Endpoint::Server(proxy),
                    FrameKind::Subscribe,
                    &wire,
                    wire.len(),
                );
                if f.recipient != proxy {
                    self.frame_event(
                        round,
                        tick,
                        Endpoint::Server(proxy),
                        Endpoint::Server(f.recipient),
                        FrameKind::Subscribe,
                        &wire,
                        wire.len(),
                    );
                }
                self.record_open(round, &f, FrameKind::Subscribe);
                self.servers[f.recipient as usize].register_subscription(&f, proxy, first_round)?;
            }
        }
        Ok(())
    }
}

/// One scheduled publication.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Communication {
    pub round: u64,
    pub publisher: u64,
    pub topic: TopicId,
    pub message: Vec<u8>,
    pub delay: Option<u8>,
}

/// A fixed workload replacing the random one: scheduled publications and
/// each client's subscriptions. Clients absent from `subscriptions` only
/// send cover queries.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub communications: Vec<Communication>,
    pub subscriptions: BTreeMap<u64, Vec<TopicId>>,
}

/// Runs `rounds` rounds of the protocol under `script` with the random
/// workload of `config`.
pub fn run_scenario(
    config: &ScenarioConfig,
    script: &AdversaryScript,
    rounds: u64,
    seed: u64,
) -> Result<Run> {
    run_inner(config, script, None, rounds, seed)
}

/// Like [`run_scenario`] with a fixed workload.
pub fn run_schedule(
    config: &ScenarioConfig,
    script: &AdversaryScript,
    schedule: &Schedule,
    rounds: u64,
    seed: u64,
) -> Result<Run> {
    for (c, topics) in &schedule.subscriptions {
        if *c >= config.network.clients as u64 || topics.len() > config.read.slots {
            return Err(config_err(format!("bad subscriptions for client {c}")));
        }
    }
    run_inner(config, script, Some(schedule), rounds, seed)
}

fn run_inner(
    config: &ScenarioConfig,
    script: &AdversaryScript,
    schedule: Option<&Schedule>,
    rounds: u64,
    seed: u64,
) -> Result<Run> {
    config.validate()?;
    script.validate(config.network.servers)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = config.network.servers;
    let topics: Vec<TopicId> = (1..=config.workload.topics).map(TopicId).collect();
    let dir = TopicDirectory::with_topics(topics.iter().copied());
    let audit_key: [u8; 16] = rng.gen();
    let scfg = config.server_config();
    let keys: Vec<ServerKey> = (0..n).map(|_| ServerKey::generate(&mut rng)).collect();
    let servers: Vec<ServerState> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| {
            ServerState::new(i as u8, scfg.clone(), key.clone(), audit_key, dir.clone())
        })
        .collect();
    let pks: Vec<_> = servers.iter().map(|s| s.public_key()).collect();
    let ccfg = config.client_config();
    let mut interests = BTreeMap::new();
    let clients: Vec<ClientState> = (0..config.network.clients as u64)
        .map(|id| {
            let mine = match schedule {
                Some(s) => s.subscriptions.get(&id).cloned().unwrap_or_default(),
                None => {
                    let mut pool = topics.clone();
                    let mut mine = Vec::new();
                    for _ in 0..config.workload.interests {
                        mine.push(pool.swap_remove(rng.gen_range(0..pool.len())));
                    }
                    mine
                }
            };
            interests.insert(id, mine.clone());
            ClientState::new(id, ccfg.clone(), pks.clone(), mine, &mut rng)
        })
        .collect();
    let adversary_key = SigningKey::generate(&mut rng);

    let mut sim = Sim {
        cfg: config,
        script,
        rng,
        servers,
        keys,
        clients,
        schedule,
        adversary_key,
        trace: Trace::default(),
        future: BTreeMap::new(),
        run_published: Vec::new(),
        delivered: BTreeMap::new(),
        aborted: BTreeSet::new(),
        costs: PhaseCosts::default(),
        next_sybil: 1 << 40,
    };

    for ci in 0..sim.clients.len() {
        let (c, sig) = sim.clients[ci].commit(0, rounds.max(1));
        for s in &mut sim.servers {
            s.register_commitment(c.clone(), &sig);
        }
    }
    sim.trace.push(TraceEvent::Directory {
        round: 0,
        version: dir.version,
        topics: dir.topics_by_block().iter().map(|t| t.0).collect(),
    });
    sim.distribute_directory(0, &dir, 0)?;

    let epoch = config.read.epoch;
    let mut update_due = false;
    for round in 0..rounds {
        for s in &mut sim.servers {
            s.start_round(round);
        }
        sim.publish_phase(round)?;
        let proceed = sim.audit_phase(round);
        if (round + 1) % epoch == 0 {
            update_due = true;
        }
        if !proceed {
            sim.abort(round, "halted".into());
            continue;
        }
        if !sim.reveal_phase(round)? {
            continue;
        }
        debug_assert!(sim
            .servers
            .iter()
            .all(|s| s.ledger.phase() == Phase::Retrieve));
        sim.serve_phase(round)?;
        for s in &mut sim.servers {
            s.end_round();
        }
        if update_due {
            sim.update_directory(round)?;
            update_due = false;
        }
    }

    Ok(Run {
        seed,
        rounds,
        published: sim.run_published,
        delivered: sim.delivered,
        interests,
        aborted_rounds: sim.aborted,
        costs: sim.costs,
        server_metrics: sim.servers.iter().map(|s| s.metrics.clone()).collect(),
        client_metrics: sim
            .clients
            .iter()
            .map(|c| (c.id, c.metrics.clone()))
            .collect(),
        trace: sim.trace,
    })
}
