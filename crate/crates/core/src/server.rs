//! One server's side of the round: write ingestion with its defenses,
//! the audit barrier, reveal and grouping into topic blocks, the topic
//! lifecycle, delayed publishing and PIR serving.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audit::{request_nonce, AuditSketch, Auditor};
use crate::dpf::WriteShare;
use crate::envelope::{
    advance_secret, open, open_sealed, ParticipationCommitment, RoundClock, SealMode, SealedFrame,
    SecretSchedule, ServerKey,
};
use crate::error::{check_len, invalid, Error, Result};
use crate::model::{
    compute_block_size, rebuild_directory, Phase, ReadDatabase, RoundLedger, RowClass, RowLayout,
    TopicDirectory, TopicId, WriteDatabase, WriteRow,
};
use crate::pir::{
    answer, mask_answer, MaskedAnswer, PirQuery, SubscriptionBody, SubscriptionRecord,
};

/// Bytes of a sealed delayed row spent on the delay and the inner topic.
pub const DELAY_HEADER: usize = 1 + 4;

/// What to do with a byte-identical frame seen twice in one round.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DuplicatePolicy {
    #[default]
    Dedupe,
    Halt,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub n_servers: usize,
    pub domain: usize,
    pub layout: RowLayout,
    pub alignment: usize,
    pub expiry_rounds: u32,
    pub max_delay: u8,
    /// Largest block size in bytes, 0 for unbounded. Rows that do not fit
    /// wait for the next round.
    pub block_cap: usize,
    pub clock: RoundClock,
    pub seal_mode: SealMode,
    pub duplicate_policy: DuplicatePolicy,
}

impl ServerConfig {
    pub fn new(n_servers: usize, domain: usize, layout: RowLayout) -> Self {
        Self {
            n_servers,
            domain,
            layout,
            alignment: 1024,
            expiry_rounds: 20,
            max_delay: 3,
            block_cap: 0,
            clock: RoundClock::default(),
            seal_mode: SealMode::Encrypted,
            duplicate_policy: DuplicatePolicy::Dedupe,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    /// Stale timestamp, wrong round or an undecryptable body.
    Freshness,
    DuplicateFrame,
    DropDetected,
    AuditFailed,
}

impl HaltReason {
    pub fn label(self) -> &'static str {
        match self {
            HaltReason::Freshness => "replay-freshness-halt",
            HaltReason::DuplicateFrame => "duplicate-frame-halt",
            HaltReason::DropDetected => "drop-detected-halt",
            HaltReason::AuditFailed => "audit-failed-halt",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    UnknownClient,
    BadSignature,
    WrongRecipient,
    Duplicate,
    Malformed,
    Halted,
    WrongPhase,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestOutcome {
    Accepted,
    Discarded(DiscardReason),
    Halted(HaltReason),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PublishVerdict {
    Proceed,
    Halt(HaltReason),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerMetrics {
    pub accepted: u64,
    pub discarded: u64,
    pub duplicate_alerts: u64,
    pub collisions: u64,
    pub stale_queries: u64,
    pub answers: u64,
    pub secrets_advanced: u64,
}

/// Per-round outcome of grouping, identical on every honest server.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealReport {
    pub round: u64,
    pub cover_rows: usize,
    pub collided_rows: usize,
    /// Non-cover rows that passed the checksum, sealed delayed rows included.
    pub valid_rows: usize,
    pub sealed_rows: usize,
    pub released_rows: usize,
    pub injected_rows: usize,
    pub grouped_rows: usize,
    pub held_rows: usize,
    pub block_size: usize,
    pub blocks: usize,
}

/// Rows of the combined write database sorted by what happens to them.
#[derive(Clone, Debug, Default)]
struct Classified {
    plain: Vec<WriteRow>,
    sealed: usize,
    cover: usize,
    collided: usize,
}

/// One server's full state.
pub struct ServerState {
    pub index: u8,
    pub config: ServerConfig,
    key: ServerKey,
    audit_key: [u8; 16],
    auditor: Auditor,
    pub dw: WriteDatabase,
    pub dr: ReadDatabase,
    pub directory: TopicDirectory,
    pub ledger: RoundLedger,
    pub subs: BTreeMap<(u64, u8), (u8, SubscriptionRecord)>,
    pub delayed: BTreeMap<u64, Vec<WriteRow>>,
    held: Vec<WriteRow>,
    seen_ciphertexts: HashSet<[u8; 32]>,
    sketches: BTreeMap<u64, AuditSketch>,
    scratch: Option<Classified>,
    last_counts: BTreeMap<TopicId, usize>,
    halted: Option<HaltReason>,
    pub metrics: ServerMetrics,
}

fn round_audit_seed(audit_key: &[u8; 16], round: u64) -> [u8; 16] {
    let mut h = Sha256::new();
    h.update(b"2pps-audit-seed");
    h.update(audit_key);
    h.update(round.to_le_bytes());
    h.finalize()[..16].try_into().unwrap()
}

fn ciphertext_digest(ct: &[u8]) -> [u8; 32] {
    Sha256::digest(ct).into()
}

impl ServerState {
    /// `audit_key` is shared by all servers and never given to clients.
    pub fn new(
        index: u8,
        config: ServerConfig,
        key: ServerKey,
        audit_key: [u8; 16],
        directory: TopicDirectory,
    ) -> Self {
        let auditor = Auditor::new(round_audit_seed(&audit_key, 0), config.domain);
        Self {
            index,
            dw: WriteDatabase::new(0, config.domain, config.layout),
            dr: ReadDatabase::empty(0, directory.clone(), config.alignment),
            directory,
            ledger: RoundLedger::new(0),
            subs: BTreeMap::new(),
            delayed: BTreeMap::new(),
            held: Vec::new(),
            seen_ciphertexts: HashSet::new(),
            sketches: BTreeMap::new(),
            scratch: None,
            last_counts: BTreeMap::new(),
            halted: None,
            metrics: ServerMetrics::default(),
            config,
            key,
            audit_key,
            auditor,
        }
    }

    pub fn public_key(&self) -> x25519_dalek::PublicKey {
        self.key.public()
    }

    pub fn round(&self) -> u64 {
        self.ledger.round
    }

    pub fn halted(&self) -> Option<HaltReason> {
        self.halted
    }

    /// Rows waiting for their topic to get a block.
    pub fn held(&self) -> &[WriteRow] {
        &self.held
    }

    /// Stores a client's participation pledge if its self-signature holds.
    pub fn register_commitment(&mut self, c: ParticipationCommitment, signature: &[u8]) -> bool {
        if !c.verify_signature(signature) {
            return false;
        }
        self.ledger.commit(c);
        true
    }

    /// Resets per-round state: empty `D_w`, fresh ledger, new audit seed.
    pub fn start_round(&mut self, round: u64) {
        let commitments = std::mem::take(&mut self.ledger.commitments);
        self.ledger = RoundLedger::new(round);
        self.ledger.commitments = commitments
            .into_iter()
            .filter(|(_, c)| c.start_round + c.k > round)
            .collect();
        self.dw.reset(round);
        self.seen_ciphertexts.clear();
        self.sketches.clear();
        self.scratch = None;
        self.halted = None;
        self.auditor = Auditor::new(round_audit_seed(&self.audit_key, round), self.config.domain);
    }

    fn halt(&mut self, reason: HaltReason) -> IngestOutcome {
        self.halted = Some(reason);
        IngestOutcome::Halted(reason)
    }

    fn discard(&mut self, reason: DiscardReason) -> IngestOutcome {
        self.metrics.discarded += 1;
        IngestOutcome::Discarded(reason)
    }

    /// Runs one write frame through the ingestion pipeline.
    pub fn ingest_write(&mut self, frame: &SealedFrame) -> IngestOutcome {
        if self.halted.is_some() {
            return self.discard(DiscardReason::Halted);
        }
        if self.ledger.phase() != Phase::Publish {
            return self.discard(DiscardReason::WrongPhase);
        }
        if frame.recipient != self.index {
            return self.discard(DiscardReason::WrongRecipient);
        }
        let Some(commitment) = self.ledger.commitments.get(&frame.client_id) else {
            return self.discard(DiscardReason::UnknownClient);
        };
        let signed = commitment
            .verifying_key()
            .map(|vk| frame.verify(&vk))
            .unwrap_or(false);
        if !signed {
            return self.discard(DiscardReason::BadSignature);
        }

        let digest = ciphertext_digest(&frame.ciphertext);
        if !self.seen_ciphertexts.insert(digest) {
            self.metrics.duplicate_alerts += 1;
            return match self.config.duplicate_policy {
                DuplicatePolicy::Dedupe => self.discard(DiscardReason::Duplicate),
                DuplicatePolicy::Halt => self.halt(HaltReason::DuplicateFrame),
            };
        }

        let Ok((ts, body)) = open(frame, &self.key, self.config.seal_mode) else {
            return self.halt(HaltReason::Freshness);
        };
        let round = self.ledger.round;
        if frame.round != round || !self.config.clock.check_freshness(ts, round) {
            return self.halt(HaltReason::Freshness);
        }
        if !self.ledger.is_expected(frame.client_id) {
            return self.discard(DiscardReason::UnknownClient);
        }
        if self.ledger.seen.contains(&frame.client_id) {
            self.metrics.duplicate_alerts += 1;
            return self.discard(DiscardReason::Duplicate);
        }

        let expansion = match WriteShare::from_bytes(&body)
            .and_then(|s| s.expand(self.config.domain, self.config.layout.width()))
        {
            Ok(m) => m,
            Err(_) => return self.discard(DiscardReason::Malformed),
        };
        let nonce = request_nonce(round, frame.client_id);
        let sketch = self
            .auditor
            .sketch(&expansion, nonce)
            .expect("expansion has domain rows");
        self.sketches.insert(frame.client_id, sketch);
        self.dw
            .absorb(&expansion)
            .expect("expansion matches database shape");
        self.ledger
            .mark_seen(frame.client_id)
            .expect("client checked as expected");
        self.metrics.accepted += 1;
        IngestOutcome::Accepted
    }

    /// This server's audit sketches for the round, keyed by client.
    pub fn sketches(&self) -> &BTreeMap<u64, AuditSketch> {
        &self.sketches
    }

    /// Closes the publish window: every committed client must have been
    /// seen and every request must pass the audit against the peers'
    /// sketches.
    pub fn end_publish_phase(
        &mut self,
        peer_sketches: &[&BTreeMap<u64, AuditSketch>],
    ) -> PublishVerdict {
        if let Some(r) = self.halted {
            return PublishVerdict::Halt(r);
        }
        if !self.ledger.missing().is_empty() {
            self.halted = Some(HaltReason::DropDetected);
            return PublishVerdict::Halt(HaltReason::DropDetected);
        }
        for (client, own) in &self.sketches {
            let mut all = vec![*own];
            for peer in peer_sketches {
                match peer.get(client) {
                    Some(s) => all.push(*s),
                    None => {
                        self.halted = Some(HaltReason::AuditFailed);
                        return PublishVerdict::Halt(HaltReason::AuditFailed);
                    }
                }
            }
            if !self.auditor.combine(&all).accepted {
                self.halted = Some(HaltReason::AuditFailed);
                return PublishVerdict::Halt(HaltReason::AuditFailed);
            }
        }
        self.ledger.advance();
        PublishVerdict::Proceed
    }

    /// The `D_w` share this server contributes to the reveal, unless halted.
    pub fn share_for_reveal(&self) -> Option<&WriteDatabase> {
        match (self.halted, self.ledger.phase()) {
            (None, Phase::Manage) => Some(&self.dw),
            _ => None,
        }
    }

    /// Decrypts a sealed delayed row addressed to this server and holds
    /// the inner row until its round. Returns false for rows that belong to
    /// another server or do not parse.
    pub fn schedule_delayed(&mut self, row: &WriteRow) -> bool {
        if row.topic != TopicId::SEALED_DELAYED {
            return false;
        }
        let Ok(inner) = open_sealed(&self.key, row.body()) else {
            return false;
        };
        if inner.len() < DELAY_HEADER {
            return false;
        }
        let d = inner[0].min(self.config.max_delay);
        let topic = TopicId(u32::from_le_bytes(inner[1..5].try_into().unwrap()));
        let Ok(plain) = WriteRow::new(self.config.layout, topic, &inner[DELAY_HEADER..]) else {
            return false;
        };
        if !topic.is_assignable() {
            return false;
        }
        self.delayed
            .entry(self.ledger.round + d as u64)
            .or_default()
            .push(plain);
        true
    }

    /// First reveal step: classify the combined rows, take ownership of
    /// this server's sealed delayed rows and hand back the ones now due.
    pub fn begin_reveal(&mut self, combined: &WriteDatabase) -> Result<Vec<WriteRow>> {
        self.ledger.require(Phase::Manage, "reveal")?;
        check_len(self.config.domain, combined.rows())?;
        let mut c = Classified::default();
        for bytes in combined.matrix().iter_rows() {
            match WriteRow::classify(bytes) {
                RowClass::Cover => c.cover += 1,
                RowClass::Collided => c.collided += 1,
                RowClass::Valid(row) if row.topic == TopicId::SEALED_DELAYED => {
                    c.sealed += 1;
                    self.schedule_delayed(&row);
                }
                RowClass::Valid(row) => c.plain.push(row),
            }
        }
        self.metrics.collisions += 2 * c.collided as u64;
        self.scratch = Some(c);
        Ok(self.delayed.remove(&self.ledger.round).unwrap_or_default())
    }

    /// Second reveal step: group this round's rows, the released delayed
    /// rows of all servers and previously held rows into `D_r`.
    pub fn finish_reveal(&mut self, released: &[WriteRow]) -> Result<RevealReport> {
        self.ledger.require(Phase::Manage, "reveal")?;
        let c = self
            .scratch
            .take()
            .ok_or_else(|| invalid("finish_reveal before begin_reveal"))?;
        let width = self.config.layout.width();
        let held = std::mem::take(&mut self.held);
        let mut report = RevealReport {
            round: self.ledger.round,
            cover_rows: c.cover,
            collided_rows: c.collided,
            valid_rows: c.plain.len() + c.sealed,
            sealed_rows: c.sealed,
            released_rows: released.len(),
            injected_rows: held.len(),
            ..RevealReport::default()
        };

        let per_topic_cap = match self.config.block_cap {
            0 => usize::MAX,
            cap => (cap / width).max(1),
        };
        let mut grouped = Vec::new();
        let mut counts: BTreeMap<TopicId, usize> = BTreeMap::new();
        for row in held
            .into_iter()
            .chain(c.plain)
            .chain(released.iter().cloned())
        {
            if !self.directory.contains(row.topic) {
                self.directory.note_unknown(row.topic);
                self.held.push(row);
                continue;
            }
            let n = counts.entry(row.topic).or_insert(0);
            if *n >= per_topic_cap {
                self.held.push(row);
                continue;
            }
            *n += 1;
            grouped.push(row);
        }

        let block_size = compute_block_size(&counts, width, self.config.alignment);
        self.dr = ReadDatabase::build(
            self.ledger.round,
            self.directory.clone(),
            &grouped,
            block_size,
        )?;
        self.directory.record_round(&counts);
        self.last_counts = counts;

        report.grouped_rows = grouped.len();
        report.held_rows = self.held.len();
        report.block_size = block_size;
        report.blocks = self.dr.len();
        self.ledger.advance();
        Ok(report)
    }

    /// Stores (or replaces) one subscription slot share forwarded by
    /// `proxy`. Its secret schedule starts at `first_round`.
    pub fn register_subscription(
        &mut self,
        frame: &SealedFrame,
        proxy: u8,
        first_round: u64,
    ) -> Result<()> {
        if frame.recipient != self.index {
            return Err(invalid("subscription addressed to another server"));
        }
        let c = self
            .ledger
            .commitments
            .get(&frame.client_id)
            .ok_or_else(|| invalid("subscription from uncommitted client"))?;
        if !frame.verify(&c.verifying_key()?) {
            return Err(Error::Malformed("bad subscription signature".into()));
        }
        let (_, body) = open(frame, &self.key, self.config.seal_mode)?;
        let body = SubscriptionBody::from_bytes(&body)?;
        check_len(self.directory.len(), body.query.len())?;
        let record = SubscriptionRecord {
            client_id: frame.client_id,
            slot: body.slot,
            query: body.query,
            secret: SecretSchedule::new(body.seed, first_round),
            directory_version: self.directory.version,
        };
        self.subs
            .insert((frame.client_id, body.slot), (proxy, record));
        Ok(())
    }

    /// One masked answer per stored record, each addressed to the proxy
    /// that forwarded it. Secrets move forward once per served round.
    pub fn serve_subscriptions(&mut self) -> Result<Vec<(u8, MaskedAnswer)>> {
        if self.halted.is_some() {
            return Ok(Vec::new());
        }
        self.ledger.require(Phase::Retrieve, "serve")?;
        let round = self.ledger.round;
        let blocks = self.dr.len();
        let mut out = Vec::with_capacity(self.subs.len());
        for (proxy, rec) in self.subs.values_mut() {
            let stale = rec.query.len() != blocks;
            let query = if stale {
                self.metrics.stale_queries += 1;
                let mut q = PirQuery::zeros(blocks);
                for k in rec.query.bits.iter_ones().filter(|&k| k < blocks) {
                    q.bits.set(k, true);
                }
                q
            } else {
                rec.query.clone()
            };
            while rec.secret.round < round {
                rec.secret = advance_secret(&rec.secret);
            }
            if rec.secret.round > round {
                continue;
            }
            let ans = answer(&query, &self.dr)?;
            out.push((
                *proxy,
                MaskedAnswer {
                    round,
                    client_id: rec.client_id,
                    slot: rec.slot,
                    payload: mask_answer(&ans, &rec.secret),
                },
            ));
            rec.secret = advance_secret(&rec.secret);
            self.metrics.secrets_advanced += 1;
        }
        self.metrics.answers += out.len() as u64;
        Ok(out)
    }

    /// Directory update: expire, promote and re-pack. Held rows for newly
    /// promoted topics are grouped at the next reveal.
    pub fn update_directory(&mut self) -> &TopicDirectory {
        self.directory = rebuild_directory(
            &self.directory,
            &self.last_counts,
            self.config.expiry_rounds,
        );
        &self.directory
    }

    /// Ends the retrieve phase.
    pub fn end_round(&mut self) {
        if self.halted.is_none() && self.ledger.phase() == Phase::Retrieve {
            self.ledger.advance();
        }
    }
}

/// XOR of every server's `D_w`; a missing share stalls the round.
pub fn combine_shares(shares: &[Option<&WriteDatabase>]) -> Result<WriteDatabase> {
    let mut it = shares.iter();
    let first = it
        .next()
        .and_then(|s| *s)
        .ok_or_else(|| Error::Availability("server 0 withheld its share".into()))?;
    let mut combined = first.clone();
    for (i, s) in it.enumerate() {
        let s =
            s.ok_or_else(|| Error::Availability(format!("server {} withheld its share", i + 1)))?;
        combined.combine(s)?;
    }
    Ok(combined)
}

/// Reveal across all servers: combine the shares, release due delayed rows,
/// group on every server and check that all servers agree on `D_r`
/// (server 0 proposes, the others must match).
pub fn reveal_and_group(servers: &mut [ServerState]) -> Result<RevealReport> {
    let combined = {
        let shares: Vec<_> = servers.iter().map(|s| s.share_for_reveal()).collect();
        combine_shares(&shares)?
    };
    let mut released = Vec::new();
    for s in servers.iter_mut() {
        released.extend(s.begin_reveal(&combined)?);
    }
    let mut report = None;
    for s in servers.iter_mut() {
        let r = s.finish_reveal(&released)?;
        report.get_or_insert(r);
    }
    let proposal = &servers[0].dr;
    for s in &servers[1..] {
        if s.dr.block_size() != proposal.block_size() || s.dr.blocks() != proposal.blocks() {
            return Err(Error::Availability(format!(
                "server {} disagrees on the read database",
                s.index
            )));
        }
    }
    report.ok_or_else(|| invalid("no servers"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpf::{share_write, PointFunction};
    use crate::envelope::{seal, seal_to, SealContext, SEAL_OVERHEAD};
    use crate::pir::{decode_retrieval, gen_queries, proxy_combine};
    use ed25519_dalek::SigningKey;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    struct Net {
        servers: Vec<ServerState>,
        clients: Vec<SigningKey>,
        layout: RowLayout,
        rng: ChaCha20Rng,
    }

    fn net(n: usize, clients: usize, topics: &[u32]) -> Net {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let layout = RowLayout::new(64).unwrap();
        let cfg = ServerConfig::new(n, 64, layout);
        let audit_key = rng.gen();
        let dir = TopicDirectory::with_topics(topics.iter().map(|&t| TopicId(t)));
        let mut servers: Vec<_> = (0..n)
            .map(|i| {
                let key = ServerKey::generate(&mut rng);
                ServerState::new(i as u8, cfg.clone(), key, audit_key, dir.clone())
            })
            .collect();
        let clients: Vec<_> = (0..clients)
            .map(|_| SigningKey::generate(&mut rng))
            .collect();
        for (id, sk) in clients.iter().enumerate() {
            let c = ParticipationCommitment::new(id as u64, 0, 100, &sk.verifying_key());
            let sig = c.sign(sk);
            for s in &mut servers {
                assert!(s.register_commitment(c.clone(), &sig));
            }
        }
        Net {
            servers,
            clients,
            layout,
            rng,
        }
    }

    impl Net {
        fn start(&mut self, round: u64) {
            for s in &mut self.servers {
                s.start_round(round);
            }
        }

        fn frames_for(
            &mut self,
            client: usize,
            round: u64,
            value: Vec<u8>,
            index: usize,
        ) -> Vec<SealedFrame> {
            let n = self.servers.len();
            let f = PointFunction::new(index, value);
            let shares = share_write(&f, n, 64, &mut self.rng).unwrap();
            let now = self.servers[0].config.clock.round_start(round) + 10;
            shares
                .iter()
                .enumerate()
                .map(|(i, sh)| {
                    let pk = self.servers[i].public_key();
                    let ctx = SealContext {
                        recipient: i as u8,
                        recipient_pk: &pk,
                        round,
                        now,
                        client_id: client as u64,
                        signing_key: &self.clients[client],
                        mode: SealMode::Encrypted,
                    };
                    seal(&sh.to_bytes(), &ctx, &mut self.rng)
                })
                .collect()
        }

        fn publish(
            &mut self,
            client: usize,
            round: u64,
            topic: u32,
            body: &[u8],
        ) -> Vec<SealedFrame> {
            let value = WriteRow::new(self.layout, TopicId(topic), body)
                .unwrap()
                .to_bytes();
            let index = self.rng.gen_range(0..64);
            self.frames_for(client, round, value, index)
        }

        fn cover(&mut self, client: usize, round: u64) -> Vec<SealedFrame> {
            let index = self.rng.gen_range(0..64);
            self.frames_for(client, round, vec![0u8; self.layout.width()], index)
        }

        fn deliver(&mut self, frames: &[SealedFrame]) -> Vec<IngestOutcome> {
            frames
                .iter()
                .map(|f| self.servers[f.recipient as usize].ingest_write(f))
                .collect()
        }

        fn end_publish(&mut self) -> Vec<PublishVerdict> {
            let all: Vec<_> = self.servers.iter().map(|s| s.sketches().clone()).collect();
            (0..self.servers.len())
                .map(|i| {
                    let peers: Vec<_> = all
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, m)| m)
                        .collect();
                    self.servers[i].end_publish_phase(&peers)
                })
                .collect()
        }
    }

    #[test]
    fn honest_round_groups_by_topic() {
        let mut n = net(2, 5, &[1, 2, 3]);
        n.start(0);
        let writes = [(0, 1, b"m1"), (1, 1, b"m2"), (2, 3, b"m3"), (3, 2, b"m4")];
        let mut frames = Vec::new();
        loop {
            frames.clear();
            let mut idx = HashSet::new();
            for &(c, t, m) in &writes {
                let f = n.publish(c, 0, t, m);
                frames.push(f);
            }
            // retry until the four writers land on distinct rows
            n.start(0);
            let outcomes: Vec<_> = frames.iter().flat_map(|f| n.deliver(f)).collect();
            assert!(outcomes.iter().all(|o| *o == IngestOutcome::Accepted));
            let cover = n.cover(4, 0);
            n.deliver(&cover);
            for s in &n.servers {
                idx.insert(s.ledger.seen.len());
            }
            assert_eq!(idx, HashSet::from([5]));
            assert!(n
                .end_publish()
                .iter()
                .all(|v| *v == PublishVerdict::Proceed));
            let report = reveal_and_group(&mut n.servers).unwrap();
            if report.collided_rows == 0 {
                assert_eq!(report.cover_rows, 60);
                break;
            }
        }
        let dr = &n.servers[0].dr;
        let w = n.layout.width();
        let bodies = |t: u32| -> Vec<Vec<u8>> {
            let b = dr.directory.block_of(TopicId(t)).unwrap();
            let mut v: Vec<_> = dr
                .rows_in_block(b, w)
                .iter()
                .map(|r| r.body()[..2].to_vec())
                .collect();
            v.sort();
            v
        };
        assert_eq!(bodies(1), vec![b"m1".to_vec(), b"m2".to_vec()]);
        assert_eq!(bodies(2), vec![b"m4".to_vec()]);
        assert_eq!(bodies(3), vec![b"m3".to_vec()]);
        assert_eq!(dr.block_size(), 1024);
    }

    #[test]
    fn all_cover_round() {
        let mut n = net(3, 4, &[1, 2]);
        n.start(0);
        for c in 0..4 {
            let f = n.cover(c, 0);
            n.deliver(&f);
        }
        assert!(n
            .end_publish()
            .iter()
            .all(|v| *v == PublishVerdict::Proceed));
        let r = reveal_and_group(&mut n.servers).unwrap();
        assert_eq!(r.cover_rows, 64);
        assert_eq!(r.grouped_rows, 0);
        assert_eq!(n.servers[0].dr.block_size(), 1024);
        assert!(n.servers[0]
            .dr
            .blocks()
            .iter()
            .all(|b| b.iter().all(|&x| x == 0)));
    }

    #[test]
    fn deliberate_collision_is_counted() {
        let mut n = net(2, 2, &[1]);
        n.start(0);
        let a = WriteRow::new(n.layout, TopicId(1), b"first")
            .unwrap()
            .to_bytes();
        let b = WriteRow::new(n.layout, TopicId(1), b"second")
            .unwrap()
            .to_bytes();
        let mut xored = a.clone();
        crate::model::xor_into(&mut xored, &b);
        assert_eq!(&xored[..4], &[0, 0, 0, 0]);
        let fa = n.frames_for(0, 0, a, 7);
        let fb = n.frames_for(1, 0, b, 7);
        n.deliver(&fa);
        n.deliver(&fb);
        n.end_publish();
        let r = reveal_and_group(&mut n.servers).unwrap();
        // the topic field cancels, so only the checksum catches it
        let expect_collided = if WriteRow::from_bytes(&xored).unwrap().checksum_ok() {
            0
        } else {
            1
        };
        assert_eq!(r.collided_rows, expect_collided);
        assert_eq!(n.servers[0].metrics.collisions, 2 * expect_collided as u64);
    }

    #[test]
    fn same_round_duplicate_is_deduped() {
        let mut n = net(2, 1, &[1]);
        n.start(0);
        let f = n.publish(0, 0, 1, b"hi");
        n.deliver(&f);
        let again = n.servers[0].ingest_write(&f[0]);
        assert_eq!(again, IngestOutcome::Discarded(DiscardReason::Duplicate));
        assert_eq!(n.servers[0].ledger.seen.len(), 1);
        assert_eq!(n.servers[0].metrics.duplicate_alerts, 1);
        assert!(n
            .end_publish()
            .iter()
            .all(|v| *v == PublishVerdict::Proceed));

        let mut n = net(2, 1, &[1]);
        for s in &mut n.servers {
            s.config.duplicate_policy = DuplicatePolicy::Halt;
        }
        n.start(0);
        let f = n.publish(0, 0, 1, b"hi");
        n.deliver(&f);
        assert_eq!(
            n.servers[0].ingest_write(&f[0]),
            IngestOutcome::Halted(HaltReason::DuplicateFrame)
        );
    }

    #[test]
    fn cross_round_replay_halts() {
        let mut n = net(2, 1, &[1]);
        n.start(4);
        let old = n.publish(0, 4, 1, b"old");
        n.deliver(&old);
        n.start(5);
        assert_eq!(
            n.servers[0].ingest_write(&old[0]),
            IngestOutcome::Halted(HaltReason::Freshness)
        );
        assert_eq!(
            n.end_publish()[0],
            PublishVerdict::Halt(HaltReason::Freshness)
        );
        assert!(n.servers[0].share_for_reveal().is_none());
        assert!(n.servers[0].serve_subscriptions().unwrap().is_empty());
        assert!(matches!(
            reveal_and_group(&mut n.servers),
            Err(Error::Availability(_))
        ));
    }

    #[test]
    fn stale_timestamp_in_current_header_halts() {
        let mut n = net(2, 1, &[1]);
        n.start(2);
        let sk = n.clients[0].clone();
        let pk = n.servers[0].public_key();
        let ctx = SealContext {
            recipient: 0,
            recipient_pk: &pk,
            round: 2,
            now: n.servers[0].config.clock.round_start(2) - 1,
            client_id: 0,
            signing_key: &sk,
            mode: SealMode::Encrypted,
        };
        let f = seal(&[1, 2, 3], &ctx, &mut n.rng);
        assert_eq!(
            n.servers[0].ingest_write(&f),
            IngestOutcome::Halted(HaltReason::Freshness)
        );
    }

    #[test]
    fn modification_drop_and_forgery_halt() {
        // modified ciphertext
        let mut n = net(2, 3, &[1]);
        n.start(0);
        for c in 0..3 {
            let mut f = n.cover(c, 0);
            if c == 1 {
                f[0].ciphertext[40] ^= 1;
                assert_eq!(
                    n.servers[0].ingest_write(&f[0]),
                    IngestOutcome::Discarded(DiscardReason::BadSignature)
                );
                n.servers[1].ingest_write(&f[1]);
            } else {
                n.deliver(&f);
            }
        }
        assert_eq!(
            n.end_publish()[0],
            PublishVerdict::Halt(HaltReason::DropDetected)
        );

        // forged substitute signed with a different key
        let mut n = net(2, 2, &[1]);
        n.start(0);
        let f = n.cover(0, 0);
        n.servers[1].ingest_write(&f[1]);
        let forger = SigningKey::generate(&mut n.rng);
        n.clients[0] = forger;
        let forged = n.cover(0, 0);
        assert_eq!(
            n.servers[0].ingest_write(&forged[0]),
            IngestOutcome::Discarded(DiscardReason::BadSignature)
        );
        let f = n.cover(1, 0);
        n.deliver(&f);
        assert_eq!(n.servers[0].ledger.missing(), [0u64].into_iter().collect());
        assert_eq!(
            n.end_publish()[0],
            PublishVerdict::Halt(HaltReason::DropDetected)
        );
    }

    #[test]
    fn unknown_client_is_discarded() {
        let mut n = net(2, 1, &[1]);
        n.start(0);
        n.clients.push(SigningKey::generate(&mut n.rng));
        let f = n.cover(1, 0);
        assert_eq!(
            n.servers[0].ingest_write(&f[0]),
            IngestOutcome::Discarded(DiscardReason::UnknownClient)
        );
    }

    #[test]
    fn two_hot_write_fails_audit() {
        let mut n = net(2, 1, &[1]);
        n.start(0);
        let w = n.layout.width();
        let mut dense = ByteMatrixBuilder::new(64, w);
        dense.set(3, 0xAA);
        dense.set(9, 0x55);
        let (a, b) = dense.split(&mut n.rng);
        let mk = |n: &mut Net, i: usize, m: crate::model::ByteMatrix| {
            let pk = n.servers[i].public_key();
            let sk = n.clients[0].clone();
            let ctx = SealContext {
                recipient: i as u8,
                recipient_pk: &pk,
                round: 0,
                now: 5,
                client_id: 0,
                signing_key: &sk,
                mode: SealMode::Encrypted,
            };
            seal(&WriteShare::Additive(m).to_bytes(), &ctx, &mut n.rng)
        };
        let fa = mk(&mut n, 0, a);
        let fb = mk(&mut n, 1, b);
        n.deliver(&[fa, fb]);
        assert_eq!(
            n.end_publish()[0],
            PublishVerdict::Halt(HaltReason::AuditFailed)
        );
    }

    struct ByteMatrixBuilder(crate::model::ByteMatrix);

    impl ByteMatrixBuilder {
        fn new(rows: usize, w: usize) -> Self {
            Self(crate::model::ByteMatrix::zeros(rows, w))
        }
        fn set(&mut self, row: usize, v: u8) {
            self.0.row_mut(row).fill(v);
        }
        fn split(
            self,
            rng: &mut ChaCha20Rng,
        ) -> (crate::model::ByteMatrix, crate::model::ByteMatrix) {
            let mut a = crate::model::ByteMatrix::zeros(self.0.rows(), self.0.width());
            rng.fill(a.as_bytes_mut());
            let mut b = self.0;
            b.xor_assign(&a).unwrap();
            (a, b)
        }
    }

    #[test]
    fn delayed_row_appears_after_delay() {
        let mut n = net(2, 1, &[1]);
        let layout = n.layout;
        let owner = 1usize;
        let inner_cap = layout.body_capacity() - SEAL_OVERHEAD;
        let mut inner = vec![0u8; inner_cap];
        inner[0] = 2;
        inner[1..5].copy_from_slice(&1u32.to_le_bytes());
        inner[5..10].copy_from_slice(b"later");
        let pk = n.servers[owner].public_key();
        let sealed = seal_to(&pk, &inner, &mut n.rng);
        let row = WriteRow::new(layout, TopicId::SEALED_DELAYED, &sealed).unwrap();
        for round in 0..4u64 {
            n.start(round);
            let f = if round == 0 {
                let idx = n.rng.gen_range(0..64);
                n.frames_for(0, 0, row.to_bytes(), idx)
            } else {
                n.cover(0, round)
            };
            n.deliver(&f);
            n.end_publish();
            let r = reveal_and_group(&mut n.servers).unwrap();
            let found = n.servers[0].dr.total_rows(layout.width());
            if round == 0 {
                assert_eq!(r.sealed_rows, 1);
                // only the owner could read it
                assert!(n.servers[0].delayed.is_empty());
                assert_eq!(n.servers[1].delayed.len(), 1);
            }
            assert_eq!(found, usize::from(round == 2), "round {round}");
            for s in &mut n.servers {
                s.serve_subscriptions().unwrap();
                s.end_round();
            }
        }
    }

    #[test]
    fn unknown_topic_waits_for_directory_update() {
        let mut n = net(2, 1, &[1]);
        n.start(0);
        let f = n.publish(0, 0, 7, b"new topic");
        n.deliver(&f);
        n.end_publish();
        let r = reveal_and_group(&mut n.servers).unwrap();
        assert_eq!(r.held_rows, 1);
        assert_eq!(r.grouped_rows, 0);
        // conservation: valid = grouped + held
        assert_eq!(
            r.valid_rows + r.injected_rows + r.released_rows,
            r.grouped_rows + r.held_rows
        );
        for s in &mut n.servers {
            s.serve_subscriptions().unwrap();
            s.end_round();
            s.update_directory();
            assert!(s.directory.contains(TopicId(7)));
        }
        n.start(1);
        let f = n.cover(0, 1);
        n.deliver(&f);
        n.end_publish();
        let r = reveal_and_group(&mut n.servers).unwrap();
        assert_eq!(r.injected_rows, 1);
        assert_eq!(r.grouped_rows, 1);
        let dr = &n.servers[0].dr;
        let b = dr.directory.block_of(TopicId(7)).unwrap();
        assert_eq!(
            &dr.rows_in_block(b, n.layout.width())[0].body()[..9],
            b"new topic"
        );
    }

    #[test]
    fn serving_matches_pir_oracle() {
        let mut n = net(2, 3, &[1, 2, 3]);
        n.start(0);
        for c in 0..3 {
            let f = n.publish(c, 0, 1 + c as u32, &[c as u8 + 1; 8]);
            n.deliver(&f);
        }
        n.end_publish();
        reveal_and_group(&mut n.servers).unwrap();
        let mut client_secrets = BTreeMap::new();
        for c in 0..3u64 {
            for slot in 0..2u8 {
                let j = n.rng.gen_range(0..3);
                let qs = gen_queries(j, 2, 3, &mut n.rng).unwrap();
                let mut secrets = Vec::new();
                for i in 0..2 {
                    let seed: [u8; 16] = n.rng.gen();
                    secrets.push(SecretSchedule::new(seed, 0));
                    let body = SubscriptionBody {
                        slot,
                        seed,
                        query: qs[i].clone(),
                    };
                    let pk = n.servers[i].public_key();
                    let sk = n.clients[c as usize].clone();
                    let ctx = SealContext {
                        recipient: i as u8,
                        recipient_pk: &pk,
                        round: 0,
                        now: 0,
                        client_id: c,
                        signing_key: &sk,
                        mode: SealMode::Encrypted,
                    };
                    let f = seal(&body.to_bytes(), &ctx, &mut n.rng);
                    n.servers[i].register_subscription(&f, 0, 0).unwrap();
                }
                client_secrets.insert((c, slot), (j, secrets));
            }
        }
        let a0 = n.servers[0].serve_subscriptions().unwrap();
        let a1 = n.servers[1].serve_subscriptions().unwrap();
        assert_eq!(a0.len(), 6);
        assert_eq!(a1.len(), 6);
        for ((_, x), (_, y)) in a0.iter().zip(&a1) {
            let combined = proxy_combine(&[x.payload.clone(), y.payload.clone()]).unwrap();
            let (j, secrets) = &client_secrets[&(x.client_id, x.slot)];
            assert_eq!(
                decode_retrieval(&combined, secrets),
                n.servers[0].dr.block(*j)
            );
        }
        for s in &n.servers {
            assert_eq!(s.metrics.secrets_advanced, 6);
            assert!(s.subs.values().all(|(_, r)| r.secret.round == 1));
        }
    }

    #[test]
    fn phase_discipline() {
        let mut n = net(2, 1, &[1]);
        n.start(0);
        assert!(n.servers[0].serve_subscriptions().is_err());
        let combined = n.servers[0].dw.clone();
        assert!(n.servers[0].begin_reveal(&combined).is_err());
    }
}
