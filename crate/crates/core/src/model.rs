//! Identifiers, the write/read databases, the topic directory and round
//! bookkeeping shared by every other module.
//!
//! Database "addition" is byte-wise XOR throughout, so combining shares,
//! answering PIR queries and masking answers all use the same operation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envelope::ParticipationCommitment;
use crate::error::{check_len, invalid, Error, Result};

/// Width of the topic field at the front of every write row.
pub const TOPIC_BYTES: usize = 4;

/// Topic identifier. Zero is reserved for cover traffic.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TopicId(pub u32);

impl TopicId {
    pub const COVER: TopicId = TopicId(0);
    /// Marks a row whose real content is sealed to one server for delayed
    /// publishing. Never assigned to a real topic.
    pub const SEALED_DELAYED: TopicId = TopicId(u32::MAX);

    pub fn is_cover(self) -> bool {
        self == Self::COVER
    }

    /// Whether the id may name an ordinary topic.
    pub fn is_assignable(self) -> bool {
        self != Self::COVER && self != Self::SEALED_DELAYED
    }
}

impl fmt::Display for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

/// XOR `src` into `dst`. Both slices must have equal length.
pub fn xor_into(dst: &mut [u8], src: &[u8]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= *s;
    }
}

/// Row geometry for a deployment: `width = 4 + payload_len`, where the last
/// payload byte is a checksum over the rest of the row.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLayout {
    pub payload_len: usize,
}

impl RowLayout {
    pub fn new(payload_len: usize) -> Result<Self> {
        if payload_len < 2 {
            return Err(invalid("payload length must be at least 2 bytes"));
        }
        Ok(Self { payload_len })
    }

    pub fn width(&self) -> usize {
        TOPIC_BYTES + self.payload_len
    }

    /// Bytes available to the message body (payload minus checksum).
    pub fn body_capacity(&self) -> usize {
        self.payload_len - 1
    }
}

fn row_checksum(topic: TopicId, body: &[u8]) -> u8 {
    let mut h = Sha256::new();
    h.update(topic.0.to_le_bytes());
    h.update(body);
    h.finalize()[0]
}

/// One fixed-width row of the write database: `topic ‖ body ‖ checksum`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WriteRow {
    pub topic: TopicId,
    /// The `payload_len` bytes after the topic, checksum included.
    pub payload: Vec<u8>,
}

/// How a combined row was classified at reveal time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RowClass {
    Cover,
    Valid(WriteRow),
    /// Checksum failure: two or more writers hit the same slot.
    Collided,
}

impl WriteRow {
    /// Builds a row, zero-padding `body` and appending its checksum.
    pub fn new(layout: RowLayout, topic: TopicId, body: &[u8]) -> Result<Self> {
        if topic.is_cover() {
            return Err(invalid("topic 0 is reserved for cover rows"));
        }
        if body.len() > layout.body_capacity() {
            return Err(invalid(format!(
                "message of {} bytes exceeds capacity {}",
                body.len(),
                layout.body_capacity()
            )));
        }
        let mut payload = vec![0u8; layout.payload_len];
        payload[..body.len()].copy_from_slice(body);
        let last = layout.payload_len - 1;
        payload[last] = row_checksum(topic, &payload[..last]);
        Ok(Self { topic, payload })
    }

    pub fn cover(layout: RowLayout) -> Self {
        Self {
            topic: TopicId::COVER,
            payload: vec![0u8; layout.payload_len],
        }
    }

    pub fn is_cover(&self) -> bool {
        self.topic.is_cover() && self.payload.iter().all(|&b| b == 0)
    }

    /// Message body, zero padding included, checksum excluded.
    pub fn body(&self) -> &[u8] {
        &self.payload[..self.payload.len() - 1]
    }

    pub fn width(&self) -> usize {
        TOPIC_BYTES + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width());
        out.extend_from_slice(&self.topic.0.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < TOPIC_BYTES + 2 {
            return Err(Error::Malformed("row shorter than minimum width".into()));
        }
        let topic = TopicId(u32::from_le_bytes(bytes[..4].try_into().unwrap()));
        Ok(Self {
            topic,
            payload: bytes[TOPIC_BYTES..].to_vec(),
        })
    }

    pub fn checksum_ok(&self) -> bool {
        let last = self.payload.len() - 1;
        row_checksum(self.topic, &self.payload[..last]) == self.payload[last]
    }

    /// Classifies raw combined bytes.
    pub fn classify(bytes: &[u8]) -> RowClass {
        if bytes.iter().all(|&b| b == 0) {
            return RowClass::Cover;
        }
        match Self::from_bytes(bytes) {
            Ok(row) if row.checksum_ok() && !row.topic.is_cover() => RowClass::Valid(row),
            _ => RowClass::Collided,
        }
    }
}

/// Dense `rows × width` byte matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteMatrix {
    rows: usize,
    width: usize,
    data: Vec<u8>,
}

impl ByteMatrix {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            rows,
            width,
            data: vec![0u8; rows * width],
        }
    }

    pub fn from_vec(rows: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_len(rows * width, data.len())?;
        Ok(Self { rows, width, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u8] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn as_bytes_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.width.max(1)).take(self.rows)
    }

    pub fn xor_assign(&mut self, other: &ByteMatrix) -> Result<()> {
        if self.rows != other.rows || self.width != other.width {
            return Err(Error::LengthMismatch {
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        xor_into(&mut self.data, &other.data);
        Ok(())
    }

    /// Indices of rows containing any nonzero byte.
    pub fn nonzero_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .filter(|&i| self.row(i).iter().any(|&b| b != 0))
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }
}

/// One server's additive share `D_w^i` of the write database.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteDatabase {
    pub round: u64,
    matrix: ByteMatrix,
}

impl WriteDatabase {
    pub fn new(round: u64, rows: usize, layout: RowLayout) -> Self {
        Self {
            round,
            matrix: ByteMatrix::zeros(rows, layout.width()),
        }
    }

    pub fn from_matrix(round: u64, matrix: ByteMatrix) -> Self {
        Self { round, matrix }
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn width(&self) -> usize {
        self.matrix.width()
    }

    pub fn matrix(&self) -> &ByteMatrix {
        &self.matrix
    }

    /// `D ← D ⊕ expansion`.
    pub fn absorb(&mut self, expansion: &ByteMatrix) -> Result<()> {
        self.matrix.xor_assign(expansion)
    }

    pub fn combine(&mut self, other: &WriteDatabase) -> Result<()> {
        self.matrix.xor_assign(&other.matrix)
    }

    pub fn reset(&mut self, round: u64) {
        self.round = round;
        self.matrix.as_bytes_mut().fill(0);
    }

    /// Inter-server share frame: `[u64 round | u8 server | u64 rows | rows]`.
    pub fn to_frame(&self, server: u8) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + self.matrix.as_bytes().len());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.push(server);
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        out.extend_from_slice(self.matrix.as_bytes());
        out
    }

    pub fn from_frame(frame: &[u8], width: usize) -> Result<(u8, Self)> {
        if frame.len() < 17 {
            return Err(Error::Malformed("share frame too short".into()));
        }
        let round = u64::from_le_bytes(frame[..8].try_into().unwrap());
        let server = frame[8];
        let rows = u64::from_le_bytes(frame[9..17].try_into().unwrap()) as usize;
        let body = frame[17..].to_vec();
        let matrix = ByteMatrix::from_vec(rows, width, body)?;
        Ok((server, Self { round, matrix }))
    }
}

/// Smallest multiple of `alignment` that holds the busiest topic's rows.
pub fn compute_block_size(
    per_topic_counts: &BTreeMap<TopicId, usize>,
    row_width: usize,
    alignment: usize,
) -> usize {
    let alignment = alignment.max(1);
    let needed = per_topic_counts.values().copied().max().unwrap_or(0) * row_width;
    if needed == 0 {
        return alignment;
    }
    needed.div_ceil(alignment) * alignment
}

/// Active topics, their block positions and lifecycle counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicDirectory {
    pub entries: BTreeMap<TopicId, u32>,
    pub inactivity: BTreeMap<TopicId, u32>,
    pub pending: BTreeSet<TopicId>,
    pub version: u64,
}

impl TopicDirectory {
    /// Directory with `topics` active in the given order.
    pub fn with_topics(topics: impl IntoIterator<Item = TopicId>) -> Self {
        let mut dir = Self::default();
        for t in topics {
            if t.is_assignable() && !dir.entries.contains_key(&t) {
                let idx = dir.entries.len() as u32;
                dir.entries.insert(t, idx);
                dir.inactivity.insert(t, 0);
            }
        }
        dir
    }

    /// Number of blocks `ℓ_r`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn block_of(&self, topic: TopicId) -> Option<usize> {
        self.entries.get(&topic).map(|&i| i as usize)
    }

    /// Topics ordered by block index.
    pub fn topics_by_block(&self) -> Vec<TopicId> {
        let mut v: Vec<(u32, TopicId)> = self.entries.iter().map(|(&t, &i)| (i, t)).collect();
        v.sort();
        v.into_iter().map(|(_, t)| t).collect()
    }

    pub fn contains(&self, topic: TopicId) -> bool {
        self.entries.contains_key(&topic)
    }

    /// Registers an id seen at reveal time that has no block yet.
    pub fn note_unknown(&mut self, topic: TopicId) {
        if topic.is_assignable() && !self.entries.contains_key(&topic) {
            self.pending.insert(topic);
        }
    }

    /// Per-round inactivity bookkeeping: counters of topics that got messages
    /// reset to zero, every other active topic ages by one round.
    pub fn record_round(&mut self, counts: &BTreeMap<TopicId, usize>) {
        for t in self.entries.keys() {
            let c = counts.get(t).copied().unwrap_or(0);
            let entry = self.inactivity.entry(*t).or_insert(0);
            if c > 0 {
                *entry = 0;
            } else {
                *entry += 1;
            }
        }
    }

    /// Checks that block indices are a bijection onto `[0, ℓ_r)`.
    pub fn is_bijective(&self) -> bool {
        let mut seen = vec![false; self.entries.len()];
        for &i in self.entries.values() {
            match seen.get_mut(i as usize) {
                Some(s) if !*s => *s = true,
                _ => return false,
            }
        }
        self.pending
            .is_disjoint(&self.entries.keys().copied().collect())
    }

    /// Topic-directory update frame:
    /// `[u64 version | u32 count | per topic: u32 id, u32 block]`.
    pub fn to_frame(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.entries.len());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (t, i) in &self.entries {
            out.extend_from_slice(&t.0.to_le_bytes());
            out.extend_from_slice(&i.to_le_bytes());
        }
        out
    }

    /// Parses an update frame. Lifecycle counters are server-private and
    /// come back empty.
    pub fn from_frame(frame: &[u8]) -> Result<Self> {
        if frame.len() < 12 {
            return Err(Error::Malformed("directory frame too short".into()));
        }
        let version = u64::from_le_bytes(frame[..8].try_into().unwrap());
        let count = u32::from_le_bytes(frame[8..12].try_into().unwrap()) as usize;
        check_len(12 + 8 * count, frame.len())?;
        let mut entries = BTreeMap::new();
        for chunk in frame[12..].chunks_exact(8) {
            let t = u32::from_le_bytes(chunk[..4].try_into().unwrap());
            let i = u32::from_le_bytes(chunk[4..].try_into().unwrap());
            entries.insert(TopicId(t), i);
        }
        let dir = Self {
            entries,
            version,
            ..Self::default()
        };
        if !dir.is_bijective() {
            return Err(Error::Malformed("block indices are not a bijection".into()));
        }
        Ok(dir)
    }
}

/// Directory update: expire idle topics, promote pending ones, re-pack
/// block indices. The version moves only when membership changes.
///
/// Messages in `counts` reset the matching inactivity counters; aging
/// happens in [`TopicDirectory::record_round`], so applying this twice with
/// the same counts is a no-op the second time.
pub fn rebuild_directory(
    dir: &TopicDirectory,
    counts: &BTreeMap<TopicId, usize>,
    expiry_rounds: u32,
) -> TopicDirectory {
    let expiry = expiry_rounds.max(1);
    let mut inactivity = dir.inactivity.clone();
    for (t, &c) in counts {
        if c > 0 {
            if let Some(v) = inactivity.get_mut(t) {
                *v = 0;
            }
        }
    }

    let survivors: Vec<TopicId> = dir
        .topics_by_block()
        .into_iter()
        .filter(|t| inactivity.get(t).copied().unwrap_or(0) < expiry)
        .collect();
    let removed = survivors.len() != dir.entries.len();
    let promoted: Vec<TopicId> = dir
        .pending
        .iter()
        .copied()
        .filter(|t| !dir.entries.contains_key(t))
        .collect();

    let mut entries = BTreeMap::new();
    let mut new_inactivity = BTreeMap::new();
    for (i, t) in survivors.iter().chain(promoted.iter()).enumerate() {
        entries.insert(*t, i as u32);
        new_inactivity.insert(*t, inactivity.get(t).copied().unwrap_or(0));
    }
    let changed = removed || !promoted.is_empty();
    TopicDirectory {
        entries,
        inactivity: new_inactivity,
        pending: BTreeSet::new(),
        version: if changed {
            dir.version + 1
        } else {
            dir.version
        },
    }
}

/// Equal-sized topic blocks served by PIR for one round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReadDatabase {
    pub round: u64,
    pub directory: TopicDirectory,
    block_size: usize,
    blocks: Vec<Vec<u8>>,
}

impl ReadDatabase {
    pub fn empty(round: u64, directory: TopicDirectory, block_size: usize) -> Self {
        let blocks = vec![vec![0u8; block_size]; directory.len()];
        Self {
            round,
            directory,
            block_size,
            blocks,
        }
    }

    /// Appends each topic's rows to its block. Every row's topic must have a
    /// block; the caller sizes `block_size` via [`compute_block_size`].
    pub fn build(
        round: u64,
        directory: TopicDirectory,
        rows: &[WriteRow],
        block_size: usize,
    ) -> Result<Self> {
        let mut db = Self::empty(round, directory, block_size);
        let mut fill = vec![0usize; db.blocks.len()];
        for row in rows {
            let b = db
                .directory
                .block_of(row.topic)
                .ok_or_else(|| invalid(format!("{} has no block", row.topic)))?;
            let bytes = row.to_bytes();
            let at = fill[b];
            if at + bytes.len() > block_size {
                return Err(invalid(format!("block for {} overflows", row.topic)));
            }
            db.blocks[b][at..at + bytes.len()].copy_from_slice(&bytes);
            fill[b] += bytes.len();
        }
        Ok(db)
    }

    pub fn from_blocks(
        round: u64,
        directory: TopicDirectory,
        blocks: Vec<Vec<u8>>,
    ) -> Result<Self> {
        check_len(directory.len(), blocks.len())?;
        let block_size = blocks.first().map(Vec::len).unwrap_or(0);
        for b in &blocks {
            check_len(block_size, b.len())?;
        }
        Ok(Self {
            round,
            directory,
            block_size,
            blocks,
        })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn block(&self, i: usize) -> &[u8] {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[Vec<u8>] {
        &self.blocks
    }

    /// Valid rows stored in block `i`, padding dropped.
    pub fn rows_in_block(&self, i: usize, width: usize) -> Vec<WriteRow> {
        split_block(&self.blocks[i], width)
    }

    pub fn total_rows(&self, width: usize) -> usize {
        (0..self.len())
            .map(|i| self.rows_in_block(i, width).len())
            .sum()
    }
}

/// Splits a block into `width`-byte rows, dropping zero padding and rows
/// whose checksum fails.
pub fn split_block(block: &[u8], width: usize) -> Vec<WriteRow> {
    block
        .chunks_exact(width)
        .filter_map(|chunk| match WriteRow::classify(chunk) {
            RowClass::Valid(row) => Some(row),
            _ => None,
        })
        .collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Publish,
    Manage,
    Retrieve,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Publish => "publish",
            Phase::Manage => "manage",
            Phase::Retrieve => "retrieve",
        }
    }
}

/// Per-round participation bookkeeping at one server.
#[derive(Clone, Debug, Default)]
pub struct RoundLedger {
    pub round: u64,
    phase: Option<Phase>,
    pub commitments: BTreeMap<u64, ParticipationCommitment>,
    pub seen: BTreeSet<u64>,
}

impl RoundLedger {
    pub fn new(round: u64) -> Self {
        Self {
            round,
            phase: Some(Phase::Publish),
            ..Self::default()
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase.unwrap_or(Phase::Publish)
    }

    pub fn commit(&mut self, c: ParticipationCommitment) {
        self.commitments.insert(c.client_id, c);
    }

    /// Clients whose commitment covers the current round.
    pub fn expected(&self) -> BTreeSet<u64> {
        self.commitments
            .values()
            .filter(|c| c.covers(self.round))
            .map(|c| c.client_id)
            .collect()
    }

    pub fn is_expected(&self, client: u64) -> bool {
        self.commitments
            .get(&client)
            .is_some_and(|c| c.covers(self.round))
    }

    pub fn mark_seen(&mut self, client: u64) -> Result<()> {
        if !self.is_expected(client) {
            return Err(invalid(format!("client {client} is not committed")));
        }
        self.seen.insert(client);
        Ok(())
    }

    /// Committed clients that have not been seen this round.
    pub fn missing(&self) -> BTreeSet<u64> {
        self.expected().difference(&self.seen).copied().collect()
    }

    /// Publish → Manage → Retrieve → Publish(round + 1).
    pub fn advance(&mut self) {
        self.phase = Some(match self.phase() {
            Phase::Publish => Phase::Manage,
            Phase::Manage => Phase::Retrieve,
            Phase::Retrieve => {
                self.round += 1;
                self.seen.clear();
                Phase::Publish
            }
        });
    }

    pub fn require(&self, phase: Phase, action: &'static str) -> Result<()> {
        if self.phase() == phase {
            Ok(())
        } else {
            Err(Error::PhaseViolation {
                action,
                phase: self.phase().name(),
            })
        }
    }
}
