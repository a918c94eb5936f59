//! Client side: one write per server per round (real, cover or delayed),
//! subscription slots with cover padding, and decoding of retrieved blocks.

use std::collections::VecDeque;

use ed25519_dalek::SigningKey;
use rand::{CryptoRng, Rng, RngCore};
use serde::{Deserialize, Serialize};
use x25519_dalek::PublicKey;

use crate::dpf::{share_write, PointFunction};
use crate::envelope::{
    advance_secret, seal, seal_to, ParticipationCommitment, RoundClock, SealContext, SealMode,
    SealedFrame, SecretSchedule, Tick, SEAL_OVERHEAD,
};
use crate::error::{invalid, Result};
use crate::model::{split_block, RowLayout, TopicDirectory, TopicId, WriteRow};
use crate::pir::{decode_retrieval, gen_queries, SubscriptionBody};
use crate::server::DELAY_HEADER;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub n_servers: usize,
    pub domain: usize,
    pub layout: RowLayout,
    pub slots: usize,
    pub max_delay: u8,
    pub clock: RoundClock,
    pub seal_mode: SealMode,
}

impl ClientConfig {
    /// Largest message a delayed publish can carry.
    pub fn delayed_capacity(&self) -> usize {
        self.layout
            .body_capacity()
            .saturating_sub(SEAL_OVERHEAD + DELAY_HEADER)
    }
}

/// A message waiting to be published.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outgoing {
    pub topic: TopicId,
    pub body: Vec<u8>,
    pub delay: Option<u8>,
    pub not_before: u64,
    pub attempts: u32,
}

/// What the client wrote in a round; ground truth for simulations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishRecord {
    pub round: u64,
    pub index: usize,
    /// `None` for a cover write.
    pub message: Option<Outgoing>,
    pub sealed_to: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotState {
    /// `None` for a cover slot.
    pub topic: Option<TopicId>,
    pub block: usize,
    pub secrets: Vec<SecretSchedule>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub published: u64,
    pub cover_writes: u64,
    pub collisions_detected: u64,
    pub expired_slots: u64,
    pub bad_responses: u64,
    pub upstream_bytes: u64,
    pub downstream_bytes: u64,
}

pub struct ClientState {
    pub id: u64,
    pub config: ClientConfig,
    signing_key: SigningKey,
    server_keys: Vec<PublicKey>,
    pub commitment: Option<ParticipationCommitment>,
    pub directory: Option<TopicDirectory>,
    pub interests: Vec<TopicId>,
    pub slots: Vec<SlotState>,
    pub proxy: u8,
    queue: VecDeque<Outgoing>,
    in_flight: Option<PublishRecord>,
    pub last_publish: Option<PublishRecord>,
    pub metrics: ClientMetrics,
}

/// Decoded messages for one real subscription slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub topic: TopicId,
    pub messages: Vec<Vec<u8>>,
}

/// Message body with the zero padding removed.
pub fn trim_body(body: &[u8]) -> Vec<u8> {
    let end = body.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
    body[..end].to_vec()
}

fn schedule_at(s: &SecretSchedule, round: u64) -> SecretSchedule {
    let mut s = s.clone();
    while s.round < round {
        s = advance_secret(&s);
    }
    s
}

impl ClientState {
    pub fn new<R: RngCore + CryptoRng>(
        id: u64,
        config: ClientConfig,
        server_keys: Vec<PublicKey>,
        interests: Vec<TopicId>,
        rng: &mut R,
    ) -> Self {
        Self {
            id,
            signing_key: SigningKey::generate(rng),
            server_keys,
            commitment: None,
            directory: None,
            interests,
            slots: Vec::new(),
            proxy: 0,
            queue: VecDeque::new(),
            in_flight: None,
            last_publish: None,
            metrics: ClientMetrics::default(),
            config,
        }
    }

    pub fn signing_key(&self) -> &SigningKey {
        &self.signing_key
    }

    /// Pledges one write per round for `k` rounds from `start_round`.
    pub fn commit(&mut self, start_round: u64, k: u64) -> (ParticipationCommitment, Vec<u8>) {
        let c = ParticipationCommitment::new(
            self.id,
            start_round,
            k,
            &self.signing_key.verifying_key(),
        );
        let sig = c.sign(&self.signing_key);
        self.commitment = Some(c.clone());
        (c, sig)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Queues a message; oversized bodies are rejected here.
    pub fn enqueue(&mut self, topic: TopicId, body: &[u8], delay: Option<u8>) -> Result<()> {
        if !topic.is_assignable() {
            return Err(invalid(format!("{topic} cannot carry messages")));
        }
        let cap = match delay {
            Some(d) if d > self.config.max_delay => {
                return Err(invalid(format!(
                    "delay {d} above maximum {}",
                    self.config.max_delay
                )))
            }
            Some(_) => self.config.delayed_capacity(),
            None => self.config.layout.body_capacity(),
        };
        if body.len() > cap {
            return Err(invalid(format!(
                "message of {} bytes exceeds {cap}",
                body.len()
            )));
        }
        self.queue.push_back(Outgoing {
            topic,
            body: body.to_vec(),
            delay,
            not_before: 0,
            attempts: 0,
        });
        Ok(())
    }

    fn row_value<R: RngCore + CryptoRng>(
        &self,
        msg: &Outgoing,
        rng: &mut R,
    ) -> Result<(Vec<u8>, Option<u8>)> {
        let layout = self.config.layout;
        match msg.delay {
            None => Ok((
                WriteRow::new(layout, msg.topic, &msg.body)?.to_bytes(),
                None,
            )),
            Some(d) => {
                let owner = rng.gen_range(0..self.config.n_servers);
                let mut inner = vec![0u8; self.config.delayed_capacity() + DELAY_HEADER];
                inner[0] = d;
                inner[1..5].copy_from_slice(&msg.topic.0.to_le_bytes());
                inner[DELAY_HEADER..DELAY_HEADER + msg.body.len()].copy_from_slice(&msg.body);
                let sealed = seal_to(&self.server_keys[owner], &inner, rng);
                let row = WriteRow::new(layout, TopicId::SEALED_DELAYED, &sealed)?;
                Ok((row.to_bytes(), Some(owner as u8)))
            }
        }
    }

    /// The round's write: the head of the queue if it is due, otherwise an
    /// all-zero row, shared at a uniformly random index and sealed to each
    /// server. Empty when not committed for `round`.
    pub fn make_publish<R: RngCore + CryptoRng>(
        &mut self,
        round: u64,
        now: Tick,
        rng: &mut R,
    ) -> Result<Vec<SealedFrame>> {
        if !self.commitment.as_ref().is_some_and(|c| c.covers(round)) {
            return Ok(Vec::new());
        }
        let msg = match self.queue.front() {
            Some(m) if m.not_before <= round => self.queue.pop_front(),
            _ => None,
        };
        let (value, sealed_to) = match &msg {
            Some(m) => self.row_value(m, rng)?,
            None => (vec![0u8; self.config.layout.width()], None),
        };
        let index = rng.gen_range(0..self.config.domain);
        let shares = share_write(
            &PointFunction::new(index, value),
            self.config.n_servers,
            self.config.domain,
            rng,
        )?;
        let frames: Vec<SealedFrame> = shares
            .iter()
            .enumerate()
            .map(|(i, share)| {
                let ctx = SealContext {
                    recipient: i as u8,
                    recipient_pk: &self.server_keys[i],
                    round,
                    now,
                    client_id: self.id,
                    signing_key: &self.signing_key,
                    mode: self.config.seal_mode,
                };
                seal(&share.to_bytes(), &ctx, rng)
            })
            .collect();

        match &msg {
            Some(_) => self.metrics.published += 1,
            None => self.metrics.cover_writes += 1,
        }
        self.metrics.upstream_bytes += frames.iter().map(|f| f.wire_len() as u64).sum::<u64>();
        let record = PublishRecord {
            round,
            index,
            message: msg.map(|mut m| {
                m.attempts += 1;
                m
            }),
            sealed_to,
        };
        self.in_flight = record.message.as_ref().map(|_| record.clone());
        self.last_publish = Some(record);
        Ok(frames)
    }

    /// The round was aborted by a halt: the in-flight message goes back to
    /// the head of the queue.
    pub fn round_aborted(&mut self, round: u64) {
        if let Some(rec) = self.in_flight.take() {
            if let Some(mut m) = rec.message {
                m.not_before = round + 1;
                self.queue.push_front(m);
            }
        }
    }

    /// New subscription shares for every slot after a directory update.
    /// Real slots cover interests that still have a block, the rest go to
    /// uniformly random blocks. Frames for all servers are handed to one
    /// proxy chosen uniformly for the epoch. Returns nothing unless the
    /// directory version increased.
    pub fn refresh_subscriptions<R: RngCore + CryptoRng>(
        &mut self,
        dir: &TopicDirectory,
        first_round: u64,
        now: Tick,
        rng: &mut R,
    ) -> Result<Vec<SealedFrame>> {
        if let Some(old) = &self.directory {
            if old.version >= dir.version && !self.slots.is_empty() {
                return Ok(Vec::new());
            }
        }
        self.directory = Some(dir.clone());
        self.slots.clear();
        if dir.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.config.n_servers;
        self.proxy = rng.gen_range(0..n) as u8;
        let mut frames = Vec::with_capacity(n * self.config.slots);
        for slot in 0..self.config.slots {
            let wanted = self.interests.get(slot).copied();
            let (topic, block) = match wanted.and_then(|t| dir.block_of(t).map(|b| (t, b))) {
                Some((t, b)) => (Some(t), b),
                None => {
                    if wanted.is_some() {
                        self.metrics.expired_slots += 1;
                    }
                    (None, rng.gen_range(0..dir.len()))
                }
            };
            let queries = gen_queries(block, n, dir.len(), rng)?;
            let secrets: Vec<_> = (0..n)
                .map(|_| SecretSchedule::random(first_round, rng))
                .collect();
            for (i, q) in queries.into_iter().enumerate() {
                let body = SubscriptionBody {
                    slot: slot as u8,
                    seed: secrets[i].seed,
                    query: q,
                };
                let ctx = SealContext {
                    recipient: i as u8,
                    recipient_pk: &self.server_keys[i],
                    round: first_round,
                    now,
                    client_id: self.id,
                    signing_key: &self.signing_key,
                    mode: self.config.seal_mode,
                };
                frames.push(seal(&body.to_bytes(), &ctx, rng));
            }
            self.slots.push(SlotState {
                topic,
                block,
                secrets,
            });
        }
        self.metrics.upstream_bytes += frames.iter().map(|f| f.wire_len() as u64).sum::<u64>();
        Ok(frames)
    }

    /// Unmasks one combined response per slot and returns the messages of
    /// the real slots. Responses of the wrong length are dropped. If the
    /// client's own message of this round should be in a block it reads
    /// but is absent, it is re-queued after a random backoff of 1 to 4
    /// rounds.
    pub fn decode_round<R: RngCore>(
        &mut self,
        round: u64,
        block_size: usize,
        responses: &[Option<Vec<u8>>],
        rng: &mut R,
    ) -> Vec<Delivery> {
        let width = self.config.layout.width();
        let mut out = Vec::new();
        for (slot, resp) in self.slots.iter_mut().zip(responses) {
            let secrets: Vec<_> = slot.secrets.iter().map(|s| schedule_at(s, round)).collect();
            slot.secrets = secrets.iter().map(advance_secret).collect();
            let Some(resp) = resp else { continue };
            if resp.len() != block_size {
                self.metrics.bad_responses += 1;
                continue;
            }
            self.metrics.downstream_bytes += resp.len() as u64;
            let block = decode_retrieval(resp, &secrets);
            let Some(topic) = slot.topic else { continue };
            let messages = split_block(&block, width)
                .into_iter()
                .filter(|r| r.topic == topic)
                .map(|r| trim_body(r.body()))
                .collect();
            out.push(Delivery { topic, messages });
        }

        if let Some(rec) = self.in_flight.take() {
            if let Some(mut m) = rec.message {
                let read = out.iter().find(|d| d.topic == m.topic);
                if rec.round == round && m.delay.is_none() {
                    if let Some(d) = read {
                        if !d.messages.contains(&trim_body(&m.body)) {
                            self.metrics.collisions_detected += 1;
                            m.not_before = round + rng.gen_range(1..=4);
                            self.queue.push_back(m);
                        }
                    }
                }
            }
        }
        out
    }
}
