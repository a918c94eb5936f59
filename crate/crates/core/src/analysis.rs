//! Quantitative experiments: collision model, cover ratio, counting-bound
//! padding, intersection attacks, unobservability games and cost scaling.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dpf::{eval_full, gen_dpf, PointFunction, WriteShare};
use crate::envelope::SealedFrame;
use crate::error::{invalid, Error, Result};
use crate::model::{ByteMatrix, ReadDatabase, TopicDirectory, TopicId, WriteRow};
use crate::netlab::{
    adversary_view, run_schedule, AdversaryScript, AdversaryView, Communication, Endpoint,
    FrameKind, Run, ScenarioConfig, Schedule, Stopwatch, TraceEvent,
};
use crate::pir::{answer, PirQuery, SubscriptionBody};
use crate::stats::{mean, std_err};

// ------------------------------------------------------------ collisions

/// Probability that a given message survives when `n` writers each pick a
/// uniformly random row out of `rows`.
pub fn collision_success_rate(rows: usize, n: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    (1.0 - 1.0 / rows as f64).powf((n - 1) as f64)
}

/// Direct simulation of random slot choice. Returns the mean fraction of
/// writers alone in their row and its standard error over `trials`.
pub fn simulate_collisions<R: RngCore>(
    rows: usize,
    n: usize,
    trials: usize,
    rng: &mut R,
) -> (f64, f64) {
    let mut counts = vec![0u32; rows];
    let mut picks = vec![0usize; n];
    let mut rates = Vec::with_capacity(trials);
    for _ in 0..trials {
        counts.iter_mut().for_each(|c| *c = 0);
        for p in picks.iter_mut() {
            *p = rng.gen_range(0..rows);
            counts[*p] += 1;
        }
        let alone = picks.iter().filter(|&&p| counts[p] == 1).count();
        rates.push(alone as f64 / n as f64);
    }
    (mean(&rates), std_err(&rates))
}

/// Smallest table size in `[lo, hi]` (searched in steps of `step`) that
/// minimizes the worst deviation from the `(writers, success rate)` targets.
pub fn derive_table_size(targets: &[(usize, f64)], lo: usize, hi: usize, step: usize) -> usize {
    let worst = |rows: usize| {
        targets
            .iter()
            .map(|&(n, want)| (collision_success_rate(rows, n) - want).abs())
            .fold(0.0f64, f64::max)
    };
    (lo..=hi)
        .step_by(step.max(1))
        .map(|rows| (rows, worst(rows)))
        .fold(
            (lo, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
        .0
}

// ----------------------------------------------------------- cover ratio

/// Topic popularity model: topic `i` (1-based, by popularity) gets
/// `⌊max / i^α_msg⌋` messages and is subscribed to with probability
/// proportional to `1 / i^α_sub`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfWorkload {
    pub topic_count: usize,
    pub message_zipf_alpha: f64,
    pub subscription_zipf_alpha: f64,
    pub max_topic_messages: u64,
}

impl ZipfWorkload {
    pub fn new(topic_count: usize) -> Self {
        Self {
            topic_count,
            message_zipf_alpha: 0.8,
            subscription_zipf_alpha: 1.37,
            max_topic_messages: 1000,
        }
    }

    /// Messages of the `i`th most popular topic, `i ≥ 1`.
    pub fn messages(&self, i: usize) -> u64 {
        (self.max_topic_messages as f64 / (i as f64).powf(self.message_zipf_alpha)).floor() as u64
    }

    pub fn message_counts(&self) -> Vec<u64> {
        (1..=self.topic_count).map(|i| self.messages(i)).collect()
    }

    pub fn subscription_weights(&self) -> Vec<f64> {
        (1..=self.topic_count)
            .map(|i| 1.0 / (i as f64).powf(self.subscription_zipf_alpha))
            .collect()
    }

    fn cover_fraction(&self, i: usize) -> f64 {
        let top = self.messages(1);
        if top == 0 {
            return 0.0;
        }
        1.0 - self.messages(i) as f64 / top as f64
    }

    /// Exact expectation of the cover fraction.
    pub fn expected_cover_ratio(&self) -> f64 {
        let w = self.subscription_weights();
        let total: f64 = w.iter().sum();
        w.iter()
            .enumerate()
            .map(|(k, wk)| wk / total * self.cover_fraction(k + 1))
            .sum()
    }
}

/// Monte Carlo mean of the cover fraction a subscriber receives, with its
/// standard error.
pub fn cover_ratio<R: RngCore>(
    workload: &ZipfWorkload,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if workload.topic_count == 0 || samples == 0 {
        return Err(invalid("cover ratio needs topics and samples"));
    }
    let dist =
        WeightedIndex::new(workload.subscription_weights()).map_err(|e| invalid(e.to_string()))?;
    let fractions: Vec<f64> = (1..=workload.topic_count)
        .map(|i| workload.cover_fraction(i))
        .collect();
    let xs: Vec<f64> = (0..samples).map(|_| fractions[dist.sample(rng)]).collect();
    Ok((mean(&xs), std_err(&xs)))
}

/// Topic counts for the sensitivity sweep.
pub const COVER_SWEEP: [usize; 4] = [50, 100, 500, 1000];

/// Padding each topic needs to reach the most popular topic's size.
pub fn counting_bound_padding(counts: &[u64]) -> Vec<u64> {
    let max = counts.iter().copied().max().unwrap_or(0);
    counts.iter().map(|&c| max - c).collect()
}

// -------------------------------------------------- intersection attacks

/// How the target client participates.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    /// Online only in rounds where it publishes.
    SendOnly,
    /// Online every round, cover writes when idle.
    ConstantWithCover,
    /// Online only when publishing; each message appears `d ∈ [0, max]`
    /// rounds later.
    Delayed { max_delay: u8 },
}

/// What a global observer learns about one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundObservation {
    pub round: u64,
    pub target_online: bool,
    /// Topics with at least one revealed message.
    pub active: BTreeSet<u32>,
}

/// Candidate topic set after each observed round.
///
/// The attacker only intersects over rounds in which the target's traffic
/// implies a publication. Under constant participation no round qualifies.
/// With delays the target's message may surface in any of the following
/// `max_delay` rounds, so the attacker intersects with their union.
pub fn intersection_attack(
    observations: &[RoundObservation],
    topics: &BTreeSet<u32>,
    pattern: Participation,
) -> Vec<BTreeSet<u32>> {
    let mut candidates = topics.clone();
    let by_round: BTreeMap<u64, &RoundObservation> =
        observations.iter().map(|o| (o.round, o)).collect();
    let mut out = Vec::with_capacity(observations.len());
    for obs in observations {
        let window = match pattern {
            Participation::ConstantWithCover => None,
            Participation::SendOnly => Some(0),
            Participation::Delayed { max_delay } => Some(max_delay as u64),
        };
        if let (true, Some(w)) = (obs.target_online, window) {
            let mut union = BTreeSet::new();
            let mut complete = true;
            for r in obs.round..=obs.round + w {
                match by_round.get(&r) {
                    Some(o) => union.extend(o.active.iter().copied()),
                    None => complete = false,
                }
            }
            if complete {
                candidates.retain(|t| union.contains(t));
            }
        }
        out.push(candidates.clone());
    }
    out
}

/// Observations of `target` in a netlab run: online when it put bytes on
/// the wire, active topics from the revealed messages.
pub fn observations_from_run(run: &Run, target: u64) -> Vec<RoundObservation> {
    let mut active: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    for m in run.published.iter().filter(|m| !m.collided) {
        let at = m.round + m.delay.unwrap_or(0) as u64;
        active.entry(at).or_default().insert(m.topic.0);
    }
    (0..run.rounds)
        .filter(|r| !run.aborted_rounds.contains(r))
        .map(|round| RoundObservation {
            round,
            target_online: run.trace.client_upstream(target, round) > 0,
            active: active.remove(&round).unwrap_or_default(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionConfig {
    pub topics: u32,
    /// Chance that some other client publishes to a topic in a round.
    pub background: f64,
    /// Chance that the target publishes in a round.
    pub send_prob: f64,
    pub max_rounds: u64,
}

impl Default for IntersectionConfig {
    fn default() -> Self {
        Self {
            topics: 50,
            background: 0.3,
            send_prob: 0.5,
            max_rounds: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntersectionOutcome {
    pub sizes: Vec<usize>,
    /// First round after which only the target topic remains.
    pub rounds_to_singleton: Option<u64>,
    /// The target topic was never eliminated.
    pub sound: bool,
}

impl IntersectionOutcome {
    /// Rounds to singleton, censored at `cap`.
    pub fn censored(&self, cap: u64) -> f64 {
        self.rounds_to_singleton.unwrap_or(cap) as f64
    }
}

/// Simulates one target publishing to topic 0 among background traffic.
/// Background, presence and delay draws use separate streams of `seed`, so
/// runs that differ only in `pattern` see the same background.
pub fn simulate_intersection(
    cfg: &IntersectionConfig,
    pattern: Participation,
    seed: u64,
) -> IntersectionOutcome {
    let max_delay = match pattern {
        Participation::Delayed { max_delay } => max_delay as u64,
        _ => 0,
    };
    let mut bg = ChaCha20Rng::seed_from_u64(seed);
    bg.set_stream(1);
    let mut presence = ChaCha20Rng::seed_from_u64(seed);
    presence.set_stream(2);
    let mut delays = ChaCha20Rng::seed_from_u64(seed);
    delays.set_stream(3);

    let horizon = cfg.max_rounds + max_delay;
    let mut active: Vec<BTreeSet<u32>> = (0..horizon)
        .map(|_| {
            (0..cfg.topics)
                .filter(|_| bg.gen_bool(cfg.background))
                .collect()
        })
        .collect();
    let mut online = vec![false; horizon as usize];
    for r in 0..cfg.max_rounds as usize {
        let sends = presence.gen_bool(cfg.send_prob);
        online[r] = sends || pattern == Participation::ConstantWithCover;
        if sends {
            let d = if max_delay > 0 {
                delays.gen_range(0..=max_delay)
            } else {
                0
            };
            active[r + d as usize].insert(0);
        }
    }
    let obs: Vec<RoundObservation> = (0..horizon)
        .map(|r| RoundObservation {
            round: r,
            target_online: online[r as usize],
            active: std::mem::take(&mut active[r as usize]),
        })
        .collect();
    let universe: BTreeSet<u32> = (0..cfg.topics).collect();
    let sets = intersection_attack(&obs, &universe, pattern);
    let sets = &sets[..cfg.max_rounds as usize];
    IntersectionOutcome {
        sizes: sets.iter().map(BTreeSet::len).collect(),
        rounds_to_singleton: sets.iter().position(|s| s.len() == 1).map(|p| p as u64 + 1),
        sound: sets.iter().all(|s| s.contains(&0)),
    }
}

// --------------------------------------------------- distinguisher games

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Restriction {
    PublisherOnlyDiffers,
    SubscriptionsOnlyDiffer,
}

/// Two scenarios chosen by the adversary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameChallenge {
    pub s0: Schedule,
    pub s1: Schedule,
    pub restriction: Restriction,
}

/// The clients the battery compares: `a` plays the role that differs in
/// `s0`, `b` in `s1`; `block` is the block index of interest.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Focus {
    pub a: u64,
    pub b: u64,
    pub block: usize,
}

impl GameChallenge {
    /// Checks the restriction.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(invalid(format!("invalid challenge: {m}")));
        match self.restriction {
            Restriction::PublisherOnlyDiffers => {
                if self.s0.subscriptions != self.s1.subscriptions {
                    return bad("subscriptions differ");
                }
                if self.s0.communications.len() != self.s1.communications.len() {
                    return bad("different numbers of communications");
                }
                for (x, y) in self.s0.communications.iter().zip(&self.s1.communications) {
                    if (x.round, x.topic, &x.message, x.delay)
                        != (y.round, y.topic, &y.message, y.delay)
                    {
                        return bad("communications differ beyond the publisher");
                    }
                }
            }
            Restriction::SubscriptionsOnlyDiffer => {
                if self.s0.communications != self.s1.communications {
                    return bad("communications differ");
                }
                let shape = |s: &Schedule| -> BTreeMap<u64, usize> {
                    s.subscriptions.iter().map(|(c, t)| (*c, t.len())).collect()
                };
                if shape(&self.s0) != shape(&self.s1) {
                    return bad("subscription counts differ");
                }
            }
        }
        Ok(())
    }

    pub fn focus(&self, dir: &TopicDirectory) -> Focus {
        match self.restriction {
            Restriction::PublisherOnlyDiffers => self
                .s0
                .communications
                .iter()
                .zip(&self.s1.communications)
                .find(|(x, y)| x.publisher != y.publisher)
                .map(|(x, y)| Focus {
                    a: x.publisher,
                    b: y.publisher,
                    block: dir.block_of(x.topic).unwrap_or(0),
                })
                .unwrap_or(Focus {
                    a: 0,
                    b: 1,
                    block: 0,
                }),
            Restriction::SubscriptionsOnlyDiffer => self
                .s0
                .subscriptions
                .iter()
                .find_map(|(c, t0)| {
                    let t1 = self.s1.subscriptions.get(c)?;
                    let k = t0.iter().zip(t1).position(|(x, y)| x != y)?;
                    Some(Focus {
                        a: *c,
                        b: *c,
                        block: dir.block_of(t1[k]).unwrap_or(0),
                    })
                })
                .unwrap_or(Focus {
                    a: 0,
                    b: 0,
                    block: 0,
                }),
        }
    }
}

/// Publisher game: `a` or `b` publishes `message` to `topic` in round 0.
pub fn publisher_swap(
    a: u64,
    b: u64,
    topic: TopicId,
    message: &[u8],
    subscriptions: BTreeMap<u64, Vec<TopicId>>,
) -> GameChallenge {
    let comm = |p| Communication {
        round: 0,
        publisher: p,
        topic,
        message: message.to_vec(),
        delay: None,
    };
    GameChallenge {
        s0: Schedule {
            communications: vec![comm(a)],
            subscriptions: subscriptions.clone(),
        },
        s1: Schedule {
            communications: vec![comm(b)],
            subscriptions,
        },
        restriction: Restriction::PublisherOnlyDiffers,
    }
}

/// Subscriber game: `client` subscribes to `t0` or `t1`; `publisher` posts
/// one message to `t0`.
pub fn subscriber_swap(client: u64, t0: TopicId, t1: TopicId, publisher: u64) -> GameChallenge {
    let comms = vec![Communication {
        round: 0,
        publisher,
        topic: t0,
        message: b"hello".to_vec(),
        delay: None,
    }];
    GameChallenge {
        s0: Schedule {
            communications: comms.clone(),
            subscriptions: BTreeMap::from([(client, vec![t0])]),
        },
        s1: Schedule {
            communications: comms,
            subscriptions: BTreeMap::from([(client, vec![t1])]),
        },
        restriction: Restriction::SubscriptionsOnlyDiffer,
    }
}

/// Steps of the hybrid ladder for the publisher game.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hybrid {
    /// The original challenge.
    H0,
    /// Every message replaced by zeros to one random topic.
    H1,
    /// Only cover traffic.
    H2,
    /// Both scenarios are `s0`.
    H3,
}

pub const HYBRIDS: [Hybrid; 4] = [Hybrid::H0, Hybrid::H1, Hybrid::H2, Hybrid::H3];

pub fn hybrid<R: RngCore>(
    challenge: &GameChallenge,
    step: Hybrid,
    topics: u32,
    rng: &mut R,
) -> GameChallenge {
    let mut c = challenge.clone();
    match step {
        Hybrid::H0 => {}
        Hybrid::H1 => {
            let topic = TopicId(rng.gen_range(1..=topics));
            for s in [&mut c.s0, &mut c.s1] {
                for m in &mut s.communications {
                    m.topic = topic;
                    m.message.iter_mut().for_each(|b| *b = 0);
                }
            }
        }
        Hybrid::H2 => {
            c.s0.communications.clear();
            c.s1.communications.clear();
        }
        Hybrid::H3 => {
            c.s0.communications.clear();
            c.s1 = c.s0.clone();
        }
    }
    c
}

/// One member of the battery: a guess of `b` from the adversary's view.
pub struct Distinguisher {
    pub name: &'static str,
    pub guess: fn(&AdversaryView, &GameContext) -> bool,
}

/// Public parameters the battery needs besides the view.
#[derive(Clone, Debug)]
pub struct GameContext {
    pub restriction: Restriction,
    pub focus: Focus,
    pub n_servers: usize,
    pub domain: usize,
    pub width: usize,
    pub blocks: usize,
}

fn frames(
    view: &AdversaryView,
) -> impl Iterator<Item = (Endpoint, Endpoint, FrameKind, usize, u64, Option<&str>)> {
    view.events.iter().filter_map(|e| match e {
        TraceEvent::Frame {
            from,
            to,
            kind,
            bytes,
            tick,
            wire,
            ..
        } => Some((*from, *to, *kind, *bytes, *tick, wire.as_deref())),
        _ => None,
    })
}

fn bytes_from(view: &AdversaryView, c: u64) -> usize {
    frames(view)
        .filter(|f| f.0 == Endpoint::Client(c))
        .map(|f| f.3)
        .sum()
}

fn bytes_to(view: &AdversaryView, c: u64) -> usize {
    frames(view)
        .filter(|f| f.1 == Endpoint::Client(c))
        .map(|f| f.3)
        .sum()
}

fn first_tick(view: &AdversaryView, c: u64) -> u64 {
    frames(view)
        .filter(|f| f.0 == Endpoint::Client(c) && f.2 == FrameKind::Write)
        .map(|f| f.4)
        .min()
        .unwrap_or(0)
}

/// Frame bodies as seen on the wire, keyed by recipient, assuming the
/// timestamp prefix is readable. Only meaningful without encryption.
fn wire_bodies(view: &AdversaryView, c: u64, kind: FrameKind) -> BTreeMap<u8, Vec<u8>> {
    let mut out = BTreeMap::new();
    for f in frames(view).filter(|f| f.0 == Endpoint::Client(c) && f.2 == kind) {
        let Some(frame) =
            f.5.and_then(|w| hex::decode(w).ok())
                .and_then(|w| SealedFrame::from_bytes(&w).ok())
        else {
            continue;
        };
        if frame.ciphertext.len() > 8 {
            out.insert(frame.recipient, frame.ciphertext[8..].to_vec());
        }
    }
    out
}

fn opened(view: &AdversaryView, c: u64, kind: FrameKind) -> Vec<Vec<u8>> {
    view.events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Opened {
                client,
                kind: k,
                body,
                ..
            } if *client == c && *k == kind => hex::decode(body).ok(),
            _ => None,
        })
        .collect()
}

/// Recombines a client's write shares from the wire; true iff they XOR to
/// a single non-cover row.
fn reconstructs_message(view: &AdversaryView, ctx: &GameContext, c: u64) -> bool {
    let bodies = wire_bodies(view, c, FrameKind::Write);
    if bodies.len() != ctx.n_servers {
        return false;
    }
    let mut acc = ByteMatrix::zeros(ctx.domain, ctx.width);
    for body in bodies.values() {
        let Ok(m) = WriteShare::from_bytes(body).and_then(|s| s.expand(ctx.domain, ctx.width))
        else {
            return false;
        };
        if acc.xor_assign(&m).is_err() {
            return false;
        }
    }
    let rows = acc.nonzero_rows();
    rows.len() == 1
        && WriteRow::from_bytes(acc.row(rows[0]))
            .map(|r| !r.is_cover() && r.checksum_ok())
            .unwrap_or(false)
}

/// Recombines a client's slot-0 queries from the wire; the unit index, if any.
fn reconstructs_query(view: &AdversaryView, ctx: &GameContext, c: u64) -> Option<usize> {
    let bodies = wire_bodies(view, c, FrameKind::Subscribe);
    if bodies.len() != ctx.n_servers {
        return None;
    }
    let mut acc = PirQuery::zeros(ctx.blocks);
    for body in bodies.values() {
        let sub = SubscriptionBody::from_bytes(body).ok()?;
        if sub.slot != 0 {
            return None;
        }
        acc.xor_assign(&sub.query).ok()?;
    }
    let ones: Vec<usize> = acc.bits.iter_ones().collect();
    (ones.len() == 1).then(|| ones[0])
}

fn popcount(bytes: &[u8]) -> u32 {
    bytes.iter().map(|b| b.count_ones()).sum()
}

/// The fixed battery.
pub fn battery() -> Vec<Distinguisher> {
    vec![
        Distinguisher {
            name: "frame-length",
            guess: |v, c| bytes_from(v, c.focus.b) > bytes_from(v, c.focus.a),
        },
        Distinguisher {
            name: "link-bytes",
            guess: |v, c| {
                let answers: usize = frames(v)
                    .filter(|f| f.2 == FrameKind::Answer)
                    .map(|f| f.3)
                    .sum();
                bytes_to(v, c.focus.b) > bytes_to(v, c.focus.a) || answers % 2 == 1
            },
        },
        Distinguisher {
            name: "timing",
            guess: |v, c| first_tick(v, c.focus.b) < first_tick(v, c.focus.a),
        },
        Distinguisher {
            name: "reveal-content",
            guess: |v, _| {
                v.events.iter().any(|e| match e {
                    TraceEvent::Reveal { digest, report, .. } => {
                        u8::from_str_radix(&digest[..2], 16).unwrap_or(0) % 2 == 1
                            || report.valid_rows > 1
                    }
                    _ => false,
                })
            },
        },
        Distinguisher {
            name: "corrupted-write-share",
            guess: |v, c| {
                let pa: u32 = opened(v, c.focus.a, FrameKind::Write)
                    .iter()
                    .map(|b| popcount(b))
                    .sum();
                let pb: u32 = opened(v, c.focus.b, FrameKind::Write)
                    .iter()
                    .map(|b| popcount(b))
                    .sum();
                pb > pa
            },
        },
        Distinguisher {
            name: "corrupted-query-bit",
            guess: |v, c| {
                opened(v, c.focus.a, FrameKind::Subscribe).iter().any(|b| {
                    SubscriptionBody::from_bytes(b)
                        .map(|s| {
                            s.slot == 0
                                && s.query.bits.get(c.focus.block).map(|x| *x).unwrap_or(false)
                        })
                        .unwrap_or(false)
                })
            },
        },
        Distinguisher {
            name: "recombine-shares",
            guess: |v, c| match c.restriction {
                Restriction::PublisherOnlyDiffers => reconstructs_message(v, c, c.focus.b),
                Restriction::SubscriptionsOnlyDiffer => {
                    reconstructs_query(v, c, c.focus.a) == Some(c.focus.block)
                }
            },
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinguisherScore {
    pub name: String,
    /// `Pr[guess = 1 | s0]`.
    pub p0: f64,
    /// `Pr[guess = 1 | s1]`.
    pub p1: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameReport {
    pub trials: usize,
    pub scores: Vec<DistinguisherScore>,
    /// Largest advantage over the battery.
    pub advantage: f64,
}

/// Small deployment used for the games: two servers with server 1
/// corrupted, three clients, two topics, one round, full capture.
pub fn game_config(encrypt: bool) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.network.servers = 2;
    c.network.clients = 3;
    c.network.encrypt = encrypt;
    c.network.capture = true;
    c.write.rows = 64;
    c.write.payload = 32;
    c.read.epoch = 1000;
    c.read.slots = 1;
    c.workload.topics = 2;
    c.workload.interests = 0;
    c.workload.message_len = 5;
    c
}

/// Runs each scenario `trials` times on fresh seeds and scores the battery
/// on the adversary's view.
pub fn distinguisher_experiment(
    config: &ScenarioConfig,
    script: &AdversaryScript,
    challenge: &GameChallenge,
    trials: usize,
    seed: u64,
) -> Result<GameReport> {
    challenge.validate()?;
    let dir = TopicDirectory::with_topics((1..=config.workload.topics).map(TopicId));
    let ctx = GameContext {
        restriction: challenge.restriction,
        focus: challenge.focus(&dir),
        n_servers: config.network.servers,
        domain: config.write.rows,
        width: config.layout().width(),
        blocks: dir.len(),
    };
    let battery = battery();
    let mut ones = [vec![0usize; battery.len()], vec![0usize; battery.len()]];
    for t in 0..trials as u64 {
        for (b, scenario) in [&challenge.s0, &challenge.s1].into_iter().enumerate() {
            let run_seed = seed ^ (t << 1 | b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let run = run_schedule(config, script, scenario, 1, run_seed)?;
            let view = adversary_view(&run.trace, script);
            for (k, d) in battery.iter().enumerate() {
                ones[b][k] += (d.guess)(&view, &ctx) as usize;
            }
        }
    }
    let scores: Vec<DistinguisherScore> = battery
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let p0 = ones[0][k] as f64 / trials as f64;
            let p1 = ones[1][k] as f64 / trials as f64;
            DistinguisherScore {
                name: d.name.to_string(),
                p0,
                p1,
                advantage: (p1 - p0).abs(),
            }
        })
        .collect();
    let advantage = scores.iter().map(|s| s.advantage).fold(0.0, f64::max);
    Ok(GameReport {
        trials,
        scores,
        advantage,
    })
}

// ---------------------------------------------------------------- scaling

/// Fastest of `reps` full-domain evaluations of one DPF key, in seconds.
pub fn time_dpf_expansion<R: RngCore + rand::CryptoRng>(
    domain: usize,
    width: usize,
    reps: usize,
    rng: &mut R,
) -> Result<f64> {
    let f = PointFunction::new(rng.gen_range(0..domain), vec![0xA5; width]);
    let (k0, _) = gen_dpf(&f, domain, rng)?;
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let sw = Stopwatch::start();
        let m = eval_full(&k0, domain)?;
        best = best.min(sw.secs());
        std::hint::black_box(m);
    }
    Ok(best)
}

/// Fastest of `reps` PIR answers over `blocks` blocks of `block_size`
/// bytes with a random query, in seconds.
pub fn time_pir_answer<R: RngCore>(
    blocks: usize,
    block_size: usize,
    reps: usize,
    rng: &mut R,
) -> Result<f64> {
    let dir = TopicDirectory::with_topics((1..=blocks as u32).map(TopicId));
    let data: Vec<Vec<u8>> = (0..blocks)
        .map(|_| {
            let mut b = vec![0u8; block_size];
            rng.fill_bytes(&mut b);
            b
        })
        .collect();
    let db = ReadDatabase::from_blocks(0, dir, data)?;
    let mut q = PirQuery::zeros(blocks);
    for i in 0..blocks {
        q.bits.set(i, true);
    }
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let sw = Stopwatch::start();
        let a = answer(&q, &db)?;
        best = best.min(sw.secs());
        std::hint::black_box(a);
    }
    Ok(best)
}

// -------------------------------------------------------------------- csv

/// One result: experiment, parameter point, metric, value, standard error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub experiment: String,
    pub point: String,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
}

impl CsvRow {
    pub fn new(
        experiment: &str,
        point: impl Into<String>,
        metric: &str,
        value: f64,
        stderr: f64,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            point: point.into(),
            metric: metric.into(),
            value,
            stderr,
        }
    }
}

pub fn to_csv(rows: &[CsvRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Malformed(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Malformed(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Malformed(e.to_string()))
}
