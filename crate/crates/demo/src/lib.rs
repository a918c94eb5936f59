//! WebAssembly bindings for three interactive experiments. Every function
//! returns a JSON string so the page can stay framework-free.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use twopps_core::analysis::{
    collision_success_rate, cover_ratio, simulate_collisions, simulate_intersection,
    IntersectionConfig, Participation, ZipfWorkload,
};

#[derive(Serialize)]
struct CollisionPoint {
    writers: usize,
    analytic: f64,
    simulated: f64,
    stderr: f64,
}

/// Survival probability against the number of writers for a table of
/// `rows` rows, analytic and simulated.
#[wasm_bindgen]
pub fn collision_curve(
    rows: usize,
    max_writers: usize,
    points: usize,
    trials: usize,
    seed: u64,
) -> String {
    let rows = rows.max(1);
    let points = points.clamp(2, 200);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let curve: Vec<CollisionPoint> = (1..=points)
        .map(|k| {
            let writers = (max_writers.max(1) * k / points).max(1);
            let (simulated, stderr) = simulate_collisions(rows, writers, trials.max(1), &mut rng);
            CollisionPoint {
                writers,
                analytic: collision_success_rate(rows, writers),
                simulated,
                stderr,
            }
        })
        .collect();
    serde_json::to_string(&curve).unwrap_or_default()
}

#[derive(Serialize)]
struct CoverPoint {
    topics: usize,
    mean: f64,
    stderr: f64,
    exact: f64,
}

/// Mean cover fraction per retrieval for each topic count in `topics`
/// (comma separated).
#[wasm_bindgen]
pub fn cover_ratio_sweep(
    topics: &str,
    alpha_msg: f64,
    alpha_sub: f64,
    top: u64,
    samples: usize,
    seed: u64,
) -> String {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let points: Vec<CoverPoint> = topics
        .split(',')
        .filter_map(|t| t.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .filter_map(|t| {
            let w = ZipfWorkload {
                topic_count: t,
                message_zipf_alpha: alpha_msg,
                subscription_zipf_alpha: alpha_sub,
                max_topic_messages: top,
            };
            let (mean, stderr) = cover_ratio(&w, samples.max(1), &mut rng).ok()?;
            Some(CoverPoint {
                topics: t,
                mean,
                stderr,
                exact: w.expected_cover_ratio(),
            })
        })
        .collect();
    serde_json::to_string(&points).unwrap_or_default()
}

#[derive(Serialize)]
struct AttackSeries {
    pattern: &'static str,
    sizes: Vec<usize>,
    rounds_to_singleton: Option<u64>,
}

/// Candidate-set size per round for the three participation patterns on
/// the same background traffic.
#[wasm_bindgen]
pub fn intersection_attack(
    topics: u32,
    background: f64,
    send_prob: f64,
    max_delay: u8,
    rounds: u64,
    seed: u64,
) -> String {
    let cfg = IntersectionConfig {
        topics: topics.max(2),
        background: background.clamp(0.0, 1.0),
        send_prob: send_prob.clamp(0.0, 1.0),
        max_rounds: rounds.clamp(1, 2000),
    };
    let series: Vec<AttackSeries> = [
        ("send-only", Participation::SendOnly),
        ("constant-cover", Participation::ConstantWithCover),
        ("delayed", Participation::Delayed { max_delay }),
    ]
    .into_iter()
    .map(|(pattern, p)| {
        let out = simulate_intersection(&cfg, p, seed);
        AttackSeries {
            pattern,
            sizes: out.sizes,
            rounds_to_singleton: out.rounds_to_singleton,
        }
    })
    .collect();
    serde_json::to_string(&series).unwrap_or_default()
}
