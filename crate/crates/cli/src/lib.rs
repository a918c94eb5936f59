//! Command-line front-end: scenario runs, scripted attacks, analysis
//! experiments and cost sweeps.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{debug, info};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use twopps_core::analysis::{
    collision_success_rate, counting_bound_padding, cover_ratio, derive_table_size,
    distinguisher_experiment, game_config, hybrid, publisher_swap, simulate_collisions,
    simulate_intersection, subscriber_swap, time_dpf_expansion, time_pir_answer, to_csv, CsvRow,
    IntersectionConfig, Participation, ZipfWorkload, COVER_SWEEP, HYBRIDS,
};
use twopps_core::model::TopicId;
use twopps_core::netlab::{
    run_scenario, AdversaryScript, Endpoint, FrameKind, PhaseCosts, Run, ScenarioConfig, Trace,
    TraceEvent,
};
use twopps_core::stats::{linear_fit, mean, paired_t_greater_p, std_err};
use twopps_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_HALT: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "twopps", version, about = "Anonymous pub/sub scenario runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run a scenario and report traffic and costs.
    Run(RunArgs),
    /// Run a scenario under an adversary script.
    Attack(AttackArgs),
    /// Run an analysis experiment and print CSV.
    Analyze(AnalyzeArgs),
    /// Sweep table, block and client sizes and print scaling CSV.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Scenario file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the number of rounds.
    #[arg(long)]
    pub rounds: Option<u64>,
    /// Directory for the trace, report and CSV files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print per-round CSV instead of the JSON summary.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Script file or built-in name.
    #[arg(long)]
    pub script: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Collision,
    CoverRatio,
    Padding,
    Intersection,
    Games,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub experiment: Experiment,
    #[arg(long, default_value_t = 1, global = true)]
    pub seed: u64,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Output is always CSV; accepted for symmetry with `run`.
    #[arg(long, global = true)]
    pub csv: bool,
    #[arg(long, default_value_t = 0.8, global = true)]
    pub alpha_msg: f64,
    #[arg(long, default_value_t = 1.37, global = true)]
    pub alpha_sub: f64,
    /// Messages of the most popular topic.
    #[arg(long, default_value_t = 1000, global = true)]
    pub top: u64,
    /// Topic counts to sweep.
    #[arg(long, value_delimiter = ',', global = true)]
    pub topics: Vec<usize>,
    #[arg(long, default_value_t = 100_000, global = true)]
    pub samples: usize,
    /// Trials per game or per collision point, seeds for the intersection attack.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Per-topic message counts for `padding`.
    #[arg(long, value_delimiter = ',', global = true)]
    pub counts: Vec<u64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: bool,
    /// Repetitions per timing point; the fastest counts.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Largest `log2 ℓ_w` in the DPF sweep.
    #[arg(long, default_value_t = 16)]
    pub max_log_rows: u32,
}

/// Traffic of one round, derived from frame lengths in the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    /// Write-frame bytes each client sent; `None` if clients differ.
    pub upstream_write_per_client: Option<u64>,
    pub upstream_subscribe_bytes: u64,
    /// Response payload each client received; `None` if clients differ.
    pub downstream_payload_per_client: Option<u64>,
    pub downstream_wire_bytes: u64,
    pub server_to_server_bytes: u64,
    pub collided_rows: usize,
    pub valid_rows: usize,
    pub block_size: usize,
    pub halts: Vec<String>,
    pub aborted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub rounds: u64,
    pub upstream_bytes: u64,
    /// Response payload per client over the run.
    pub downstream_payload: BTreeMap<u64, u64>,
    pub messages_published: usize,
    pub messages_delivered: usize,
    pub collided_messages: usize,
    pub first_halt: Option<String>,
    pub trace_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub script: AdversaryScript,
    pub rounds: Vec<RoundMetrics>,
    pub costs: PhaseCosts,
    pub totals: Totals,
}

fn uniform(values: impl Iterator<Item = u64>) -> Option<u64> {
    let mut it = values;
    let first = it.next()?;
    it.all(|v| v == first).then_some(first)
}

/// Builds the report. Byte counts come only from frame lengths in the trace.
pub fn build_report(config: &ScenarioConfig, script: &AdversaryScript, run: &Run) -> RunReport {
    let clients: Vec<u64> = (0..config.network.clients as u64).collect();
    let trace = &run.trace;
    let rounds = (0..run.rounds)
        .map(|r| {
            let reveal = trace.events.iter().find_map(|e| match e {
                TraceEvent::Reveal { round, report, .. } if *round == r => Some(report),
                _ => None,
            });
            let halts = trace
                .halts()
                .into_iter()
                .filter(|h| h.0 == r)
                .map(|h| format!("server{}:{}", h.1, h.2.label()))
                .collect();
            RoundMetrics {
                round: r,
                upstream_write_per_client: uniform(clients.iter().map(|&c| {
                    trace.frame_bytes(false, |fr, from, _, kind| {
                        fr == r && from == Endpoint::Client(c) && kind == FrameKind::Write
                    })
                })),
                upstream_subscribe_bytes: trace.frame_bytes(false, |fr, from, _, kind| {
                    fr == r && matches!(from, Endpoint::Client(_)) && kind == FrameKind::Subscribe
                }),
                downstream_payload_per_client: uniform(clients.iter().map(|&c| {
                    trace.frame_bytes(true, |fr, _, to, kind| {
                        fr == r && to == Endpoint::Client(c) && kind == FrameKind::Response
                    })
                })),
                downstream_wire_bytes: trace.frame_bytes(false, |fr, _, to, _| {
                    fr == r && matches!(to, Endpoint::Client(_))
                }),
                server_to_server_bytes: trace.frame_bytes(false, |fr, from, to, _| {
                    fr == r
                        && matches!(from, Endpoint::Server(_))
                        && matches!(to, Endpoint::Server(_))
                }),
                collided_rows: reveal.map_or(0, |x| x.collided_rows),
                valid_rows: reveal.map_or(0, |x| x.valid_rows),
                block_size: reveal.map_or(0, |x| x.block_size),
                halts,
                aborted: run.aborted_rounds.contains(&r),
            }
        })
        .collect();
    let totals = Totals {
        rounds: run.rounds,
        upstream_bytes: trace
            .frame_bytes(false, |_, from, _, _| matches!(from, Endpoint::Client(_))),
        downstream_payload: clients
            .iter()
            .map(|&c| (c, trace.client_downstream_payload(c)))
            .collect(),
        messages_published: run.published.len(),
        messages_delivered: run.delivered.values().map(Vec::len).sum(),
        collided_messages: run.published.iter().filter(|m| m.collided).count(),
        first_halt: run.first_halt().map(|h| h.2.label().to_string()),
        trace_sha256: trace.hash(),
    };
    RunReport {
        seed: run.seed,
        config: config.clone(),
        script: script.clone(),
        rounds,
        costs: run.costs.clone(),
        totals,
    }
}

fn opt(v: Option<u64>) -> f64 {
    v.map_or(f64::NAN, |x| x as f64)
}

pub fn report_csv(report: &RunReport) -> Vec<CsvRow> {
    let mut rows = vec![seed_row("run", report.seed)];
    for m in &report.rounds {
        let p = format!("round={}", m.round);
        rows.push(CsvRow::new(
            "run",
            p.clone(),
            "upstream_write_per_client",
            opt(m.upstream_write_per_client),
            0.0,
        ));
        rows.push(CsvRow::new(
            "run",
            p.clone(),
            "downstream_payload_per_client",
            opt(m.downstream_payload_per_client),
            0.0,
        ));
        rows.push(CsvRow::new(
            "run",
            p.clone(),
            "collided_rows",
            m.collided_rows as f64,
            0.0,
        ));
        rows.push(CsvRow::new(
            "run",
            p.clone(),
            "block_size",
            m.block_size as f64,
            0.0,
        ));
        rows.push(CsvRow::new("run", p, "halts", m.halts.len() as f64, 0.0));
    }
    rows
}

fn seed_row(experiment: &str, seed: u64) -> CsvRow {
    CsvRow::new(experiment, format!("seed={seed}"), "seed", seed as f64, 0.0)
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig, Error> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            ScenarioConfig::parse(&text)
        }
        None => Ok(ScenarioConfig::default()),
    }
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn csv_text(rows: &[CsvRow]) -> Result<String, Error> {
    to_csv(rows)
}

fn run_common(common: &Common, script_arg: Option<&str>) -> Result<i32, Error> {
    let mut config = load_config(common.config.as_deref())?;
    let source = script_arg
        .map(str::to_string)
        .or_else(|| config.adversary.script.clone());
    let script = match &source {
        Some(s) => AdversaryScript::load(s)?,
        None => AdversaryScript::default(),
    };
    if let Some(s) = common.seed {
        config.network.seed = s;
    }
    if let Some(r) = common.rounds {
        config.network.rounds = r;
    }
    let (seed, rounds) = (config.network.seed, config.network.rounds);
    info!(
        "running {rounds} rounds, seed {seed}, {} clients, {} servers",
        config.network.clients, config.network.servers
    );
    let run = run_scenario(&config, &script, rounds, seed)?;
    let report = build_report(&config, &script, &run);
    for m in &report.rounds {
        debug!("{}", serde_json::to_string(m).unwrap_or_default());
    }
    let csv = csv_text(&report_csv(&report))?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Malformed(e.to_string()))?;
    if let Some(dir) = &common.out {
        write_out(
            dir,
            &format!("trace-seed{seed}.ndjson"),
            &trace_file(&run.trace, seed),
        )?;
        write_out(dir, &format!("report-seed{seed}.json"), &json)?;
        write_out(dir, &format!("rounds-seed{seed}.csv"), &csv)?;
    }
    if common.csv {
        print!("{csv}");
    } else {
        println!("{json}");
    }
    match run.first_halt() {
        Some((round, server, reason)) => {
            eprintln!("halt: {} (round {round}, server {server})", reason.label());
            Ok(EXIT_HALT)
        }
        None => Ok(EXIT_OK),
    }
}

/// NDJSON trace preceded by a header line carrying the seed.
pub fn trace_file(trace: &Trace, seed: u64) -> String {
    let header =
        serde_json::json!({ "event": "header", "seed": seed, "events": trace.events.len() });
    format!("{header}\n{}", trace.to_ndjson())
}

fn analyze(args: &AnalyzeArgs) -> Result<Vec<CsvRow>, Error> {
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut rows = vec![seed_row("analyze", args.seed)];
    match args.experiment {
        Experiment::Collision => {
            let trials = args.trials.unwrap_or(100);
            for (l, n) in [(5000usize, 1000usize), (50_000, 10_000)] {
                let p = format!("rows={l},writers={n}");
                rows.push(CsvRow::new(
                    "collision",
                    p.clone(),
                    "analytic",
                    collision_success_rate(l, n),
                    0.0,
                ));
                let (m, se) = simulate_collisions(l, n, trials, &mut rng);
                rows.push(CsvRow::new("collision", p, "simulated", m, se));
            }
            let targets = [(1000, 0.998), (10_000, 0.98), (100_000, 0.82)];
            let l = derive_table_size(&targets, 1000, 2_000_000, 1000);
            rows.push(CsvRow::new("collision", "derived", "rows", l as f64, 0.0));
            for (n, _) in targets {
                rows.push(CsvRow::new(
                    "collision",
                    format!("rows={l},writers={n}"),
                    "analytic",
                    collision_success_rate(l, n),
                    0.0,
                ));
            }
        }
        Experiment::CoverRatio => {
            let sweep = if args.topics.is_empty() {
                COVER_SWEEP.to_vec()
            } else {
                args.topics.clone()
            };
            for t in sweep {
                let w = ZipfWorkload {
                    topic_count: t,
                    message_zipf_alpha: args.alpha_msg,
                    subscription_zipf_alpha: args.alpha_sub,
                    max_topic_messages: args.top,
                };
                let (m, se) = cover_ratio(&w, args.samples, &mut rng)?;
                let p = format!(
                    "T={t},alpha_msg={},alpha_sub={},top={}",
                    args.alpha_msg, args.alpha_sub, args.top
                );
                rows.push(CsvRow::new("cover-ratio", p.clone(), "mean", m, se));
                rows.push(CsvRow::new(
                    "cover-ratio",
                    p,
                    "exact",
                    w.expected_cover_ratio(),
                    0.0,
                ));
            }
        }
        Experiment::Padding => {
            let counts = if args.counts.is_empty() {
                ZipfWorkload {
                    topic_count: 10,
                    message_zipf_alpha: args.alpha_msg,
                    subscription_zipf_alpha: args.alpha_sub,
                    max_topic_messages: args.top,
                }
                .message_counts()
            } else {
                args.counts.clone()
            };
            for (i, (c, p)) in counts
                .iter()
                .zip(counting_bound_padding(&counts))
                .enumerate()
            {
                rows.push(CsvRow::new(
                    "padding",
                    format!("topic={},count={c}", i + 1),
                    "pad",
                    p as f64,
                    0.0,
                ));
            }
        }
        Experiment::Intersection => {
            let seeds = args.trials.unwrap_or(100) as u64;
            let cfg = IntersectionConfig::default();
            let mut base = Vec::new();
            for (name, pattern) in [
                ("send-only", Participation::SendOnly),
                ("constant-cover", Participation::ConstantWithCover),
                ("delayed-0-3", Participation::Delayed { max_delay: 3 }),
            ] {
                let outs: Vec<_> = (0..seeds)
                    .map(|s| simulate_intersection(&cfg, pattern, args.seed + s))
                    .collect();
                let times: Vec<f64> = outs.iter().map(|o| o.censored(cfg.max_rounds)).collect();
                let reached = outs
                    .iter()
                    .filter(|o| o.rounds_to_singleton.is_some())
                    .count();
                let min_size = outs
                    .iter()
                    .map(|o| *o.sizes.last().unwrap_or(&0))
                    .min()
                    .unwrap_or(0);
                rows.push(CsvRow::new(
                    "intersection",
                    name,
                    "rounds_to_singleton",
                    mean(&times),
                    std_err(&times),
                ));
                rows.push(CsvRow::new(
                    "intersection",
                    name,
                    "singleton_fraction",
                    reached as f64 / seeds as f64,
                    0.0,
                ));
                rows.push(CsvRow::new(
                    "intersection",
                    name,
                    "min_final_candidates",
                    min_size as f64,
                    0.0,
                ));
                if pattern == Participation::SendOnly {
                    base = times;
                } else if let Participation::Delayed { .. } = pattern {
                    rows.push(CsvRow::new(
                        "intersection",
                        name,
                        "paired_t_p",
                        paired_t_greater_p(&base, &times),
                        0.0,
                    ));
                }
            }
        }
        Experiment::Games => {
            let trials = args.trials.unwrap_or(2000);
            let script = AdversaryScript::parse("corrupt servers=1")?;
            let subs = BTreeMap::from([(2u64, vec![TopicId(1)])]);
            let publisher = publisher_swap(0, 1, TopicId(1), b"hello", subs);
            let subscriber = subscriber_swap(0, TopicId(1), TopicId(2), 2);
            let honest = game_config(true);
            let leaky = game_config(false);
            let mut games = vec![
                ("publisher", &honest, publisher.clone()),
                ("subscriber", &honest, subscriber.clone()),
                ("publisher-unencrypted", &leaky, publisher.clone()),
                ("subscriber-unencrypted", &leaky, subscriber),
            ];
            for h in HYBRIDS.into_iter().skip(1) {
                let name = match h {
                    twopps_core::analysis::Hybrid::H1 => "hybrid-H1",
                    twopps_core::analysis::Hybrid::H2 => "hybrid-H2",
                    _ => "hybrid-H3",
                };
                games.push((
                    name,
                    &honest,
                    hybrid(&publisher, h, honest.workload.topics, &mut rng),
                ));
            }
            for (k, (name, cfg, game)) in games.into_iter().enumerate() {
                info!("game {name}, {trials} trials");
                let r = distinguisher_experiment(
                    cfg,
                    &script,
                    &game,
                    trials,
                    args.seed.wrapping_add(k as u64),
                )?;
                let p = format!("{name},trials={trials}");
                for s in &r.scores {
                    rows.push(CsvRow::new(
                        "games",
                        p.clone(),
                        &format!("advantage:{}", s.name),
                        s.advantage,
                        0.0,
                    ));
                }
                rows.push(CsvRow::new("games", p, "advantage", r.advantage, 0.0));
            }
        }
    }
    Ok(rows)
}

fn bench(args: &BenchArgs) -> Result<Vec<CsvRow>, Error> {
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let mut rows = vec![seed_row("bench", args.seed)];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for bits in 10..=args.max_log_rows.max(10) {
        let l = 1usize << bits;
        let t = time_dpf_expansion(l, 64, args.reps, &mut rng)?;
        rows.push(CsvRow::new(
            "dpf-expand",
            format!("rows={l},width=64"),
            "seconds",
            t,
            0.0,
        ));
        xs.push(l as f64);
        ys.push(t);
    }
    let fit = linear_fit(&xs, &ys);
    rows.push(CsvRow::new(
        "dpf-expand",
        "fit",
        "r_squared",
        fit.r_squared,
        0.0,
    ));
    rows.push(CsvRow::new(
        "dpf-expand",
        "fit",
        "seconds_per_row",
        fit.slope,
        0.0,
    ));

    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for blocks in [16usize, 64, 256] {
        for b in [4096usize, 16_384, 65_536] {
            let t = time_pir_answer(blocks, b, args.reps, &mut rng)?;
            rows.push(CsvRow::new(
                "pir-answer",
                format!("blocks={blocks},block={b}"),
                "seconds",
                t,
                0.0,
            ));
            xs.push((blocks * b) as f64);
            ys.push(t);
        }
    }
    let fit = linear_fit(&xs, &ys);
    rows.push(CsvRow::new(
        "pir-answer",
        "fit",
        "r_squared",
        fit.r_squared,
        0.0,
    ));
    rows.push(CsvRow::new(
        "pir-answer",
        "fit",
        "seconds_per_byte",
        fit.slope,
        0.0,
    ));

    for clients in [8usize, 16, 32] {
        let mut cfg = ScenarioConfig::default();
        cfg.network.clients = clients;
        cfg.write.rows = 4096;
        let run = run_scenario(&cfg, &AdversaryScript::default(), 3, args.seed)?;
        let c = &run.costs;
        let p = format!("clients={clients},rows=4096,rounds=3");
        for (metric, secs, ops) in [
            ("generate_dpf_shares", c.dpf_gen_secs, c.dpf_gen_ops),
            ("expand_dpf_shares", c.expand_secs, c.expand_ops),
            ("audit", c.audit_secs, c.audit_ops),
            (
                "combine_and_group",
                c.combine_group_secs,
                c.combine_group_ops,
            ),
            ("process_pir_query", c.pir_answer_secs, c.pir_answer_ops),
        ] {
            rows.push(CsvRow::new(
                "phase-costs",
                p.clone(),
                &format!("{metric}_seconds"),
                secs,
                0.0,
            ));
            rows.push(CsvRow::new(
                "phase-costs",
                p.clone(),
                &format!("{metric}_ops"),
                ops as f64,
                0.0,
            ));
        }
    }
    Ok(rows)
}

fn emit_rows(rows: &[CsvRow], out: Option<&Path>, name: &str, seed: u64) -> Result<(), Error> {
    let text = csv_text(rows)?;
    if let Some(dir) = out {
        write_out(dir, &format!("{name}-seed{seed}.csv"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn exit_for(err: &Error) -> i32 {
    eprintln!("error: {err}");
    EXIT_CONFIG
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("TWOPPS_LOG", "error"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => run_common(&a.common, None),
        Command::Attack(a) => run_common(&a.common, Some(&a.script)),
        Command::Analyze(a) => analyze(a).and_then(|rows| {
            let name = format!("{:?}", a.experiment).to_lowercase();
            emit_rows(&rows, a.out.as_deref(), &name, a.seed).map(|_| EXIT_OK)
        }),
        Command::Bench(a) => bench(a)
            .and_then(|rows| emit_rows(&rows, a.out.as_deref(), "bench", a.seed).map(|_| EXIT_OK)),
    };
    result.unwrap_or_else(|e| exit_for(&e))
}
