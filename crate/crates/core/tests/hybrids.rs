use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use twopps_core::analysis::{
    distinguisher_experiment, game_config, hybrid, publisher_swap, HYBRIDS,
};
use twopps_core::model::TopicId;
use twopps_core::netlab::AdversaryScript;

#[test]
fn every_hybrid_step_has_small_advantage() {
    let cfg = game_config(true);
    let script = AdversaryScript::parse("corrupt servers=1").unwrap();
    let subs = BTreeMap::from([(2u64, vec![TopicId(1)])]);
    let base = publisher_swap(0, 1, TopicId(1), b"hello", subs);
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for (i, step) in HYBRIDS.into_iter().enumerate() {
        let challenge = hybrid(&base, step, cfg.workload.topics, &mut rng);
        let report =
            distinguisher_experiment(&cfg, &script, &challenge, 2000, 900 + i as u64).unwrap();
        println!("{step:?}: advantage {:.4}", report.advantage);
        assert!(report.advantage <= 0.05, "{step:?}: {:?}", report.scores);
    }
}
