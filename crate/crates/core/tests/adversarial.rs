use proptest::prelude::*;
use sae_unlearn::adversarial::{concurrent_greedy_search, target_loss, AttackConfig, AttackResult};
use sae_unlearn::fixtures::trigger_fixture;
use sae_unlearn::model::{greedy_decode, ModelConfig, ToyModel};

fn small(seed: u64) -> AttackConfig {
    AttackConfig {
        tries_per_iteration: 4,
        candidates_per_index: 8,
        iterations: 6,
        suffix_length: 5,
        seed,
        patience: None,
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let fx = trigger_fixture().unwrap();
    let cfg = AttackConfig { iterations: 4, suffix_length: 6, ..small(3) };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| concurrent_greedy_search(&fx.model, "q", &fx.prompt, &fx.target, &cfg).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn patience_stops_a_stalled_search() {
    let model = ToyModel::zeros(ModelConfig::new(8, 1, 1, 10, 0)).unwrap();
    let cfg = AttackConfig { patience: Some(2), iterations: 50, ..small(1) };
    let r = concurrent_greedy_search(&model, "q", &[1, 2], &[3], &cfg).unwrap();
    assert_eq!(r.loss_trace.len(), 2);
    assert_eq!(r.evaluations, 1 + 2 * 4 * 8);
    assert_eq!(r.suffix, r.initial_suffix);
}

#[test]
fn result_round_trips_through_json() {
    let fx = trigger_fixture().unwrap();
    let r = concurrent_greedy_search(&fx.model, &fx.attack.id, &fx.prompt, &fx.target, &small(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attack.json");
    r.save(&path).unwrap();
    let back: AttackResult = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn invalid_configs_are_rejected() {
    let fx = trigger_fixture().unwrap();
    for cfg in [
        AttackConfig { suffix_length: 0, ..small(0) },
        AttackConfig { tries_per_iteration: 0, ..small(0) },
        AttackConfig { patience: Some(0), ..small(0) },
    ] {
        assert!(concurrent_greedy_search(&fx.model, "q", &fx.prompt, &fx.target, &cfg).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn search_invariants(seed in 0u64..10_000) {
        let fx = trigger_fixture().unwrap();
        let cfg = small(seed);
        let r = concurrent_greedy_search(&fx.model, "q", &fx.prompt, &fx.target, &cfg).unwrap();
        prop_assert!(r.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(r.final_loss <= r.initial_loss);
        prop_assert!(r.evaluations <= cfg.evaluation_budget());
        prop_assert_eq!(r.final_loss, target_loss(&fx.model, &fx.prompt, &r.suffix, &fx.target).unwrap());
        prop_assert_eq!(r.initial_loss, target_loss(&fx.model, &fx.prompt, &r.initial_suffix, &fx.target).unwrap());
        let changed = r.suffix.iter().zip(&r.initial_suffix).filter(|(a, b)| a != b).count();
        let improvements = std::iter::once(r.initial_loss).chain(r.loss_trace.iter().copied()).collect::<Vec<_>>()
            .windows(2).filter(|w| w[1] < w[0]).count();
        prop_assert!(changed <= improvements);
        let mut ctx = fx.prompt.clone();
        ctx.extend(&r.suffix);
        let decoded = greedy_decode(&fx.model, &ctx, 1).unwrap();
        prop_assert_eq!(r.success, decoded == fx.target);
    }
}
