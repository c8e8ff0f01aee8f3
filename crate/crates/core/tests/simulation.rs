//! Multi-round protocol and ranking metrics.

use std::sync::OnceLock;

use kgcrit_core::engine::importance_weights;
use kgcrit_core::metrics::{hr_at_k, ndcg_at_k, recall_at_k};
use kgcrit_core::model::train_base;
use kgcrit_core::simulator::{
    evaluate_base, run_experiment, sweep, sweep_records, write_csv, write_jsonl,
};
use kgcrit_core::synthetic::{generate, SyntheticConfig};
use kgcrit_core::{
    Arm, EmbeddingStoreF64, ExperimentConfig, ImportanceWeightsF64, InteractionSet, ItemId,
    KnowledgeGraph, SweepParam, TrainConfig,
};
use proptest::prelude::*;

struct Fixture {
    kg: KnowledgeGraph,
    inter: InteractionSet,
    store: EmbeddingStoreF64,
    weights: ImportanceWeightsF64,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (kg, inter) = generate(&SyntheticConfig::default()).unwrap().build(2, 0.8, 0).unwrap();
        let (store, _) = train_base(&kg, &inter, &TrainConfig { epochs: 10, ..TrainConfig::default() }).unwrap();
        let weights = importance_weights(&store, &inter);
        Fixture { kg, inter, store, weights }
    })
}

fn run(cfg: &ExperimentConfig) -> kgcrit_core::ExperimentResult {
    let f = fixture();
    run_experiment(cfg, &f.store, &f.weights, &f.kg, &f.inter).unwrap()
}

#[test]
fn zero_rounds_is_the_base_model() {
    let f = fixture();
    let r = run(&ExperimentConfig { rounds: 0, ..ExperimentConfig::default() });
    assert_eq!(r.rounds.len(), 1);
    assert_eq!(r.rounds[0], evaluate_base(&f.store, &f.inter, 5));
    assert_eq!(r.max_improvement().ndcg, 0.0);
}

#[test]
fn round_zero_matches_direct_evaluation_for_every_arm() {
    let f = fixture();
    let base = evaluate_base(&f.store, &f.inter, 5);
    for arm in Arm::ALL {
        let r = run(&ExperimentConfig { rounds: 2, arm, ..ExperimentConfig::default() });
        assert_eq!(r.rounds[0], base, "{}", arm.name());
        assert_eq!(r.rounds.len(), 3);
    }
}

#[test]
fn same_seed_same_report() {
    let cfg = ExperimentConfig { rounds: 3, seed: 5, ..ExperimentConfig::default() };
    let (a, b) = (run(&cfg), run(&cfg));
    assert_eq!(a, b);
    let (mut ja, mut jb) = (Vec::new(), Vec::new());
    write_jsonl(&a.records(None, None), &mut ja).unwrap();
    write_jsonl(&b.records(None, None), &mut jb).unwrap();
    assert_eq!(ja, jb);
}

#[test]
fn users_without_test_items_are_excluded() {
    let f = fixture();
    let evaluable = (0..f.inter.n_users())
        .filter(|&u| !f.inter.test_items(kgcrit_core::UserId(u)).is_empty())
        .count();
    let r = run(&ExperimentConfig { rounds: 1, ..ExperimentConfig::default() });
    assert_eq!(r.users.len(), evaluable);
    assert!(r.rounds.iter().all(|x| x.users == evaluable));
}

#[test]
fn sweeps() {
    let f = fixture();
    let cfg = ExperimentConfig { rounds: 2, ..ExperimentConfig::default() };
    let single = sweep(SweepParam::LambdaOmega, &[1e-3], &cfg, &f.store, &f.weights, &f.kg, &f.inter).unwrap();
    assert_eq!(single[0].result, run(&cfg));

    let grid = sweep(SweepParam::Samples, &[1.0, 5.0], &cfg, &f.store, &f.weights, &f.kg, &f.inter).unwrap();
    let recs = sweep_records(SweepParam::Samples, &grid);
    for m in [1.0, 5.0] {
        let rows = recs
            .iter()
            .filter(|r| r.value == Some(m) && r.metric == "ndcg@5" && r.step.is_some())
            .count();
        assert_eq!(rows, cfg.rounds + 1);
    }
    let mut csv = Vec::new();
    write_csv(&recs, &mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("arm,param,value,step,metric,score\n"));

    assert!(sweep(SweepParam::Samples, &[], &cfg, &f.store, &f.weights, &f.kg, &f.inter).is_err());
    assert!(sweep(SweepParam::Samples, &[2.5], &cfg, &f.store, &f.weights, &f.kg, &f.inter).is_err());
}

fn arb_ranking() -> impl Strategy<Value = (Vec<ItemId>, Vec<ItemId>, usize)> {
    (2..30usize).prop_flat_map(|n| {
        (
            Just((0..n).map(ItemId).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::btree_set(0..n, 1..=n),
            1..=n,
        )
            .prop_map(|(r, rel, k)| (r, rel.into_iter().map(ItemId).collect(), k))
    })
}

proptest! {
    #[test]
    fn hit_rate_dominates_recall((ranked, rel, k) in arb_ranking()) {
        prop_assert!(hr_at_k(&ranked, &rel, k).unwrap() >= recall_at_k(&ranked, &rel, k).unwrap());
    }

    #[test]
    fn metrics_ignore_order_below_k((ranked, rel, k) in arb_ranking(), seed in any::<u64>()) {
        let mut tail = ranked[k.min(ranked.len())..].to_vec();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(&mut tail[..], &mut rng);
        let mut other = ranked[..k.min(ranked.len())].to_vec();
        other.extend(tail);
        prop_assert_eq!(ndcg_at_k(&ranked, &rel, k), ndcg_at_k(&other, &rel, k));
        prop_assert_eq!(recall_at_k(&ranked, &rel, k), recall_at_k(&other, &rel, k));
        prop_assert_eq!(hr_at_k(&ranked, &rel, k), hr_at_k(&other, &rel, k));
    }

    #[test]
    fn ndcg_is_one_iff_relevant_fill_the_top((ranked, rel, k) in arb_ranking()) {
        let n = ndcg_at_k(&ranked, &rel, k).unwrap();
        let need = k.min(rel.len());
        let top_ok = ranked[..need].iter().all(|v| rel.binary_search(v).is_ok());
        prop_assert_eq!((n - 1.0).abs() < 1e-12, top_ok);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
    }
}
