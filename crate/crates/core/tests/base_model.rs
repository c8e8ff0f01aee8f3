//! Reference base model: training behaviour and persistence.

use kgcrit_core::engine::{export_importance, import_importance, importance_weights};
use kgcrit_core::model::{export_embeddings, import_embeddings, train_base};
use kgcrit_core::simulator::evaluate_base;
use kgcrit_core::synthetic::{generate, SyntheticConfig};
use kgcrit_core::{EmbeddingStore, Error, TrainConfig};
use proptest::prelude::*;

fn synthetic() -> (kgcrit_core::KnowledgeGraph, kgcrit_core::InteractionSet) {
    generate(&SyntheticConfig::default()).unwrap().build(2, 0.8, 0).unwrap()
}

#[test]
fn loss_decreases_over_first_five_epochs() {
    let (kg, inter) = synthetic();
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let (_, report) = train_base::<f64>(&kg, &inter, &cfg).unwrap();
    assert_eq!(report.epoch_loss.len(), 5);
    for w in report.epoch_loss.windows(2) {
        assert!(w[1] < w[0], "{:?}", report.epoch_loss);
    }
}

#[test]
fn zero_kg_weight_never_reads_triples() {
    let (kg, inter) = synthetic();
    let before = kg.triple_reads();
    let cfg = TrainConfig { epochs: 2, kg_loss_weight: 0.0, ..TrainConfig::default() };
    train_base::<f32>(&kg, &inter, &cfg).unwrap();
    assert_eq!(kg.triple_reads(), before);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    train_base::<f32>(&kg, &inter, &cfg).unwrap();
    assert!(kg.triple_reads() > before);
}

#[test]
fn norms_stay_bounded() {
    let (kg, inter) = synthetic();
    let cfg = TrainConfig::default();
    let init = EmbeddingStore::<f64>::random(cfg.dim, inter.n_users(), kg.n_items(), kg.n_keyphrases(), kg.n_relations(), cfg.seed);
    let (store, _) = train_base::<f64>(&kg, &inter, &cfg).unwrap();
    for (before, after) in init.matrices().into_iter().zip(store.matrices()) {
        assert!(after.max_row_norm() <= 10.0 * before.max_row_norm().max(1.0 / (cfg.dim as f64).sqrt()));
    }
}

#[test]
fn training_is_deterministic() {
    let (kg, inter) = synthetic();
    let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
    let (a, ra) = train_base::<f32>(&kg, &inter, &cfg).unwrap();
    let (b, rb) = train_base::<f32>(&kg, &inter, &cfg).unwrap();
    assert_eq!(a.users.as_slice(), b.users.as_slice());
    assert_eq!(a.relations.as_slice(), b.relations.as_slice());
    assert_eq!(ra, rb);
    let (c, _) = train_base::<f32>(&kg, &inter, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.users.as_slice(), c.users.as_slice());
}

#[test]
fn planted_blocks_beat_random_embeddings() {
    let data = generate(&SyntheticConfig::planted_block()).unwrap();
    let (kg, inter) = data.build(2, 0.6, 0).unwrap();
    let cfg = TrainConfig { epochs: 200, batch_size: 8, ..TrainConfig::default() };
    let (trained, _) = train_base::<f64>(&kg, &inter, &cfg).unwrap();
    let t = evaluate_base(&trained, &inter, 5).metrics.recall;
    // Expected Recall@5 of an untrained store, averaged over initialisations.
    let draws = 50;
    let r = (0..draws)
        .map(|s| {
            let untrained = EmbeddingStore::<f64>::random(cfg.dim, inter.n_users(), kg.n_items(), kg.n_keyphrases(), kg.n_relations(), s);
            evaluate_base(&untrained, &inter, 5).metrics.recall
        })
        .sum::<f64>()
        / draws as f64;
    assert!(t >= 3.0 * r, "trained {t} vs untrained {r}");
}

#[test]
fn nan_learning_rate_is_rejected() {
    let (kg, inter) = synthetic();
    let cfg = TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() };
    assert!(matches!(train_base::<f64>(&kg, &inter, &cfg), Err(Error::Config(_))));
}

#[test]
fn exploding_training_aborts_with_location() {
    let (kg, inter) = synthetic();
    let cfg = TrainConfig { learning_rate: 1e30, epochs: 3, ..TrainConfig::default() };
    match train_base::<f32>(&kg, &inter, &cfg) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}"),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn importance_file_rejects_negative_entries() {
    let (kg, inter) = synthetic();
    let store = EmbeddingStore::<f32>::random(4, inter.n_users(), kg.n_items(), kg.n_keyphrases(), 1, 0);
    let mut w = importance_weights(&store, &inter);
    w.omega.row_mut(0)[0] = -1.0;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("omega.bin");
    export_importance(&w, &p).unwrap();
    assert!(import_importance::<f32>(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn embedding_files_round_trip(dim in 2..6usize, u in 0..5usize, i in 0..5usize, k in 0..5usize, r in 0..3usize, seed in any::<u64>()) {
        let store = EmbeddingStore::<f32>::random(dim, u, i, k, r, seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        export_embeddings(&store, &p).unwrap();
        let back = import_embeddings::<f32>(&p).unwrap();
        prop_assert_eq!(back.matrices().map(|m| m.as_slice().to_vec()), store.matrices().map(|m| m.as_slice().to_vec()));
        prop_assert_eq!(back.dim(), dim);
        // f64 stores persist as f32 and come back equal to the rounded values.
        let wide = store.cast::<f64>();
        export_embeddings(&wide, &p).unwrap();
        let back = import_embeddings::<f64>(&p).unwrap();
        prop_assert_eq!(back.users.as_slice(), wide.users.as_slice());
    }

    #[test]
    fn truncated_embedding_files_fail(cut in 1..40usize) {
        let store = EmbeddingStore::<f32>::random(3, 2, 2, 2, 1, 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        export_embeddings(&store, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let keep = bytes.len() - cut.min(bytes.len() - header);
        std::fs::write(&p, &bytes[..keep]).unwrap();
        prop_assert!(matches!(import_embeddings::<f32>(&p), Err(Error::Shape(_))));
    }
}

#[test]
fn importance_round_trip() {
    let (kg, inter) = synthetic();
    let store = EmbeddingStore::<f32>::random(4, inter.n_users(), kg.n_items(), kg.n_keyphrases(), 1, 3);
    let w = importance_weights(&store, &inter);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("omega.bin");
    export_importance(&w, &p).unwrap();
    assert_eq!(import_importance::<f32>(&p).unwrap(), w);
}
