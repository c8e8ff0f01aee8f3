//! Proxy sampling: unbiasedness, hop tags, quotas, and the Jensen bound.

use kgcrit_core::engine::{
    expected_log_proxy_likelihood, importance_gradient, log_proxy_evidence, perturbation_estimate,
};
use kgcrit_core::kg::{EntityId, KnowledgeGraph, Triple};
use kgcrit_core::model::EmbeddingStore;
use kgcrit_core::sampler::{multihop_sample, proxy_distribution, ProxyOrigin, SamplerConfig};
use kgcrit_core::scalar::{dot, log_sigmoid, sigmoid};
use kgcrit_core::{ItemId, KeyphraseId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small random graph: items are entities `0..items`, keyphrases above.
fn random_graph(rng: &mut ChaCha8Rng) -> KnowledgeGraph {
    let items = rng.gen_range(2..10);
    let keyphrases = rng.gen_range(1..6);
    let n = items + keyphrases;
    let mut triples = Vec::new();
    for _ in 0..rng.gen_range(1..20) {
        let h = rng.gen_range(0..n);
        let t = rng.gen_range(items..n);
        if h != t {
            triples.push(Triple::new(h, 0, t));
        }
    }
    if triples.is_empty() {
        triples.push(Triple::new(0, 0, items));
    }
    KnowledgeGraph::new((0..items).map(EntityId).collect(), triples, 2).unwrap()
}

fn keyphrase_with_items(kg: &KnowledgeGraph, rng: &mut ChaCha8Rng, cfg: &SamplerConfig) -> Option<KeyphraseId> {
    let ok: Vec<usize> = (0..kg.n_keyphrases())
        .filter(|&k| !proxy_distribution(KeyphraseId(k), kg, cfg).unwrap().is_empty())
        .collect();
    (!ok.is_empty()).then(|| KeyphraseId(ok[rng.gen_range(0..ok.len())]))
}

fn user(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

#[test]
fn monte_carlo_mean_within_three_standard_errors() {
    let draws = 10_000;
    let mut trials = 0;
    let mut seed = 0u64;
    while trials < 100 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kg = random_graph(&mut rng);
        let cfg = SamplerConfig {
            samples: [1, 3, 5, 10][rng.gen_range(0..4)],
            max_hop: 2,
            hop1_ratio: [0.0, 0.5, 0.8, 1.0][rng.gen_range(0..4)],
        };
        let Some(k) = keyphrase_with_items(&kg, &mut rng, &cfg) else { continue };
        let d = 4;
        let store = EmbeddingStore::<f64>::random(d, 1, kg.n_items(), kg.n_keyphrases(), 1, seed);
        let u = user(&mut rng, d);
        let h = 1.0;
        let exact = expected_log_proxy_likelihood(&u, &store, &proxy_distribution(k, &kg, &cfg).unwrap(), h);
        let estimates: Vec<f64> = (0..draws)
            .map(|_| {
                let p = multihop_sample(k, &kg, &cfg, &mut rng).unwrap();
                p.items.iter().map(|&v| log_sigmoid(h - dot(&u, store.item(v)))).sum::<f64>() / p.len() as f64
            })
            .collect();
        let mean = estimates.iter().sum::<f64>() / draws as f64;
        let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se + 1e-12,
            "seed {seed}: sample mean {mean} vs exact {exact}, se {se}"
        );
        trials += 1;
    }
}

#[test]
fn sampled_items_carry_true_hop_tags_and_exact_quotas() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kg = random_graph(&mut rng);
        let cfg = SamplerConfig {
            samples: rng.gen_range(1..12),
            max_hop: 2,
            hop1_ratio: rng.gen_range(0.0..=1.0),
        };
        for k in 0..kg.n_keyphrases() {
            let k = KeyphraseId(k);
            let p = multihop_sample(k, &kg, &cfg, &mut rng).unwrap();
            for (v, o) in p.items.iter().zip(&p.origins) {
                let ProxyOrigin::Hop(h) = *o else { panic!("graph draw tagged uniform") };
                assert!(kg.multihop_items(k, h).unwrap().contains(v));
            }
            let one = kg.multihop_items(k, 1).unwrap();
            let two = kg.multihop_items(k, 2).unwrap();
            if !one.is_empty() && !two.is_empty() {
                let q1 = (cfg.hop1_ratio * cfg.samples as f64).round() as usize;
                assert_eq!(p.count_from_hop(1), q1);
                assert_eq!(p.count_from_hop(2), cfg.samples - q1);
            } else if one.is_empty() && two.is_empty() {
                assert!(p.is_empty());
            } else {
                assert_eq!(p.len(), cfg.samples);
            }
        }
    }
}

#[test]
fn jensen_bound_on_enumerable_graphs() {
    let mut checked = 0;
    let mut strict = 0;
    let mut seed = 10_000u64;
    while checked < 100 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kg = random_graph(&mut rng);
        let cfg = SamplerConfig { samples: 5, max_hop: 2, hop1_ratio: 0.8 };
        let Some(k) = keyphrase_with_items(&kg, &mut rng, &cfg) else { continue };
        let d = 3;
        let store = EmbeddingStore::<f64>::random(d, 1, kg.n_items(), kg.n_keyphrases(), 1, seed);
        // Every tenth instance uses u = 0, where the integrand is constant.
        let u = if checked % 10 == 0 { vec![0.0; d] } else { user(&mut rng, d) };
        let h = 1.0;
        let dist = proxy_distribution(k, &kg, &cfg).unwrap();
        if dist.len() < 2 && checked % 10 != 0 {
            continue;
        }
        let lhs = log_proxy_evidence(&u, &store, &dist, h);
        let rhs = expected_log_proxy_likelihood(&u, &store, &dist, h);
        let values: Vec<f64> = dist.iter().map(|&(v, _)| sigmoid(h - dot(&u, store.item(v)))).collect();
        let constant = values.iter().all(|x| (x - values[0]).abs() < 1e-12);
        if constant {
            assert!((lhs - rhs).abs() < 1e-12, "seed {seed}: constant integrand but gap {}", lhs - rhs);
        } else {
            assert!(lhs > rhs, "seed {seed}: {lhs} <= {rhs}");
            strict += 1;
        }
        checked += 1;
    }
    assert!(strict >= 85, "too few non-degenerate instances: {strict}");
}

#[test]
fn first_order_importance_law() {
    let mut cases = 0;
    let mut seed = 20_000u64;
    while cases < 100 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(2..=8);
        let u = user(&mut rng, d);
        let v = user(&mut rng, d);
        if dot(&u, &v).abs() < 1e-2 {
            continue;
        }
        let raw = user(&mut rng, d);
        let norm = dot(&raw, &raw).sqrt();
        let delta: Vec<f64> = raw.iter().map(|x| x / norm * 1e-4).collect();
        let moved: Vec<f64> = u.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let actual = dot(&moved, &v).abs() - dot(&u, &v).abs();
        let est = perturbation_estimate(&u, &v, &delta);
        assert!((est - actual).abs() <= 1e-2 * actual.abs(), "seed {seed}: est {est} actual {actual}");
        let g = importance_gradient(&u, &v);
        assert!(g.iter().zip(&v).all(|(gi, vi)| gi.abs() == vi.abs()));
        cases += 1;
    }
}

#[test]
fn distribution_matches_empirical_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let kg = random_graph(&mut rng);
    let cfg = SamplerConfig { samples: 5, max_hop: 2, hop1_ratio: 0.8 };
    let k = keyphrase_with_items(&kg, &mut rng, &cfg).unwrap();
    let dist = proxy_distribution(k, &kg, &cfg).unwrap();
    let mut counts = vec![0usize; kg.n_items()];
    let reps = 40_000;
    for _ in 0..reps {
        for v in multihop_sample(k, &kg, &cfg, &mut rng).unwrap().items {
            counts[v.0] += 1;
        }
    }
    let total = (reps * cfg.samples) as f64;
    for &(ItemId(v), p) in &dist {
        let se = (p * (1.0 - p) / total).sqrt();
        assert!((counts[v] as f64 / total - p).abs() <= 4.0 * se + 1e-12);
    }
}
