//! Top-K ranking metrics over binary relevance.
//!
//! `relevant` slices must be sorted ascending (as stored by
//! [`InteractionSet`](crate::kg::InteractionSet)). Every metric returns `None`
//! when there is nothing relevant, so callers can exclude that user instead of
//! scoring it as zero.

use serde::{Deserialize, Serialize};

use crate::kg::ItemId;

fn hits<'a>(ranked: &'a [ItemId], relevant: &'a [ItemId], k: usize) -> impl Iterator<Item = usize> + 'a {
    debug_assert!(relevant.windows(2).all(|w| w[0] < w[1]));
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(move |(_, v)| relevant.binary_search(v).is_ok())
        .map(|(i, _)| i)
}

pub fn recall_at_k(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    Some(hits(ranked, relevant, k).count() as f64 / relevant.len() as f64)
}

pub fn hr_at_k(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    Some(if hits(ranked, relevant, k).next().is_some() { 1.0 } else { 0.0 })
}

/// DCG with unit gains and `log2(rank + 1)` discount, normalised by the ideal
/// DCG over `min(K, |relevant|)` hits.
pub fn ndcg_at_k(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = hits(ranked, relevant, k).map(discount).sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(discount).sum();
    Some(dcg / idcg)
}

/// Recall, NDCG and hit rate at one cutoff.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub recall: f64,
    pub ndcg: f64,
    pub hr: f64,
}

impl MetricSet {
    pub fn evaluate(ranked: &[ItemId], relevant: &[ItemId], k: usize) -> Option<Self> {
        Some(Self {
            recall: recall_at_k(ranked, relevant, k)?,
            ndcg: ndcg_at_k(ranked, relevant, k)?,
            hr: hr_at_k(ranked, relevant, k)?,
        })
    }

    /// Arithmetic mean of a sequence, in iteration order. Empty input gives zeros.
    pub fn mean<'a>(sets: impl IntoIterator<Item = &'a MetricSet>) -> Self {
        let mut acc = MetricSet::default();
        let mut n = 0usize;
        for s in sets {
            acc.recall += s.recall;
            acc.ndcg += s.ndcg;
            acc.hr += s.hr;
            n += 1;
        }
        if n > 0 {
            let n = n as f64;
            acc.recall /= n;
            acc.ndcg /= n;
            acc.hr /= n;
        }
        acc
    }

    pub fn named(&self, k: usize) -> [(String, f64); 3] {
        [
            (format!("recall@{k}"), self.recall),
            (format!("ndcg@{k}"), self.ndcg),
            (format!("hr@{k}"), self.hr),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[usize]) -> Vec<ItemId> {
        xs.iter().copied().map(ItemId).collect()
    }

    #[test]
    fn perfect_single_hit() {
        let r = ids(&[3, 1, 2, 0, 4]);
        let m = MetricSet::evaluate(&r, &ids(&[3]), 5).unwrap();
        assert_eq!(m, MetricSet { recall: 1.0, ndcg: 1.0, hr: 1.0 });
    }

    #[test]
    fn second_rank_ndcg() {
        let r = ids(&[1, 3, 2, 0, 4]);
        let n = ndcg_at_k(&r, &ids(&[3]), 5).unwrap();
        assert!((n - 0.630_929_753_571_457_4).abs() < 1e-12);
    }

    #[test]
    fn no_hits_in_top_k() {
        let r = ids(&[0, 1, 2, 3, 4, 9]);
        let m = MetricSet::evaluate(&r, &ids(&[9]), 5).unwrap();
        assert_eq!(m, MetricSet::default());
    }

    #[test]
    fn empty_relevant_is_excluded() {
        assert!(MetricSet::evaluate(&ids(&[0]), &[], 5).is_none());
    }

    #[test]
    fn ideal_dcg_caps_at_k() {
        // Seven relevant items, K = 5, all top five relevant.
        let r = ids(&[0, 1, 2, 3, 4]);
        let rel = ids(&[0, 1, 2, 3, 4, 5, 6]);
        assert!((ndcg_at_k(&r, &rel, 5).unwrap() - 1.0).abs() < 1e-12);
        assert!((recall_at_k(&r, &rel, 5).unwrap() - 5.0 / 7.0).abs() < 1e-12);
    }
}
