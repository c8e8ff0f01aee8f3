//! Monte Carlo draws of proxy items standing in for a critiqued keyphrase.
//!
//! `p(v | k)` is a two-level mixture: pick hop 1 with weight `r` (hop 2 with
//! `1 - r`), then an item uniformly inside that hop set. A draw of `M` proxies
//! takes exactly `round(r * M)` items from hop 1 and the rest from hop 2, with
//! replacement, so the sample mean of any per-item quantity is an unbiased
//! estimate of its expectation under [`proxy_distribution`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{ItemId, KeyphraseId, KnowledgeGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of proxies `M` drawn per keyphrase.
    pub samples: usize,
    /// Deepest hop considered. Only hops 1 and 2 carry quota.
    pub max_hop: usize,
    /// Fraction `r` of the draws taken from hop 1.
    pub hop1_ratio: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            samples: 5,
            max_hop: 2,
            hop1_ratio: 0.8,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("sample count M must be at least 1".into()));
        }
        if self.max_hop == 0 {
            return Err(Error::Config("max hop must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.hop1_ratio) {
            return Err(Error::Config(format!(
                "hop-1 ratio {} not in [0, 1]",
                self.hop1_ratio
            )));
        }
        Ok(())
    }

    /// `(hop-1 quota, hop-2 quota)` before any spillover.
    pub fn quotas(&self) -> (usize, usize) {
        let first = ((self.hop1_ratio * self.samples as f64).round() as usize).min(self.samples);
        (first, self.samples - first)
    }
}

/// Where a proxy came from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProxyOrigin {
    Hop(usize),
    /// Uniform over the catalog, ignoring the graph.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxySet {
    pub keyphrase: Option<KeyphraseId>,
    pub items: Vec<ItemId>,
    pub origins: Vec<ProxyOrigin>,
}

impl ProxySet {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn count_from_hop(&self, hop: usize) -> usize {
        self.origins
            .iter()
            .filter(|o| **o == ProxyOrigin::Hop(hop))
            .count()
    }
}

fn hop_sets<'a>(kg: &'a KnowledgeGraph, k: KeyphraseId, cfg: &SamplerConfig) -> Result<(&'a [ItemId], &'a [ItemId])> {
    let first = kg.multihop_items(k, 1)?;
    let second = if cfg.max_hop >= 2 && kg.max_hop() >= 2 {
        kg.multihop_items(k, 2)?
    } else {
        &[]
    };
    Ok((first, second))
}

/// Quotas after spilling an empty hop's share onto the other one.
fn effective_quotas(cfg: &SamplerConfig, first: &[ItemId], second: &[ItemId]) -> (usize, usize) {
    let (q1, q2) = cfg.quotas();
    match (first.is_empty(), second.is_empty()) {
        (true, true) => (0, 0),
        (true, false) => (0, q1 + q2),
        (false, true) => (q1 + q2, 0),
        (false, false) => (q1, q2),
    }
}

/// Draws `M` proxies for keyphrase `k`: hop-1 draws first, then hop-2 draws.
pub fn multihop_sample<R: Rng + ?Sized>(
    k: KeyphraseId,
    kg: &KnowledgeGraph,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ProxySet> {
    cfg.validate()?;
    let (first, second) = hop_sets(kg, k, cfg)?;
    let (q1, q2) = effective_quotas(cfg, first, second);
    let mut items = Vec::with_capacity(q1 + q2);
    let mut origins = Vec::with_capacity(q1 + q2);
    for (set, quota, hop) in [(first, q1, 1), (second, q2, 2)] {
        for _ in 0..quota {
            items.push(set[rng.gen_range(0..set.len())]);
            origins.push(ProxyOrigin::Hop(hop));
        }
    }
    Ok(ProxySet {
        keyphrase: Some(k),
        items,
        origins,
    })
}

/// `M` uniform draws over the whole catalog.
pub fn random_sample<R: Rng + ?Sized>(samples: usize, item_count: usize, rng: &mut R) -> Result<ProxySet> {
    if item_count == 0 {
        return Err(Error::Config("random sampling needs at least one item".into()));
    }
    let items: Vec<ItemId> = (0..samples)
        .map(|_| ItemId(rng.gen_range(0..item_count)))
        .collect();
    Ok(ProxySet {
        keyphrase: None,
        origins: vec![ProxyOrigin::Uniform; items.len()],
        items,
    })
}

/// Exact `p(v | k)` targeted by [`multihop_sample`], as `(item, probability)`
/// pairs sorted by item. Hop weights are the realised quota fractions, so this
/// is the expectation of the M-sample mean even when `r * M` is fractional.
pub fn proxy_distribution(
    k: KeyphraseId,
    kg: &KnowledgeGraph,
    cfg: &SamplerConfig,
) -> Result<Vec<(ItemId, f64)>> {
    cfg.validate()?;
    let (first, second) = hop_sets(kg, k, cfg)?;
    let (q1, q2) = effective_quotas(cfg, first, second);
    let total = (q1 + q2) as f64;
    let mut out = Vec::with_capacity(first.len() + second.len());
    for (set, quota) in [(first, q1), (second, q2)] {
        if quota == 0 {
            continue;
        }
        let p = quota as f64 / total / set.len() as f64;
        out.extend(set.iter().map(|&v| (v, p)));
    }
    out.sort_by_key(|(v, _)| *v);
    Ok(out)
}
