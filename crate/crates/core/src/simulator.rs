//! Offline multi-round critiquing experiments.
//!
//! A simulated critiquer compares how often each keyphrase decorates the
//! current top-N list against how often it decorates the user's held-out
//! items, and negatively critiques the most over-represented ones. The
//! critiquer sees only the public ranking, never engine internals.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    rank_items, Critique, CritiqueConfig, ImportanceWeights, ProxyMode, SessionState, Variant,
};
use crate::error::{Error, Result};
use crate::kg::{InteractionSet, ItemId, KeyphraseId, KnowledgeGraph, UserId};
use crate::metrics::MetricSet;
use crate::model::EmbeddingStore;
use crate::scalar::Scalar;

/// Experiment arm; each one overrides part of the engine configuration.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Engine configuration as given.
    Ipgc,
    /// Training-positive contrast likelihood.
    IpgcT,
    /// Proxies drawn uniformly from the catalog.
    RandomSampling,
    /// `λ_Ω = 0`.
    NoRegularizer,
    /// User-keyphrase score on the keyphrase embedding itself, no proxies.
    DirectKeyphrase,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::Ipgc,
        Arm::IpgcT,
        Arm::RandomSampling,
        Arm::NoRegularizer,
        Arm::DirectKeyphrase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Ipgc => "ipgc",
            Arm::IpgcT => "ipgc-t",
            Arm::RandomSampling => "random-sampling",
            Arm::NoRegularizer => "no-regularizer",
            Arm::DirectKeyphrase => "direct-keyphrase",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }

    pub fn engine_config(self, base: &CritiqueConfig) -> CritiqueConfig {
        let mut cfg = base.clone();
        match self {
            Arm::Ipgc => {}
            Arm::IpgcT => cfg.variant = Variant::IpgcT,
            Arm::RandomSampling => cfg.proxy_mode = ProxyMode::Random,
            Arm::NoRegularizer => cfg.lambda_omega = 0.0,
            Arm::DirectKeyphrase => cfg.proxy_mode = ProxyMode::Keyphrase,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub critiques_per_round: usize,
    /// Length of the list the critiquer inspects.
    pub top_n: usize,
    /// Metric cutoff.
    pub k: usize,
    pub engine: CritiqueConfig,
    pub arm: Arm,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            critiques_per_round: 5,
            top_n: 20,
            k: 5,
            engine: CritiqueConfig::default(),
            arm: Arm::Ipgc,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.critiques_per_round == 0 {
            return Err(Error::Config("critiques per round must be at least 1".into()));
        }
        if self.top_n == 0 || self.k == 0 {
            return Err(Error::Config("top-N and K must be at least 1".into()));
        }
        self.engine.validate()
    }
}

/// Mean metrics over the evaluable users after `step` critiquing rounds.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub step: usize,
    pub users: usize,
    pub metrics: MetricSet,
}

/// Trajectory of one simulated user.
#[derive(Clone, Debug, PartialEq)]
pub struct UserTrace {
    pub user: UserId,
    /// Metrics after each round, index 0 being the base model.
    pub metrics: Vec<MetricSet>,
    pub critiques: Vec<Vec<Critique>>,
    /// Round after which the critiquer ran out of keyphrases, if it did.
    pub exhausted_at: Option<usize>,
    pub final_drift: f64,
    pub final_top1: Option<ItemId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub arm: Arm,
    pub k: usize,
    pub rounds: Vec<RoundReport>,
    pub users: Vec<UserTrace>,
}

impl ExperimentResult {
    /// `max_t (m_t - m_0) / m_0` per metric, taken over all steps including 0.
    pub fn max_improvement(&self) -> MetricSet {
        let base = self.rounds[0].metrics;
        let rel = |now: f64, then: f64| if then > 0.0 { (now - then) / then } else { 0.0 };
        let mut best = MetricSet::default();
        for r in &self.rounds {
            best.recall = best.recall.max(rel(r.metrics.recall, base.recall));
            best.ndcg = best.ndcg.max(rel(r.metrics.ndcg, base.ndcg));
            best.hr = best.hr.max(rel(r.metrics.hr, base.hr));
        }
        best
    }

    pub fn final_round(&self) -> &RoundReport {
        self.rounds.last().expect("at least the base round")
    }

    /// Long-format rows, one per (step, metric), followed by the MaxImp rows.
    pub fn records(&self, param: Option<&str>, value: Option<f64>) -> Vec<ReportRecord> {
        let mut out = Vec::with_capacity(self.rounds.len() * 3 + 3);
        let rec = |step: Option<usize>, metric: String, score: f64| ReportRecord {
            arm: self.arm.name().to_string(),
            param: param.map(str::to_string),
            value,
            step,
            metric,
            score,
        };
        for r in &self.rounds {
            for (name, score) in r.metrics.named(self.k) {
                out.push(rec(Some(r.step), name, score));
            }
        }
        for (name, score) in self.max_improvement().named(self.k) {
            out.push(rec(None, format!("maximp_{name}"), score));
        }
        out
    }
}

/// `f_pred(k) - f_target(k)` for every keyphrase, where `f(k)` is the fraction
/// of a list's items directly linked to `k`.
pub fn keyphrase_frequency_gap(
    top_n: &[ItemId],
    targets: &[ItemId],
    kg: &KnowledgeGraph,
) -> Vec<f64> {
    let mut gap = vec![0.0; kg.n_keyphrases()];
    for (list, sign) in [(top_n, 1.0), (targets, -1.0)] {
        if list.is_empty() {
            continue;
        }
        let w = sign / list.len() as f64;
        for &v in list {
            for k in kg.item_keyphrases(v) {
                gap[k.0] += w;
            }
        }
    }
    gap
}

/// Picks up to `per_round` negative critiques: keyphrases with the largest
/// frequency gap, ties by ascending id, skipping `already`. An empty target
/// or top-N list yields no critiques.
pub fn select_critiques(
    user: UserId,
    top_n: &[ItemId],
    targets: &[ItemId],
    kg: &KnowledgeGraph,
    per_round: usize,
    already: &BTreeSet<KeyphraseId>,
) -> Vec<Critique> {
    if targets.is_empty() || top_n.is_empty() {
        return Vec::new();
    }
    let gap = keyphrase_frequency_gap(top_n, targets, kg);
    let mut order: Vec<usize> = (0..gap.len())
        .filter(|&k| !already.contains(&KeyphraseId(k)))
        .collect();
    order.sort_by(|&a, &b| gap[b].partial_cmp(&gap[a]).unwrap().then(a.cmp(&b)));
    order
        .into_iter()
        .take(per_round)
        .map(|k| Critique::negative(user, KeyphraseId(k)))
        .collect()
}

fn ranked_ids<T: Scalar>(u: &[T], store: &EmbeddingStore<T>, exclude: &[ItemId], n: usize) -> Vec<ItemId> {
    rank_items(u, store, exclude, n)
        .into_iter()
        .map(|(v, _)| v)
        .collect()
}

/// Base-model metrics straight from the stored user rows (no session).
pub fn evaluate_base<T: Scalar>(
    store: &EmbeddingStore<T>,
    inter: &InteractionSet,
    k: usize,
) -> RoundReport {
    let per_user: Vec<MetricSet> = (0..inter.n_users())
        .map(UserId)
        .filter_map(|u| {
            let ranked = ranked_ids(store.user(u), store, inter.train_items(u), k);
            MetricSet::evaluate(&ranked, inter.test_items(u), k)
        })
        .collect();
    RoundReport {
        step: 0,
        users: per_user.len(),
        metrics: MetricSet::mean(&per_user),
    }
}

fn simulate_user<T: Scalar>(
    user: UserId,
    cfg: &ExperimentConfig,
    engine: &CritiqueConfig,
    store: &EmbeddingStore<T>,
    weights: &ImportanceWeights<T>,
    kg: &KnowledgeGraph,
    inter: &InteractionSet,
) -> Result<Option<UserTrace>> {
    let targets = inter.test_items(user);
    if targets.is_empty() {
        return Ok(None);
    }
    let exclude = inter.train_items(user);
    let depth = cfg.top_n.max(cfg.k);
    let mut session = SessionState::open(user, store, weights, engine, cfg.seed)?;
    let mut ranked = ranked_ids(session.posterior(), store, exclude, depth);
    let first = MetricSet::evaluate(&ranked[..cfg.k.min(ranked.len())], targets, cfg.k)
        .expect("targets are non-empty");
    let mut trace = UserTrace {
        user,
        metrics: vec![first],
        critiques: Vec::new(),
        exhausted_at: None,
        final_drift: 0.0,
        final_top1: ranked.first().copied(),
    };
    let mut critiqued = BTreeSet::new();
    for round in 1..=cfg.rounds {
        if trace.exhausted_at.is_none() {
            let top_n = &ranked[..cfg.top_n.min(ranked.len())];
            let picks = select_critiques(user, top_n, targets, kg, cfg.critiques_per_round, &critiqued);
            if picks.is_empty() {
                trace.exhausted_at = Some(round - 1);
            } else {
                critiqued.extend(picks.iter().map(|c| c.keyphrase));
                session.apply_critiques(&picks, engine, kg, store, inter)?;
                ranked = ranked_ids(session.posterior(), store, exclude, depth);
                trace.critiques.push(picks);
            }
        }
        let m = MetricSet::evaluate(&ranked[..cfg.k.min(ranked.len())], targets, cfg.k)
            .expect("targets are non-empty");
        trace.metrics.push(m);
    }
    trace.final_drift = session.drift().to_f64_lossy();
    trace.final_top1 = ranked.first().copied();
    Ok(Some(trace))
}

/// Runs the multi-round protocol for every user with held-out items.
///
/// Users run in parallel; each session draws from its own stream derived from
/// `cfg.seed` and the user id, and aggregation is ordered by user id, so the
/// result is deterministic.
pub fn run_experiment<T: Scalar>(
    cfg: &ExperimentConfig,
    store: &EmbeddingStore<T>,
    weights: &ImportanceWeights<T>,
    kg: &KnowledgeGraph,
    inter: &InteractionSet,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    if store.n_users() != inter.n_users() || store.n_items() != kg.n_items() {
        return Err(Error::Shape(
            "embedding store does not match the dataset".into(),
        ));
    }
    let engine = cfg.arm.engine_config(&cfg.engine);
    let traces: Vec<Option<UserTrace>> = (0..inter.n_users())
        .into_par_iter()
        .map(|u| simulate_user(UserId(u), cfg, &engine, store, weights, kg, inter))
        .collect::<Result<_>>()?;
    let users: Vec<UserTrace> = traces.into_iter().flatten().collect();
    let rounds = (0..=cfg.rounds)
        .map(|step| RoundReport {
            step,
            users: users.len(),
            metrics: MetricSet::mean(users.iter().map(|t| &t.metrics[step])),
        })
        .collect();
    Ok(ExperimentResult {
        arm: cfg.arm,
        k: cfg.k,
        rounds,
        users,
    })
}

/// Hyperparameter swept by [`sweep`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Proxy count `M`.
    Samples,
    /// Hop-1 ratio `r`.
    HopRatio,
    LambdaOmega,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Samples => "M",
            SweepParam::HopRatio => "r",
            SweepParam::LambdaOmega => "lambda_omega",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "M" | "m" | "samples" => Ok(SweepParam::Samples),
            "r" | "hop_ratio" => Ok(SweepParam::HopRatio),
            "lambda_omega" | "lambda" => Ok(SweepParam::LambdaOmega),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        match self {
            SweepParam::Samples => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("M must be a positive integer, got {value}")));
                }
                out.engine.sampler.samples = value as usize;
            }
            SweepParam::HopRatio => out.engine.sampler.hop1_ratio = value,
            SweepParam::LambdaOmega => out.engine.lambda_omega = value,
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub result: ExperimentResult,
}

/// One experiment per value, all sharing `cfg.seed`.
pub fn sweep<T: Scalar>(
    param: SweepParam,
    values: &[f64],
    cfg: &ExperimentConfig,
    store: &EmbeddingStore<T>,
    weights: &ImportanceWeights<T>,
    kg: &KnowledgeGraph,
    inter: &InteractionSet,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let run = param.apply(cfg, value)?;
            Ok(SweepPoint {
                value,
                result: run_experiment(&run, store, weights, kg, inter)?,
            })
        })
        .collect()
}

pub fn sweep_records(param: SweepParam, points: &[SweepPoint]) -> Vec<ReportRecord> {
    points
        .iter()
        .flat_map(|p| p.result.records(Some(param.name()), Some(p.value)))
        .collect()
}

/// One long-format report row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub arm: String,
    pub param: Option<String>,
    pub value: Option<f64>,
    /// `None` for summary rows such as MaxImp.
    pub step: Option<usize>,
    pub metric: String,
    pub score: f64,
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(records: &[ReportRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn write_csv<W: Write>(records: &[ReportRecord], w: W) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(std::io::Error::other)?;
    }
    out.flush()
}
