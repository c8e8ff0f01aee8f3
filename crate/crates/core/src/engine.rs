//! Inference-time refinement of a single user embedding from keyphrase critiques.
//!
//! The objective minimised after each batch of critiques covers every critique
//! of the session so far:
//!
//! ```text
//! L(u) = Σ_critiques ℓ_c(u) + λ_Ω Σ_i Ω_u[i] (u_i - u_prior_i)²
//! ```
//!
//! where `ℓ_c` is the proxy likelihood term of the configured [`Variant`].
//! Item, keyphrase and relation embeddings are read-only here; only the
//! session's copy of the user row moves.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{InteractionSet, ItemId, KeyphraseId, KnowledgeGraph, UserId};
use crate::model::{
    read_f32_payload, read_header, write_f32_payload, EmbeddingStore, Matrix, IMPORTANCE_MAGIC,
};
use crate::sampler::{multihop_sample, random_sample, SamplerConfig};
use crate::scalar::{dot, log_sigmoid, sigmoid, sign0, sq_dist, Scalar};

/// Critique polarity `η`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn eta(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    pub fn from_eta(eta: i64) -> Result<Self> {
        match eta {
            1 => Ok(Polarity::Positive),
            -1 => Ok(Polarity::Negative),
            other => Err(Error::Validation(format!("eta must be +1 or -1, got {other}"))),
        }
    }

    fn sign<T: Scalar>(self) -> T {
        T::lit(f64::from(self.eta()))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Critique {
    pub user: UserId,
    pub keyphrase: KeyphraseId,
    pub polarity: Polarity,
}

impl Critique {
    pub fn negative(user: UserId, keyphrase: KeyphraseId) -> Self {
        Self {
            user,
            keyphrase,
            polarity: Polarity::Negative,
        }
    }
}

/// Likelihood form used for each critique.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Margin term on the proxies alone.
    Ipgc,
    /// Contrast of each proxy against a training positive; negative critiques only.
    IpgcT,
}

/// Where a critique's stand-in items come from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProxyMode {
    /// Multi-hop KG sampling.
    Graph,
    /// Uniform items, ignoring the KG.
    Random,
    /// No proxies: the keyphrase's own embedding is scored directly.
    Keyphrase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritiqueConfig {
    pub learning_rate: f64,
    pub lambda_omega: f64,
    /// Margin constant `h`.
    pub margin: f64,
    pub steps_per_critique: usize,
    pub sampler: SamplerConfig,
    pub variant: Variant,
    pub proxy_mode: ProxyMode,
}

impl Default for CritiqueConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            lambda_omega: 1e-3,
            margin: 1.0,
            steps_per_critique: 5,
            sampler: SamplerConfig::default(),
            variant: Variant::Ipgc,
            proxy_mode: ProxyMode::Graph,
        }
    }
}

impl CritiqueConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("critique learning rate must be positive".into()));
        }
        if !(self.lambda_omega >= 0.0) {
            return Err(Error::Config("lambda_omega must be non-negative".into()));
        }
        if !self.margin.is_finite() {
            return Err(Error::Config("margin must be finite".into()));
        }
        self.sampler.validate()
    }
}

/// Per-user, per-dimension sensitivity of predicted scores to the user embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceWeights<T> {
    pub omega: Matrix<T>,
}

impl<T: Scalar> ImportanceWeights<T> {
    pub fn user(&self, u: UserId) -> &[T] {
        self.omega.row(u.0)
    }

    pub fn n_users(&self) -> usize {
        self.omega.rows()
    }

    pub fn dim(&self) -> usize {
        self.omega.cols()
    }
}

/// `∂|uᵀv| / ∂u = sign(uᵀv) · v`, with `sign(0) = 0`.
pub fn importance_gradient<T: Scalar>(u: &[T], v: &[T]) -> Vec<T> {
    let s = sign0(dot(u, v));
    v.iter().map(|&x| s * x).collect()
}

/// `Ω_u[i] = (1/N_u) Σ_{v ∈ train(u)} |∂|uᵀv| / ∂u_i|`.
pub fn importance_weights<T: Scalar>(
    store: &EmbeddingStore<T>,
    inter: &InteractionSet,
) -> ImportanceWeights<T> {
    let d = store.dim();
    let mut omega = Matrix::zeros(store.n_users(), d);
    for u in 0..store.n_users().min(inter.n_users()) {
        let user = UserId(u);
        let items = inter.train_items(user);
        if items.is_empty() {
            continue;
        }
        let uvec = store.user(user);
        let row = omega.row_mut(u);
        for &v in items {
            for (acc, g) in row.iter_mut().zip(importance_gradient(uvec, store.item(v))) {
                *acc = *acc + g.abs();
            }
        }
        let n = T::lit(items.len() as f64);
        for x in row.iter_mut() {
            *x = *x / n;
        }
    }
    ImportanceWeights { omega }
}

/// First-order prediction of `|(u + δ)ᵀv| - |uᵀv|`.
pub fn perturbation_estimate<T: Scalar>(u: &[T], v: &[T], delta: &[T]) -> T {
    dot(&importance_gradient(u, v), delta)
}

/// `Σ_i Ω_i (u_prior_i - u_post_i)²`.
pub fn prior_penalty<T: Scalar>(u_post: &[T], u_prior: &[T], omega: &[T]) -> T {
    u_post
        .iter()
        .zip(u_prior)
        .zip(omega)
        .map(|((&a, &b), &w)| w * (a - b) * (a - b))
        .sum()
}

pub fn prior_penalty_grad<T: Scalar>(u_post: &[T], u_prior: &[T], omega: &[T]) -> Vec<T> {
    let two = T::lit(2.0);
    u_post
        .iter()
        .zip(u_prior)
        .zip(omega)
        .map(|((&a, &b), &w)| two * w * (a - b))
        .collect()
}

/// Proxy likelihood loss for one critique: `-(1/M) Σ_s log σ(η (uᵀv*_s - h))`.
///
/// Negative critiques push proxy scores below the margin `h`, positive ones
/// above it. Returns `None` for an empty proxy list.
pub fn critique_likelihood_loss<T: Scalar>(
    u: &[T],
    polarity: Polarity,
    proxies: &[&[T]],
    margin: T,
) -> Option<T> {
    if proxies.is_empty() {
        return None;
    }
    let eta = polarity.sign::<T>();
    let total: T = proxies
        .iter()
        .map(|v| -log_sigmoid(eta * (dot(u, v) - margin)))
        .sum();
    Some(total / T::lit(proxies.len() as f64))
}

/// Contrast loss for one negative critique: `(1/M) Σ_s -log σ(uᵀv⁺_s - uᵀv*_s)`.
/// Returns `None` for an empty pair list.
pub fn critique_likelihood_loss_t<T: Scalar>(u: &[T], pairs: &[(&[T], &[T])]) -> Option<T> {
    if pairs.is_empty() {
        return None;
    }
    let total: T = pairs
        .iter()
        .map(|(pos, proxy)| -log_sigmoid(dot(u, pos) - dot(u, proxy)))
        .sum();
    Some(total / T::lit(pairs.len() as f64))
}

/// One sampled likelihood term of the objective.
#[derive(Clone, Debug, PartialEq)]
pub enum Term {
    Margin {
        polarity: Polarity,
        proxies: Vec<ItemId>,
    },
    Keyphrase {
        polarity: Polarity,
        keyphrase: KeyphraseId,
    },
    /// `(positive, proxy)` pairs.
    Contrast { pairs: Vec<(ItemId, ItemId)> },
}

/// Full refinement objective for one optimiser step.
pub struct Objective<'a, T> {
    pub store: &'a EmbeddingStore<T>,
    pub terms: &'a [Term],
    pub margin: T,
    pub lambda_omega: T,
    pub omega: &'a [T],
    pub prior: &'a [T],
}

impl<T: Scalar> Objective<'_, T> {
    pub fn loss(&self, u: &[T]) -> T {
        self.loss_and_grad(u).0
    }

    pub fn loss_and_grad(&self, u: &[T]) -> (T, Vec<T>) {
        let d = u.len();
        let mut grad = vec![T::zero(); d];
        let mut loss = T::zero();
        let accumulate = |v: &[T], coeff: T, grad: &mut Vec<T>| {
            for (g, &x) in grad.iter_mut().zip(v) {
                *g = *g + coeff * x;
            }
        };
        for term in self.terms {
            match term {
                Term::Margin { polarity, proxies } => {
                    if proxies.is_empty() {
                        continue;
                    }
                    let eta = polarity.sign::<T>();
                    let inv_m = T::one() / T::lit(proxies.len() as f64);
                    for &p in proxies {
                        let v = self.store.item(p);
                        let x = eta * (dot(u, v) - self.margin);
                        loss = loss - inv_m * log_sigmoid(x);
                        accumulate(v, -inv_m * sigmoid(-x) * eta, &mut grad);
                    }
                }
                Term::Keyphrase {
                    polarity,
                    keyphrase,
                } => {
                    let eta = polarity.sign::<T>();
                    let k = self.store.keyphrase(*keyphrase);
                    let x = eta * (dot(u, k) - self.margin);
                    loss = loss - log_sigmoid(x);
                    accumulate(k, -sigmoid(-x) * eta, &mut grad);
                }
                Term::Contrast { pairs } => {
                    if pairs.is_empty() {
                        continue;
                    }
                    let inv_m = T::one() / T::lit(pairs.len() as f64);
                    for &(pos, proxy) in pairs {
                        let (vp, vs) = (self.store.item(pos), self.store.item(proxy));
                        let x = dot(u, vp) - dot(u, vs);
                        loss = loss - inv_m * log_sigmoid(x);
                        let c = -inv_m * sigmoid(-x);
                        accumulate(vp, c, &mut grad);
                        accumulate(vs, -c, &mut grad);
                    }
                }
            }
        }
        if self.lambda_omega > T::zero() {
            loss = loss + self.lambda_omega * prior_penalty(u, self.prior, self.omega);
            let pg = prior_penalty_grad(u, self.prior, self.omega);
            accumulate(&pg, self.lambda_omega, &mut grad);
        }
        (loss, grad)
    }
}

/// Adam with bias correction, one moment pair per embedding dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(dim: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: vec![T::zero(); dim],
            v: vec![T::zero(); dim],
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step as i32);
        let bc2 = T::one() - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|x| *x = T::zero());
        self.v.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }
}

/// Outcome of one [`SessionState::apply_critiques`] call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ApplyOutcome {
    /// Keyphrases for which no proxy item exists; they contribute no gradient.
    pub empty_proxy: Vec<KeyphraseId>,
    pub steps: usize,
    /// Objective value at the last step, before its update.
    pub last_loss: Option<f64>,
}

/// One user's critiquing session. Owns a private copy of the user row.
#[derive(Clone, Debug)]
pub struct SessionState<T> {
    user: UserId,
    u_prior: Vec<T>,
    u_post: Vec<T>,
    omega: Vec<T>,
    history: Vec<Critique>,
    adam: Adam<T>,
    seed: u64,
    rng: ChaCha8Rng,
}

fn session_rng(seed: u64, user: UserId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user.0 as u64);
    rng
}

impl<T: Scalar> SessionState<T> {
    pub fn open(
        user: UserId,
        store: &EmbeddingStore<T>,
        weights: &ImportanceWeights<T>,
        cfg: &CritiqueConfig,
        seed: u64,
    ) -> Result<Self> {
        if user.0 >= store.n_users() || user.0 >= weights.n_users() {
            return Err(Error::Validation(format!("unknown user {user}")));
        }
        if weights.dim() != store.dim() {
            return Err(Error::Dimension {
                expected: store.dim(),
                got: weights.dim(),
            });
        }
        cfg.validate()?;
        let prior = store.user(user).to_vec();
        Ok(Self {
            user,
            u_post: prior.clone(),
            u_prior: prior,
            omega: weights.user(user).to_vec(),
            history: Vec::new(),
            adam: Adam::new(store.dim(), T::lit(cfg.learning_rate)),
            seed,
            rng: session_rng(seed, user),
        })
    }

    pub fn user(&self) -> UserId {
        self.user
    }

    pub fn prior(&self) -> &[T] {
        &self.u_prior
    }

    pub fn posterior(&self) -> &[T] {
        &self.u_post
    }

    pub fn omega(&self) -> &[T] {
        &self.omega
    }

    pub fn history(&self) -> &[Critique] {
        &self.history
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.adam
    }

    /// `‖u_post - u_prior‖`.
    pub fn drift(&self) -> T {
        sq_dist(&self.u_post, &self.u_prior).sqrt()
    }

    /// Restores the prior, clears moments, history and the sampling stream.
    pub fn reset(&mut self) {
        self.u_post.copy_from_slice(&self.u_prior);
        self.adam.reset();
        self.history.clear();
        self.rng = session_rng(self.seed, self.user);
    }

    fn check(&self, critiques: &[Critique], cfg: &CritiqueConfig, store: &EmbeddingStore<T>) -> Result<()> {
        cfg.validate()?;
        for c in critiques {
            if c.user != self.user {
                return Err(Error::Validation(format!(
                    "critique for user {} applied to session of user {}",
                    c.user, self.user
                )));
            }
            if c.keyphrase.0 >= store.n_keyphrases() {
                return Err(Error::Validation(format!(
                    "keyphrase {} out of range",
                    c.keyphrase
                )));
            }
            if cfg.variant == Variant::IpgcT && c.polarity == Polarity::Positive {
                return Err(Error::Variant(
                    "the training-contrast likelihood only accepts negative critiques".into(),
                ));
            }
        }
        Ok(())
    }

    /// Samples the likelihood terms for one optimiser step.
    fn sample_terms(
        &mut self,
        critiques: &[Critique],
        cfg: &CritiqueConfig,
        kg: &KnowledgeGraph,
        inter: &InteractionSet,
        empty: &mut Vec<KeyphraseId>,
    ) -> Result<Vec<Term>> {
        let mut terms = Vec::with_capacity(critiques.len());
        for c in critiques {
            let proxies = match cfg.proxy_mode {
                ProxyMode::Keyphrase => {
                    terms.push(Term::Keyphrase {
                        polarity: c.polarity,
                        keyphrase: c.keyphrase,
                    });
                    continue;
                }
                ProxyMode::Graph => multihop_sample(c.keyphrase, kg, &cfg.sampler, &mut self.rng)?,
                ProxyMode::Random => {
                    random_sample(cfg.sampler.samples, kg.n_items(), &mut self.rng)?
                }
            };
            if proxies.is_empty() {
                if !empty.contains(&c.keyphrase) {
                    empty.push(c.keyphrase);
                }
                continue;
            }
            let positives = if self.user.0 < inter.n_users() {
                inter.train_items(self.user)
            } else {
                &[]
            };
            if cfg.variant == Variant::IpgcT && !positives.is_empty() {
                let pairs = proxies
                    .items
                    .iter()
                    .map(|&p| (positives[self.rng.gen_range(0..positives.len())], p))
                    .collect();
                terms.push(Term::Contrast { pairs });
            } else {
                terms.push(Term::Margin {
                    polarity: c.polarity,
                    proxies: proxies.items,
                });
            }
        }
        Ok(terms)
    }

    /// Appends `critiques` to the history, then runs `steps_per_critique` Adam
    /// steps on the objective over the whole history (the posterior given every
    /// critique so far), resampling proxies at every step. With zero steps the
    /// session is left untouched.
    pub fn apply_critiques(
        &mut self,
        critiques: &[Critique],
        cfg: &CritiqueConfig,
        kg: &KnowledgeGraph,
        store: &EmbeddingStore<T>,
        inter: &InteractionSet,
    ) -> Result<ApplyOutcome> {
        self.check(critiques, cfg, store)?;
        let mut outcome = ApplyOutcome::default();
        if cfg.steps_per_critique == 0 || critiques.is_empty() {
            return Ok(outcome);
        }
        self.history.extend_from_slice(critiques);
        let active = self.history.clone();
        self.adam.lr = T::lit(cfg.learning_rate);
        for step in 0..cfg.steps_per_critique {
            let terms = self.sample_terms(&active, cfg, kg, inter, &mut outcome.empty_proxy)?;
            let objective = Objective {
                store,
                terms: &terms,
                margin: T::lit(cfg.margin),
                lambda_omega: T::lit(cfg.lambda_omega),
                omega: &self.omega,
                prior: &self.u_prior,
            };
            let (loss, grad) = objective.loss_and_grad(&self.u_post);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "critique objective for user {} at step {step}",
                    self.user
                )));
            }
            self.adam.update(&mut self.u_post, &grad);
            outcome.last_loss = Some(loss.to_f64_lossy());
            outcome.steps += 1;
        }
        if self.u_post.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "posterior embedding of user {}",
                self.user
            )));
        }
        Ok(outcome)
    }

    pub fn apply_critique(
        &mut self,
        critique: Critique,
        cfg: &CritiqueConfig,
        kg: &KnowledgeGraph,
        store: &EmbeddingStore<T>,
        inter: &InteractionSet,
    ) -> Result<ApplyOutcome> {
        self.apply_critiques(&[critique], cfg, kg, store, inter)
    }

    /// Proxy likelihood of one critique at the current posterior.
    pub fn likelihood_loss(
        &self,
        polarity: Polarity,
        proxies: &[ItemId],
        store: &EmbeddingStore<T>,
        cfg: &CritiqueConfig,
    ) -> Option<T> {
        let vs: Vec<&[T]> = proxies.iter().map(|&v| store.item(v)).collect();
        critique_likelihood_loss(&self.u_post, polarity, &vs, T::lit(cfg.margin))
    }

    pub fn rank(&self, store: &EmbeddingStore<T>, exclude: &[ItemId], k: usize) -> Vec<(ItemId, T)> {
        rank_items(&self.u_post, store, exclude, k)
    }
}

/// Top-`k` items by `uᵀv`, descending, ties by ascending item id.
/// `exclude` must be sorted ascending.
pub fn rank_items<T: Scalar>(
    u: &[T],
    store: &EmbeddingStore<T>,
    exclude: &[ItemId],
    k: usize,
) -> Vec<(ItemId, T)> {
    debug_assert!(exclude.windows(2).all(|w| w[0] <= w[1]));
    let mut scored: Vec<(ItemId, T)> = (0..store.n_items())
        .map(ItemId)
        .filter(|v| exclude.binary_search(v).is_err())
        .map(|v| (v, dot(u, store.item(v))))
        .collect();
    let cmp = |a: &(ItemId, T), b: &(ItemId, T)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored
}

/// `log Σ_v p(v|k) σ(h - uᵀv)`: exact log proxy evidence of a critique.
pub fn log_proxy_evidence<T: Scalar>(
    u: &[T],
    store: &EmbeddingStore<T>,
    dist: &[(ItemId, f64)],
    margin: T,
) -> T {
    dist.iter()
        .map(|&(v, p)| T::lit(p) * sigmoid(margin - dot(u, store.item(v))))
        .sum::<T>()
        .ln()
}

/// `Σ_v p(v|k) log σ(h - uᵀv)`: the expectation the Monte Carlo draw estimates.
pub fn expected_log_proxy_likelihood<T: Scalar>(
    u: &[T],
    store: &EmbeddingStore<T>,
    dist: &[(ItemId, f64)],
    margin: T,
) -> T {
    dist.iter()
        .map(|&(v, p)| T::lit(p) * log_sigmoid(margin - dot(u, store.item(v))))
        .sum()
}

pub fn export_importance<T: Scalar>(w: &ImportanceWeights<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{IMPORTANCE_MAGIC} v1 {} {}", w.dim(), w.n_users()).map_err(io)?;
    write_f32_payload(&mut out, w.omega.as_slice().iter()).map_err(io)?;
    out.flush().map_err(io)
}

pub fn import_importance<T: Scalar>(path: &Path) -> Result<ImportanceWeights<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let h = read_header(&mut r, path, IMPORTANCE_MAGIC, 2)?;
    let (dim, users) = (h[0], h[1]);
    let data: Vec<T> = read_f32_payload(&mut r, path, dim * users)?;
    let omega = Matrix::from_vec(users, dim, data)?;
    if omega.as_slice().iter().any(|x| !x.is_finite() || *x < T::zero()) {
        return Err(Error::Validation(
            "importance weights must be finite and non-negative".into(),
        ));
    }
    Ok(ImportanceWeights { omega })
}
