//! Knowledge-graph critiquing engine.
//!
//! A base recommender ([`model`]) learns user, item, keyphrase and relation
//! embeddings from interactions plus a knowledge graph ([`kg`]). When a user
//! critiques a keyphrase, the [`engine`] refines only that user's embedding,
//! using items sampled near the keyphrase in the graph ([`sampler`]) as
//! proxies and an importance-weighted prior to limit drift. [`simulator`] runs
//! the offline multi-round protocol.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod engine;
pub mod error;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod scalar;
pub mod simulator;
pub mod synthetic;

pub use engine::{
    Critique, CritiqueConfig, ImportanceWeights, Polarity, ProxyMode, SessionState, Variant,
};
pub use error::{Error, Result};
pub use kg::{
    Entity, EntityId, InteractionSet, ItemId, KeyphraseId, KnowledgeGraph, RelationId, Triple,
    UserId,
};
pub use metrics::MetricSet;
pub use model::{EmbeddingStore, Matrix, TrainConfig};
pub use sampler::{ProxySet, SamplerConfig};
pub use scalar::Scalar;
pub use simulator::{Arm, ExperimentConfig, ExperimentResult, RoundReport, SweepParam};

pub type EmbeddingStoreF32 = EmbeddingStore<f32>;
pub type EmbeddingStoreF64 = EmbeddingStore<f64>;
pub type ImportanceWeightsF32 = ImportanceWeights<f32>;
pub type ImportanceWeightsF64 = ImportanceWeights<f64>;
pub type SessionStateF32 = SessionState<f32>;
pub type SessionStateF64 = SessionState<f64>;
