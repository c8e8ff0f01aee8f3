//! Session-oriented HTTP API over the critiquing engine.
//!
//! The server holds one [`SessionState`] per session; clients only carry the
//! opaque session token. The trained store is shared read-only, so no request
//! sequence can alter the global embeddings.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | `{user}`: open a session, return the first list |
//! | GET | `/sessions/{id}` | state summary |
//! | POST | `/sessions/{id}/critiques` | `{keyphrase, eta}`: critique, return the new list |
//! | POST | `/sessions/{id}/reset` | back to the prior |
//! | GET | `/catalog/keyphrases?label=` | label lookup (needs a label sidecar) |
//!
//! Users are dense user ids; items and keyphrases are graph entity ids.

pub mod wire;

use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgcrit_core::engine::rank_items;
use kgcrit_core::scalar::dot;
use kgcrit_core::{
    Critique, CritiqueConfig, EmbeddingStoreF64, EntityId, ImportanceWeightsF64, InteractionSet,
    ItemId, KeyphraseId, KnowledgeGraph, Polarity, SessionStateF64, UserId,
};
use serde::de::DeserializeOwned;

use wire::*;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub critique: CritiqueConfig,
    /// List length returned to the client.
    pub k: usize,
    /// Explanation keyphrases per listed item.
    pub explanations: usize,
    pub idle_timeout: Duration,
    /// Seed of every session's proxy sampler.
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            critique: CritiqueConfig::default(),
            k: 5,
            explanations: 5,
            idle_timeout: Duration::from_secs(30 * 60),
            seed: 0,
        }
    }
}

/// Everything a session reads but never writes.
pub struct Model {
    pub kg: KnowledgeGraph,
    pub inter: InteractionSet,
    pub store: EmbeddingStoreF64,
    pub weights: ImportanceWeightsF64,
    labels: HashMap<KeyphraseId, String>,
}

impl Model {
    pub fn new(
        kg: KnowledgeGraph,
        inter: InteractionSet,
        store: EmbeddingStoreF64,
        weights: ImportanceWeightsF64,
    ) -> kgcrit_core::Result<Self> {
        store.check_shape(&kg, &inter)?;
        if weights.n_users() != store.n_users() || weights.dim() != store.dim() {
            return Err(kgcrit_core::Error::Shape(format!(
                "importance weights are {}x{}, store users are {}x{}",
                weights.n_users(),
                weights.dim(),
                store.n_users(),
                store.dim()
            )));
        }
        Ok(Self {
            kg,
            inter,
            store,
            weights,
            labels: HashMap::new(),
        })
    }

    /// Attaches keyphrase labels. Entries naming non-keyphrase entities are rejected.
    pub fn with_labels(mut self, labels: &[(EntityId, String)]) -> kgcrit_core::Result<Self> {
        for (e, label) in labels {
            let k = self.kg.keyphrase_of(*e)?;
            self.labels.insert(k, label.clone());
        }
        Ok(self)
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty()
    }
}

struct Session {
    state: SessionStateF64,
    created_at: u64,
    last_used: Instant,
    round: usize,
    listed: Vec<(ItemId, f64)>,
}

struct Inner {
    model: Model,
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    expired: Mutex<HashSet<String>>,
}

/// Shared handle passed to every request.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(model: Model, cfg: ServiceConfig) -> kgcrit_core::Result<Self> {
        cfg.critique.validate()?;
        if cfg.k == 0 {
            return Err(kgcrit_core::Error::Config("list length K must be at least 1".into()));
        }
        Ok(Self(Arc::new(Inner {
            model,
            cfg,
            sessions: Mutex::new(HashMap::new()),
            expired: Mutex::new(HashSet::new()),
        })))
    }

    pub fn model(&self) -> &Model {
        &self.0.model
    }

    pub fn active_sessions(&self) -> usize {
        self.0.sessions.lock().unwrap().len()
    }

    /// Drops every session idle for longer than the timeout.
    pub fn purge_idle(&self) {
        let timeout = self.0.cfg.idle_timeout;
        let mut sessions = self.0.sessions.lock().unwrap();
        let stale: Vec<String> = sessions
            .iter()
            .filter(|(_, s)| {
                // A session locked by a running request is in use, not idle.
                s.try_lock().is_ok_and(|s| s.last_used.elapsed() > timeout)
            })
            .map(|(id, _)| id.clone())
            .collect();
        let mut expired = self.0.expired.lock().unwrap();
        for id in stale {
            sessions.remove(&id);
            expired.insert(id);
        }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.purge_idle();
        if let Some(s) = self.0.sessions.lock().unwrap().get(id) {
            return Ok(s.clone());
        }
        if self.0.expired.lock().unwrap().contains(id) {
            return Err(ApiError::new(StatusCode::GONE, format!("session {id} expired")));
        }
        Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    fn listing(&self, ranked: &[(ItemId, f64)]) -> Vec<ListedItem> {
        let m = &self.0.model;
        ranked
            .iter()
            .enumerate()
            .map(|(i, &(v, score))| ListedItem {
                rank: (i + 1).to_string(),
                item: m.kg.item_entity(v).to_string(),
                score: score.to_string(),
                explanations: self.explanations(v),
            })
            .collect()
    }

    /// Rarest linked keyphrases first, ties by entity id.
    fn explanations(&self, v: ItemId) -> Vec<Explanation> {
        let m = &self.0.model;
        let mut ks: Vec<(usize, EntityId, KeyphraseId)> = m
            .kg
            .item_keyphrases(v)
            .map(|k| (m.kg.keyphrase_degree(k), m.kg.keyphrase_entity(k), k))
            .collect();
        ks.sort();
        ks.into_iter()
            .take(self.0.cfg.explanations)
            .map(|(_, e, k)| Explanation {
                keyphrase: e.to_string(),
                label: m.labels.get(&k).cloned(),
            })
            .collect()
    }

    fn rank(&self, s: &Session) -> Vec<(ItemId, f64)> {
        let m = &self.0.model;
        rank_items(
            s.state.posterior(),
            &m.store,
            m.inter.train_items(s.state.user()),
            self.0.cfg.k,
        )
    }

    fn response(&self, id: &str, s: &Session) -> SessionResponse {
        SessionResponse {
            session: id.to_string(),
            user: s.state.user().to_string(),
            created_at: s.created_at.to_string(),
            round: s.round.to_string(),
            items: self.listing(&s.listed),
        }
    }
}

/// Router over the given state.
pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/critiques", post(post_critique))
        .route("/sessions/{id}/reset", post(reset_session))
        .route("/catalog/keyphrases", get(keyphrases))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<kgcrit_core::Error> for ApiError {
    fn from(e: kgcrit_core::Error) -> Self {
        use kgcrit_core::Error as E;
        let status = match e {
            E::Validation(_) | E::Class(_) | E::Config(_) | E::Variant(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

async fn open_session(State(app): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: OpenRequest = parse_body(&body)?;
    let raw = req.user.parse("user").map_err(ApiError::bad_request)?;
    let m = app.model();
    let user = usize::try_from(raw)
        .ok()
        .filter(|&u| u < m.store.n_users())
        .map(UserId)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown user {raw}")))?;
    let state = SessionStateF64::open(user, &m.store, &m.weights, &app.0.cfg.critique, app.0.cfg.seed)?;
    let mut session = Session {
        state,
        created_at: unix_now(),
        last_used: Instant::now(),
        round: 0,
        listed: Vec::new(),
    };
    session.listed = app.rank(&session);
    let id = uuid::Uuid::new_v4().simple().to_string();
    let body = app.response(&id, &session);
    app.purge_idle();
    app.0
        .sessions
        .lock()
        .unwrap()
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(body)))
}

async fn session_summary(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionSummary>, ApiError> {
    let handle = app.session(&id)?;
    let mut s = handle.lock().unwrap();
    let idle = s.last_used.elapsed();
    s.last_used = Instant::now();
    let kg = &app.model().kg;
    Ok(Json(SessionSummary {
        session: id,
        user: s.state.user().to_string(),
        created_at: s.created_at.to_string(),
        round: s.round.to_string(),
        critiques: s
            .state
            .history()
            .iter()
            .map(|c| CritiqueEcho {
                keyphrase: kg.keyphrase_entity(c.keyphrase).to_string(),
                eta: c.polarity.eta().to_string(),
            })
            .collect(),
        drift: s.state.drift().to_string(),
        idle_seconds: idle.as_secs_f64().to_string(),
    }))
}

async fn post_critique(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<CritiqueResponse>, ApiError> {
    let req: CritiqueRequest = parse_body(&body)?;
    let entity = req.keyphrase.parse("keyphrase").map_err(ApiError::bad_request)?;
    let eta = req.eta.parse("eta").map_err(ApiError::bad_request)?;
    let polarity = Polarity::from_eta(eta)?;
    let entity = usize::try_from(entity)
        .map(EntityId)
        .map_err(|_| ApiError::bad_request(format!("invalid keyphrase {entity}")))?;
    let keyphrase = app
        .model()
        .kg
        .keyphrase_of(entity)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let handle = app.session(&id)?;

    // The update is CPU-bound; keep it off the async workers. The session
    // mutex serialises requests for the same session.
    let worker = app.clone();
    tokio::task::spawn_blocking(move || {
        let app = worker;
        let m = app.model();
        let mut s = handle.lock().unwrap();
        s.last_used = Instant::now();
        let critique = Critique {
            user: s.state.user(),
            keyphrase,
            polarity,
        };
        let outcome = s
            .state
            .apply_critique(critique, &app.0.cfg.critique, &m.kg, &m.store, &m.inter)?;
        s.round += 1;
        let deltas = s
            .listed
            .iter()
            .map(|&(v, before)| {
                let after = dot(s.state.posterior(), m.store.item(v));
                ScoreDelta {
                    item: m.kg.item_entity(v).to_string(),
                    before: before.to_string(),
                    after: after.to_string(),
                    delta: (after - before).to_string(),
                }
            })
            .collect();
        s.listed = app.rank(&s);
        let warning = outcome.empty_proxy.contains(&keyphrase).then(|| {
            format!("keyphrase {entity} reaches no items; this critique contributed nothing")
        });
        Ok(Json(CritiqueResponse {
            session: id,
            round: s.round.to_string(),
            items: app.listing(&s.listed),
            deltas,
            warning,
            loss: outcome.last_loss.map(|l| l.to_string()),
        }))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn reset_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionResponse>, ApiError> {
    let handle = app.session(&id)?;
    let mut s = handle.lock().unwrap();
    s.last_used = Instant::now();
    s.state.reset();
    s.round = 0;
    s.listed = app.rank(&s);
    Ok(Json(app.response(&id, &s)))
}

async fn keyphrases(
    State(app): State<AppState>,
    Query(q): Query<LabelQuery>,
) -> Result<Json<Vec<KeyphraseEntry>>, ApiError> {
    let m = app.model();
    if !m.has_labels() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "no keyphrase labels loaded"));
    }
    let wanted = q.label.map(|l| l.trim().to_lowercase());
    let mut out: Vec<(KeyphraseId, &String)> = m
        .labels
        .iter()
        .filter(|(_, l)| wanted.as_ref().is_none_or(|w| l.to_lowercase() == *w))
        .map(|(&k, l)| (k, l))
        .collect();
    out.sort();
    Ok(Json(
        out.into_iter()
            .map(|(k, label)| KeyphraseEntry {
                keyphrase: m.kg.keyphrase_entity(k).to_string(),
                label: label.clone(),
                degree: m.kg.keyphrase_degree(k).to_string(),
            })
            .collect(),
    ))
}
