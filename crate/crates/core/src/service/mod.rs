//! Read-only HTTP facade for interactive steering: user histories, live
//! preference-conditioned recommendation and preference classification.

mod config;
mod embedder;

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query as UrlQuery, Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::corpus::{truncate_history, Catalog, Sentiment, DEFAULT_MAX_HISTORY};
use crate::embedding::{load_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::preference::{classify_preference_sentiment, invert_negative_preference, InversionStyle};
use crate::quantizer::SidMap;
use crate::recommenders::{FusionModel, FusionRecommender, ModelBundle, PreferenceInput, Query, Recommender};

pub use config::{EmbedderMode, ServiceConfig, ENV_PREFIX};
pub use embedder::{trigram_similarity, trigrams, EmbedError, EmbedderClient, TRIGRAM_THRESHOLD};

const MAX_PAGE: usize = 500;

/// Everything a request may read. Nothing here is mutated after startup.
pub struct AppState {
    pub catalog: Catalog,
    pub recommender: FusionRecommender,
    pub embedder: EmbedderClient,
    pub beam_width: usize,
    pub max_history: usize,
}

impl AppState {
    /// Checks that the artifacts agree: every catalog item has a semantic ID and
    /// every semantic ID has an item embedding.
    pub fn new(catalog: Catalog, bundle: ModelBundle, items: EmbeddingMatrix, embedder: EmbedderClient, beam_width: usize) -> Result<Self> {
        if let Some(missing) = catalog.items.iter().find(|i| bundle.sids.get(i).is_none()) {
            return Err(Error::DigestMismatch(format!("catalog item `{missing}` has no semantic ID in the model")));
        }
        for item in bundle.sids.items() {
            items.require("item", item)?;
        }
        if embedder.mode() != EmbedderMode::None && embedder.dim() != items.dim() {
            return Err(Error::DimensionMismatch {
                id: "preference embedder".into(),
                expected: items.dim(),
                found: embedder.dim(),
            });
        }
        let model = FusionModel::new(bundle.markov, bundle.lambda, bundle.negative_penalty)?;
        Ok(Self {
            catalog,
            recommender: FusionRecommender::new("fusion", model, bundle.sids, items)?,
            embedder,
            beam_width,
            max_history: DEFAULT_MAX_HISTORY,
        })
    }

    pub fn load(cfg: &ServiceConfig) -> Result<Self> {
        let catalog = Catalog::load(&cfg.catalog)?;
        let bundle = ModelBundle::load(&cfg.model)?;
        if let Some(path) = &cfg.sid_map {
            let standalone = SidMap::load(path)?;
            if standalone.digest() != bundle.sids.digest() {
                return Err(Error::DigestMismatch(format!(
                    "{} does not match the sid map inside {}",
                    path.display(),
                    cfg.model.display()
                )));
            }
        }
        let items = load_embeddings(&cfg.item_embeddings)?;
        let embedder = match cfg.embedder {
            EmbedderMode::None => EmbedderClient::none(items.dim()),
            EmbedderMode::CorpusLookup => {
                let path = cfg.pref_embeddings.as_ref().expect("validated");
                EmbedderClient::corpus_lookup(load_embeddings(path)?)
            }
            EmbedderMode::External => EmbedderClient::external(
                cfg.embedder_url.clone().expect("validated"),
                items.dim(),
                Duration::from_millis(cfg.embedder_timeout_ms),
                cfg.embedder_auth_header.clone().zip(cfg.embedder_auth_value.clone()),
            )
            .map_err(|e| Error::Embedder(e.to_string()))?,
        };
        Self::new(catalog, bundle, items, embedder, cfg.beam_width)
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

#[derive(Deserialize)]
struct Page {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Serialize)]
struct UserRow<'a> {
    id: &'a str,
    interactions: usize,
}

async fn list_users(State(s): State<Arc<AppState>>, UrlQuery(page): UrlQuery<Page>) -> Json<Value> {
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(50).min(MAX_PAGE);
    let users: Vec<UserRow> = s
        .catalog
        .sequences
        .iter()
        .skip(offset)
        .take(limit)
        .map(|(id, seq)| UserRow {
            id,
            interactions: seq.len(),
        })
        .collect();
    Json(json!({ "total": s.catalog.num_users(), "offset": offset, "users": users }))
}

#[derive(Serialize)]
struct HistoryItem<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    title: Option<&'a str>,
    position: usize,
}

async fn history(State(s): State<Arc<AppState>>, UrlPath(user): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let seq = s
        .catalog
        .sequence(&user)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown user `{user}`")))?;
    let kept = truncate_history(&seq.items, s.max_history);
    let start = seq.len() - kept.len();
    let items: Vec<HistoryItem> = kept
        .iter()
        .enumerate()
        .map(|(i, id)| HistoryItem {
            id,
            title: s.catalog.titles.get(id).map(String::as_str),
            position: start + i,
        })
        .collect();
    Ok(Json(json!({ "user": user, "items": items, "truncated": start > 0 })))
}

#[derive(Deserialize)]
struct RecommendRequest {
    user: String,
    #[serde(default)]
    preferences: Vec<PreferenceDraft>,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    10
}

#[derive(Deserialize)]
struct PreferenceDraft {
    text: String,
    sentiment: Option<Sentiment>,
}

#[derive(Serialize)]
struct AppliedPreference {
    text: String,
    sentiment: Sentiment,
    /// `request` when the caller set the sentiment, `prefix_rule` when it was classified.
    source: &'static str,
}

#[derive(Serialize)]
struct RankedItem {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    title: Option<String>,
    score: f64,
    base_score: f64,
    similarities: Vec<f64>,
}

async fn recommend(State(s): State<Arc<AppState>>, Json(req): Json<RecommendRequest>) -> Result<Json<Value>, ApiError> {
    if req.k == 0 || req.k > s.beam_width {
        return Err(bad_request(format!("k must lie in 1..={}, got {}", s.beam_width, req.k)));
    }
    let seq = s
        .catalog
        .sequence(&req.user)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown user `{}`", req.user)))?;
    if req.preferences.iter().any(|p| p.text.trim().is_empty()) {
        return Err(bad_request("preference text must be non-empty"));
    }
    let applied: Vec<AppliedPreference> = req
        .preferences
        .iter()
        .map(|p| AppliedPreference {
            text: p.text.clone(),
            sentiment: p.sentiment.unwrap_or_else(|| classify_preference_sentiment(&p.text)),
            source: if p.sentiment.is_some() { "request" } else { "prefix_rule" },
        })
        .collect();
    let texts: Vec<String> = applied.iter().map(|p| p.text.clone()).collect();
    let vectors = s.embedder.embed_texts(&texts).await.map_err(|e| {
        let status = if e.is_client_error() {
            StatusCode::UNPROCESSABLE_ENTITY
        } else {
            StatusCode::BAD_GATEWAY
        };
        ApiError(status, e.to_string())
    })?;
    let query = Query {
        history: truncate_history(&seq.items, s.max_history).to_vec(),
        preferences: applied
            .iter()
            .zip(vectors)
            .map(|(p, embedding)| PreferenceInput {
                text: p.text.clone(),
                sentiment: p.sentiment,
                embedding,
            })
            .collect(),
    };
    let state = s.clone();
    let k = req.k;
    let ranked = tokio::task::spawn_blocking(move || state.recommender.recommend(&query, k, state.beam_width))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let items: Vec<RankedItem> = ranked
        .into_iter()
        .map(|r| RankedItem {
            title: s.catalog.titles.get(&r.item).cloned(),
            id: r.item,
            score: r.score,
            base_score: r.base_score,
            similarities: r.similarities,
        })
        .collect();
    Ok(Json(json!({ "user": req.user, "k": k, "preferences": applied, "items": items })))
}

#[derive(Deserialize)]
struct ClassifyRequest {
    text: String,
}

async fn classify(Json(req): Json<ClassifyRequest>) -> Result<Json<Value>, ApiError> {
    if req.text.trim().is_empty() {
        return Err(bad_request("text must be non-empty"));
    }
    let sentiment = classify_preference_sentiment(&req.text);
    Ok(Json(match sentiment {
        Sentiment::Negative => json!({
            "sentiment": sentiment,
            "inverted_text": invert_negative_preference(&req.text, InversionStyle::Find)?,
        }),
        Sentiment::Positive => json!({ "sentiment": sentiment }),
    }))
}

async fn spec() -> Json<Value> {
    Json(openapi())
}

/// OpenAPI 3 description of every endpoint, served at `/spec`.
pub fn openapi() -> Value {
    let error = json!({ "$ref": "#/components/schemas/Error" });
    let sentiment = json!({ "type": "string", "enum": ["positive", "negative"] });
    json!({
        "openapi": "3.0.3",
        "info": { "title": "discern steering service", "version": env!("CARGO_PKG_VERSION") },
        "paths": {
            "/users": { "get": {
                "summary": "Page through users",
                "parameters": [
                    { "name": "offset", "in": "query", "schema": { "type": "integer", "minimum": 0 } },
                    { "name": "limit", "in": "query", "schema": { "type": "integer", "minimum": 0, "maximum": MAX_PAGE } }
                ],
                "responses": { "200": { "description": "Users in id order", "content": { "application/json": { "schema": {
                    "type": "object",
                    "properties": {
                        "total": { "type": "integer" },
                        "offset": { "type": "integer" },
                        "users": { "type": "array", "items": { "type": "object", "properties": {
                            "id": { "type": "string" }, "interactions": { "type": "integer" } } } }
                    }
                } } } } }
            } },
            "/users/{id}/history": { "get": {
                "summary": "Most recent interactions, capped at 20",
                "parameters": [{ "name": "id", "in": "path", "required": true, "schema": { "type": "string" } }],
                "responses": {
                    "200": { "description": "History, oldest first", "content": { "application/json": { "schema": {
                        "type": "object",
                        "properties": {
                            "user": { "type": "string" },
                            "items": { "type": "array", "items": { "type": "object", "properties": {
                                "id": { "type": "string" }, "title": { "type": "string" }, "position": { "type": "integer" } } } },
                            "truncated": { "type": "boolean" }
                        }
                    } } } },
                    "404": { "description": "Unknown user", "content": { "application/json": { "schema": error } } }
                }
            } },
            "/recommend": { "post": {
                "summary": "Top-k items for a user steered by free-text preferences",
                "requestBody": { "required": true, "content": { "application/json": { "schema": {
                    "type": "object",
                    "required": ["user"],
                    "properties": {
                        "user": { "type": "string" },
                        "k": { "type": "integer", "minimum": 1, "default": 10 },
                        "preferences": { "type": "array", "items": { "type": "object", "required": ["text"], "properties": {
                            "text": { "type": "string" }, "sentiment": sentiment } } }
                    }
                } } } },
                "responses": {
                    "200": { "description": "Ranked items, best first", "content": { "application/json": { "schema": {
                        "type": "object",
                        "properties": {
                            "user": { "type": "string" },
                            "k": { "type": "integer" },
                            "preferences": { "type": "array", "items": { "type": "object", "properties": {
                                "text": { "type": "string" }, "sentiment": sentiment,
                                "source": { "type": "string", "enum": ["request", "prefix_rule"] } } } },
                            "items": { "type": "array", "items": { "type": "object", "properties": {
                                "id": { "type": "string" }, "title": { "type": "string" },
                                "score": { "type": "number" }, "base_score": { "type": "number" },
                                "similarities": { "type": "array", "items": { "type": "number" } } } } }
                        }
                    } } } },
                    "400": { "description": "Bad k or empty preference text", "content": { "application/json": { "schema": error } } },
                    "404": { "description": "Unknown user", "content": { "application/json": { "schema": error } } },
                    "422": { "description": "A preference could not be embedded", "content": { "application/json": { "schema": error } } },
                    "429": { "description": "Too many requests in flight" },
                    "502": { "description": "External embedder failed", "content": { "application/json": { "schema": error } } }
                }
            } },
            "/preferences/classify": { "post": {
                "summary": "Prefix-rule sentiment and, for negative preferences, the inverted text",
                "requestBody": { "required": true, "content": { "application/json": { "schema": {
                    "type": "object", "required": ["text"], "properties": { "text": { "type": "string" } } } } } },
                "responses": {
                    "200": { "description": "Classification", "content": { "application/json": { "schema": {
                        "type": "object",
                        "properties": { "sentiment": sentiment, "inverted_text": { "type": "string" } }
                    } } } },
                    "400": { "description": "Empty text", "content": { "application/json": { "schema": error } } }
                }
            } },
            "/spec": { "get": { "summary": "This document", "responses": { "200": { "description": "OpenAPI document" } } } }
        },
        "components": { "schemas": { "Error": {
            "type": "object", "properties": { "error": { "type": "string" } }
        } } }
    })
}

async fn cap(State(permits): State<Arc<Semaphore>>, req: Request, next: Next) -> Response {
    match permits.try_acquire() {
        Ok(_held) => next.run(req).await,
        Err(_) => ApiError(StatusCode::TOO_MANY_REQUESTS, "request cap reached".into()).into_response(),
    }
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.iter().any(|o| o == "*") {
        layer.allow_origin(Any)
    } else {
        layer.allow_origin(AllowOrigin::list(
            origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()),
        ))
    }
}

/// All routes with CORS and the in-flight request cap applied.
pub fn router(state: Arc<AppState>, request_cap: usize, cors_origins: &[String], console_dir: Option<&std::path::Path>) -> Router {
    let mut app = Router::new()
        .route("/users", get(list_users))
        .route("/users/{id}/history", get(history))
        .route("/recommend", post(recommend))
        .route("/preferences/classify", post(classify))
        .route("/spec", get(spec))
        .with_state(state);
    if let Some(dir) = console_dir {
        app = app.nest_service("/console", ServeDir::new(dir));
    }
    app.layer(middleware::from_fn_with_state(Arc::new(Semaphore::new(request_cap)), cap))
        .layer(cors(cors_origins))
}

/// Loads the artifacts named in `cfg` and serves until the process is stopped.
pub async fn serve(cfg: ServiceConfig) -> Result<()> {
    let state = Arc::new(AppState::load(&cfg)?);
    let app = router(state, cfg.request_cap, &cfg.cors_origins, cfg.console_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
