//! Starts the HTTP service in-process on a free port and talks to it the way
//! the steering console does: list users, fetch a history, classify a
//! preference, then ask for steered recommendations.
//!
//!     cargo run --release --example service_client

use std::sync::Arc;

use serde_json::{json, Value};

use discern::corpus::Catalog;
use discern::quantizer::{assign_semantic_ids, train_residual_kmeans};
use discern::recommenders::{train_markov, training_sequences, ModelBundle, ModelKind, DEFAULT_ALPHA, DEFAULT_ORDER};
use discern::service::{router, AppState, EmbedderClient};
use discern::synthetic::{steerable_dataset, SteerableConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = steerable_dataset(&SteerableConfig {
        n_users: 50,
        ..SteerableConfig::default()
    })?;
    let catalog = Catalog::from_records(data.records, "example")?;
    let quantizer = train_residual_kmeans(&data.items, 3, 16, 0, 25)?;
    let sids = assign_semantic_ids(&quantizer, &data.items)?;
    let markov = train_markov(&training_sequences(&catalog, &sids)?, 3, 16, DEFAULT_ORDER, DEFAULT_ALPHA)?;
    let bundle = ModelBundle {
        kind: ModelKind::Fusion,
        markov,
        lambda: 1.0,
        negative_penalty: 1.0,
        sids,
    };
    // Known preference texts double as the embedding table.
    let embedder = EmbedderClient::corpus_lookup(data.prefs.clone());
    let state = AppState::new(catalog, bundle, data.items, embedder, 30)?;

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let base = format!("http://{}", listener.local_addr()?);
    let app = router(Arc::new(state), 16, &["*".into()], None);
    tokio::spawn(async move { axum::serve(listener, app).await });

    let http = reqwest::Client::new();
    let users: Value = http.get(format!("{base}/users?limit=3")).send().await?.json().await?;
    println!("users: {}", users["users"]);
    let user = users["users"][0]["id"].as_str().unwrap().to_string();

    let history: Value = http.get(format!("{base}/users/{user}/history")).send().await?.json().await?;
    println!("{user} has {} items in view", history["items"].as_array().unwrap().len());

    let classified: Value = http
        .post(format!("{base}/preferences/classify"))
        .json(&json!({ "text": "Avoid products like item0003" }))
        .send()
        .await?
        .json()
        .await?;
    println!("classify: {classified}");

    // Slightly reworded text still resolves through the trigram fallback.
    let pref = data.prefs.ids()[0].replace("Looking for", "looking  for");
    let reply: Value = http
        .post(format!("{base}/recommend"))
        .json(&json!({ "user": user, "k": 5, "preferences": [{ "text": pref }] }))
        .send()
        .await?
        .json()
        .await?;
    for item in reply["items"].as_array().into_iter().flatten() {
        println!("  {} score {:.3} (base {:.3})", item["id"], item["score"].as_f64().unwrap(), item["base_score"].as_f64().unwrap());
    }
    if let Some(err) = reply.get("error") {
        println!("error: {err}");
    }
    Ok(())
}
