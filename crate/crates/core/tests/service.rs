use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use discern::corpus::{Catalog, InteractionRecord, Sentiment};
use discern::embedding::EmbeddingMatrix;
use discern::quantizer::{assign_semantic_ids, train_residual_kmeans};
use discern::recommenders::{
    train_markov, training_sequences, FusionModel, FusionRecommender, ModelBundle, ModelKind, PreferenceInput, Query,
    Recommender, DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_NEGATIVE_PENALTY, DEFAULT_ORDER,
};
use discern::service::{router, trigram_similarity, trigrams, AppState, EmbedError, EmbedderClient};
use discern::synthetic::{steerable_dataset, SteerableConfig};

struct Fixture {
    catalog: Catalog,
    bundle: ModelBundle,
    items: EmbeddingMatrix,
}

fn fixture() -> Fixture {
    let data = steerable_dataset(&SteerableConfig {
        n_users: 40,
        ..SteerableConfig::default()
    })
    .unwrap();
    let mut records = data.records.clone();
    // One long history so truncation is visible.
    for pos in 0..25 {
        records.push(InteractionRecord::new("long", data.items.ids()[pos * 7].clone(), pos as i64));
    }
    let catalog = Catalog::from_records(records, "fixture").unwrap();
    let q = train_residual_kmeans(&data.items, 3, 8, 1, 20).unwrap();
    let sids = assign_semantic_ids(&q, &data.items).unwrap();
    let markov = train_markov(&training_sequences(&catalog, &sids).unwrap(), 3, 8, DEFAULT_ORDER, DEFAULT_ALPHA).unwrap();
    Fixture {
        catalog,
        bundle: ModelBundle {
            kind: ModelKind::Fusion,
            markov,
            lambda: DEFAULT_LAMBDA,
            negative_penalty: DEFAULT_NEGATIVE_PENALTY,
            sids,
        },
        items: data.items,
    }
}

/// Deterministic fake text embedding: bytes folded into `dim` buckets.
fn fake_vector(text: &str, dim: usize) -> Vec<f32> {
    let mut v = vec![0.0f32; dim];
    for (i, b) in text.bytes().enumerate() {
        v[(i * 31 + b as usize) % dim] += (b as f32) / 100.0;
    }
    v
}

async fn spawn(app: Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

/// Mock embedding service answering with `dim`-wide vectors after `delay`.
async fn mock_embedder(dim: usize, delay: Duration) -> SocketAddr {
    let app = Router::new().route(
        "/embed",
        post(move |Json(body): Json<Value>| async move {
            tokio::time::sleep(delay).await;
            let vectors: Vec<Vec<f32>> = body["texts"]
                .as_array()
                .unwrap()
                .iter()
                .map(|t| fake_vector(t.as_str().unwrap(), dim))
                .collect();
            Json(json!({ "vectors": vectors }))
        }),
    );
    spawn(app).await
}

async fn start_service(fx: &Fixture, embed_dim: usize, delay: Duration, cap: usize) -> (SocketAddr, EmbedderClient) {
    let mock = mock_embedder(embed_dim, delay).await;
    let embedder =
        EmbedderClient::external(format!("http://{mock}/embed"), fx.items.dim(), Duration::from_secs(5), None).unwrap();
    let state = AppState::new(fx.catalog.clone(), fx.bundle.clone(), fx.items.clone(), embedder.clone(), 30).unwrap();
    let addr = spawn(router(Arc::new(state), cap, &["*".to_string()], None)).await;
    (addr, embedder)
}

async fn post_json(addr: SocketAddr, path: &str, body: Value) -> (u16, Value) {
    let resp = reqwest::Client::new()
        .post(format!("http://{addr}{path}"))
        .json(&body)
        .send()
        .await
        .unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap_or(Value::Null))
}

async fn get_json(addr: SocketAddr, path: &str) -> (u16, Value) {
    let resp = reqwest::get(format!("http://{addr}{path}")).await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap_or(Value::Null))
}

#[tokio::test(flavor = "multi_thread")]
async fn history_is_truncated_to_the_most_recent_twenty() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim(), Duration::ZERO, 8).await;
    let (status, body) = get_json(addr, "/users/long/history").await;
    assert_eq!(status, 200);
    let items = body["items"].as_array().unwrap();
    assert_eq!(items.len(), 20);
    assert_eq!(body["truncated"], true);
    assert_eq!(items[0]["position"], 5);
    assert_eq!(items[19]["position"], 24);
    assert_eq!(items[19]["id"], fx.catalog.sequence("long").unwrap().items[24].as_str());

    let (status, body) = get_json(addr, "/users/nobody/history").await;
    assert_eq!(status, 404);
    assert!(body["error"].as_str().unwrap().contains("nobody"));
}

#[tokio::test(flavor = "multi_thread")]
async fn user_listing_pages() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim(), Duration::ZERO, 8).await;
    let (status, body) = get_json(addr, "/users?offset=3&limit=4").await;
    assert_eq!(status, 200);
    assert_eq!(body["total"], fx.catalog.num_users());
    let expected: Vec<&String> = fx.catalog.sequences.keys().skip(3).take(4).collect();
    let got: Vec<&str> = body["users"].as_array().unwrap().iter().map(|u| u["id"].as_str().unwrap()).collect();
    assert_eq!(got, expected);
}

#[tokio::test(flavor = "multi_thread")]
async fn classify_prefix_rule() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim(), Duration::ZERO, 8).await;
    let (status, body) = post_json(addr, "/preferences/classify", json!({ "text": "  no parabens" })).await;
    assert_eq!(status, 200);
    assert_eq!(body["sentiment"], "negative");
    assert_eq!(body["inverted_text"], "Find parabens");

    let (_, body) = post_json(addr, "/preferences/classify", json!({ "text": "Avoid heavy scents" })).await;
    assert_eq!(body["inverted_text"], "Find heavy scents");

    let (_, body) = post_json(addr, "/preferences/classify", json!({ "text": "Prefers matte lipstick" })).await;
    assert_eq!(body["sentiment"], "positive");
    assert!(body.get("inverted_text").is_none());

    let (status, _) = post_json(addr, "/preferences/classify", json!({ "text": "   " })).await;
    assert_eq!(status, 400);
}

#[tokio::test(flavor = "multi_thread")]
async fn recommend_matches_library_oracle_and_is_deterministic() {
    let fx = fixture();
    let (addr, embedder) = start_service(&fx, fx.items.dim(), Duration::ZERO, 8).await;
    let user = fx.catalog.sequences.keys().next().unwrap().clone();
    let prefs = ["Prefers gentle cleansers", "Avoid strong fragrance"];
    let body = json!({
        "user": user,
        "k": 10,
        "preferences": prefs.iter().map(|t| json!({ "text": t })).collect::<Vec<_>>(),
    });
    let (status, first) = post_json(addr, "/recommend", body.clone()).await;
    assert_eq!(status, 200, "{first}");
    let (_, second) = post_json(addr, "/recommend", body).await;
    assert_eq!(first, second);

    assert_eq!(first["preferences"][0]["sentiment"], "positive");
    assert_eq!(first["preferences"][1]["sentiment"], "negative");
    assert_eq!(first["preferences"][1]["source"], "prefix_rule");

    // Same request answered by the library directly.
    let texts: Vec<String> = prefs.iter().map(|s| s.to_string()).collect();
    let vectors = embedder.embed_texts(&texts).await.unwrap();
    let seq = fx.catalog.sequence(&user).unwrap();
    let query = Query {
        history: seq.items.iter().rev().take(20).rev().cloned().collect(),
        preferences: texts
            .iter()
            .zip(vectors)
            .zip([Sentiment::Positive, Sentiment::Negative])
            .map(|((text, embedding), sentiment)| PreferenceInput {
                text: text.clone(),
                sentiment,
                embedding,
            })
            .collect(),
    };
    let model = FusionModel::new(fx.bundle.markov.clone(), fx.bundle.lambda, fx.bundle.negative_penalty).unwrap();
    let oracle = FusionRecommender::new("oracle", model, fx.bundle.sids.clone(), fx.items.clone())
        .unwrap()
        .recommend(&query, 10, 30)
        .unwrap();
    let served = first["items"].as_array().unwrap();
    assert_eq!(served.len(), oracle.len());
    for (s, o) in served.iter().zip(&oracle) {
        assert_eq!(s["id"], o.item.as_str());
        assert!((s["score"].as_f64().unwrap() - o.score).abs() < 1e-12);
        assert!((s["base_score"].as_f64().unwrap() - o.base_score).abs() < 1e-12);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn sentiment_override_flips_a_twin_request() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim(), Duration::ZERO, 8).await;
    let user = fx.catalog.sequences.keys().nth(2).unwrap().clone();
    let ask = |sentiment: &str| {
        json!({ "user": user, "k": 10, "preferences": [{ "text": "Glossy finish", "sentiment": sentiment }] })
    };
    let (_, pos) = post_json(addr, "/recommend", ask("positive")).await;
    let (_, neg) = post_json(addr, "/recommend", ask("negative")).await;
    assert_eq!(pos["preferences"][0]["source"], "request");
    // Same text, opposite sign: score = base + lambda * cos versus base - penalty * cos.
    for (body, sign) in [(&pos, DEFAULT_LAMBDA), (&neg, -DEFAULT_NEGATIVE_PENALTY)] {
        for item in body["items"].as_array().unwrap() {
            let s = item["score"].as_f64().unwrap();
            let b = item["base_score"].as_f64().unwrap();
            let c = item["similarities"][0].as_f64().unwrap();
            assert!((s - (b + sign * c)).abs() < 1e-9);
        }
    }
    let ids = |v: &Value| -> Vec<String> { v["items"].as_array().unwrap().iter().map(|i| i["id"].as_str().unwrap().to_string()).collect() };
    assert_ne!(ids(&pos), ids(&neg));
}

#[tokio::test(flavor = "multi_thread")]
async fn request_validation() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim(), Duration::ZERO, 8).await;
    let user = fx.catalog.sequences.keys().next().unwrap().clone();
    let (status, _) = post_json(addr, "/recommend", json!({ "user": user, "k": 0 })).await;
    assert_eq!(status, 400);
    let (status, _) = post_json(addr, "/recommend", json!({ "user": user, "k": 31 })).await;
    assert_eq!(status, 400);
    let (status, _) = post_json(addr, "/recommend", json!({ "user": user, "preferences": [{ "text": "" }] })).await;
    assert_eq!(status, 400);
    let (status, _) = post_json(addr, "/recommend", json!({ "user": "ghost" })).await;
    assert_eq!(status, 404);
}

#[tokio::test(flavor = "multi_thread")]
async fn wrong_embedding_width_is_a_bad_gateway() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim() + 3, Duration::ZERO, 8).await;
    let user = fx.catalog.sequences.keys().next().unwrap().clone();
    let (status, body) =
        post_json(addr, "/recommend", json!({ "user": user, "preferences": [{ "text": "Prefers blue" }] })).await;
    assert_eq!(status, 502);
    assert!(body["error"].as_str().unwrap().contains("dimension"));
}

#[tokio::test(flavor = "multi_thread")]
async fn unreachable_embedder_is_a_bad_gateway_and_none_is_unprocessable() {
    let fx = fixture();
    let dead = EmbedderClient::external("http://127.0.0.1:9/embed", fx.items.dim(), Duration::from_millis(300), None).unwrap();
    let err = dead.embed_texts(&["x".to_string()]).await.unwrap_err();
    assert!(matches!(err, EmbedError::Upstream(_)));
    assert!(!err.is_client_error());

    let state = AppState::new(fx.catalog.clone(), fx.bundle.clone(), fx.items.clone(), EmbedderClient::none(fx.items.dim()), 30).unwrap();
    let addr = spawn(router(Arc::new(state), 4, &["*".to_string()], None)).await;
    let user = fx.catalog.sequences.keys().next().unwrap().clone();
    let (status, _) = post_json(addr, "/recommend", json!({ "user": user, "preferences": [{ "text": "Prefers blue" }] })).await;
    assert_eq!(status, 422);
    // No preferences needs no embedder.
    let (status, body) = post_json(addr, "/recommend", json!({ "user": user, "k": 5 })).await;
    assert_eq!(status, 200);
    assert_eq!(body["items"].as_array().unwrap().len(), 5);
}

#[tokio::test(flavor = "multi_thread")]
async fn requests_beyond_the_cap_are_rejected() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim(), Duration::from_millis(600), 1).await;
    let user = fx.catalog.sequences.keys().next().unwrap().clone();
    let body = json!({ "user": user, "preferences": [{ "text": "Prefers blue" }] });
    let slow = tokio::spawn(post_json(addr, "/recommend", body.clone()));
    tokio::time::sleep(Duration::from_millis(150)).await;
    let (status, _) = post_json(addr, "/recommend", body).await;
    assert_eq!(status, 429);
    assert_eq!(slow.await.unwrap().0, 200);
}

#[tokio::test(flavor = "multi_thread")]
async fn spec_lists_every_route() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim(), Duration::ZERO, 8).await;
    let (status, body) = get_json(addr, "/spec").await;
    assert_eq!(status, 200);
    assert_eq!(body["openapi"], "3.0.3");
    for path in ["/users", "/users/{id}/history", "/recommend", "/preferences/classify", "/spec"] {
        assert!(body["paths"].get(path).is_some(), "missing {path}");
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn cors_headers_are_sent() {
    let fx = fixture();
    let (addr, _) = start_service(&fx, fx.items.dim(), Duration::ZERO, 8).await;
    let resp = reqwest::Client::new()
        .get(format!("http://{addr}/spec"))
        .header("Origin", "http://console.local")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}

/// Dice on padded character trigrams, computed by slicing strings.
fn dice_oracle(a: &str, b: &str) -> f64 {
    let grams = |s: &str| -> BTreeSet<String> {
        let norm = format!(" {} ", s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase());
        let chars: Vec<char> = norm.chars().collect();
        (0..chars.len().saturating_sub(2)).map(|i| chars[i..i + 3].iter().collect()).collect()
    };
    let (x, y) = (grams(a), grams(b));
    2.0 * x.intersection(&y).count() as f64 / (x.len() + y.len()) as f64
}

#[tokio::test]
async fn corpus_lookup_trigram_fixture() {
    let known = ["Prefers fragrance-free lotion", "Avoid glitter", "Looking for a wide-tooth comb"];
    let matrix = EmbeddingMatrix::new(
        known.iter().map(|s| s.to_string()).collect(),
        (0..3).map(|i| vec![i as f32, 1.0]).collect(),
    )
    .unwrap();
    let client = EmbedderClient::corpus_lookup(matrix);
    // (query, expected row or None)
    let cases: [(&str, Option<usize>); 10] = [
        ("Prefers fragrance-free lotion", Some(0)),
        ("prefers   fragrance-free LOTION", Some(0)),
        ("Prefers fragrance free lotion", Some(0)),
        ("Prefers fragrance-free lotions", Some(0)),
        ("Avoid glitter", Some(1)),
        ("avoid glitter!", Some(1)),
        ("Looking for a wide tooth comb", Some(2)),
        ("Avoid glue", None),
        ("Prefers unscented soap", None),
        ("comb", None),
    ];
    for (query, want) in cases {
        let best = known
            .iter()
            .enumerate()
            .map(|(i, k)| (i, dice_oracle(query, k)))
            .filter(|(_, s)| *s >= 0.8)
            .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
                Some((_, b)) if b >= s => acc,
                _ => Some((i, s)),
            })
            .map(|(i, _)| i);
        assert_eq!(best, want, "oracle disagrees with fixture for `{query}`");
        for k in known {
            assert!((trigram_similarity(&trigrams(query), &trigrams(k)) - dice_oracle(query, k)).abs() < 1e-12);
        }
        let got = client.embed_texts(&[query.to_string()]).await;
        match want {
            Some(i) => assert_eq!(got.unwrap(), vec![vec![i as f32, 1.0]], "{query}"),
            None => assert_eq!(got.unwrap_err(), EmbedError::NoMatch(query.to_string())),
        }
    }
}
