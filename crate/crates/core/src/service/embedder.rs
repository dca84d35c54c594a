use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::EmbedderMode;
use crate::embedding::EmbeddingMatrix;

/// Minimum trigram overlap for a corpus-lookup fallback match.
pub const TRIGRAM_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("no embedder is configured")]
    NotConfigured,
    #[error("no known preference text is close to `{0}`")]
    NoMatch(String),
    #[error("embedder returned {found} vectors of dimension {dim}, expected {expected_count} of dimension {expected}")]
    Shape {
        found: usize,
        dim: usize,
        expected_count: usize,
        expected: usize,
    },
    #[error("embedder request failed: {0}")]
    Upstream(String),
}

impl EmbedError {
    /// Caller-side problems (the text) versus failures of the embedder itself.
    pub fn is_client_error(&self) -> bool {
        matches!(self, EmbedError::NotConfigured | EmbedError::NoMatch(_))
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Character trigrams of the whitespace-normalized, lowercased text padded with one space per side.
pub fn trigrams(text: &str) -> HashSet<[char; 3]> {
    let chars: Vec<char> = format!(" {} ", normalize(text)).chars().collect();
    chars.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

/// Dice overlap of trigram sets, in [0, 1].
pub fn trigram_similarity(a: &HashSet<[char; 3]>, b: &HashSet<[char; 3]>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

struct Lookup {
    matrix: EmbeddingMatrix,
    grams: Vec<HashSet<[char; 3]>>,
}

impl Lookup {
    fn new(matrix: EmbeddingMatrix) -> Self {
        let grams = matrix.ids().iter().map(|t| trigrams(t)).collect();
        Self { matrix, grams }
    }

    /// Exact text first, else the highest trigram overlap at or above the threshold
    /// (ties go to the earlier row).
    fn find(&self, text: &str) -> Option<usize> {
        if let Some(i) = self.matrix.position(text) {
            return Some(i);
        }
        let q = trigrams(text);
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in self.grams.iter().enumerate() {
            let s = trigram_similarity(&q, g);
            if s >= TRIGRAM_THRESHOLD && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, _)| i)
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Turns free-text preferences into vectors in the item embedding space.
#[derive(Clone)]
pub struct EmbedderClient {
    mode: EmbedderMode,
    dim: usize,
    lookup: Option<Arc<Lookup>>,
    endpoint: Option<String>,
    auth: Option<(String, String)>,
    http: reqwest::Client,
}

impl EmbedderClient {
    pub fn none(dim: usize) -> Self {
        Self {
            mode: EmbedderMode::None,
            dim,
            lookup: None,
            endpoint: None,
            auth: None,
            http: reqwest::Client::new(),
        }
    }

    pub fn corpus_lookup(known: EmbeddingMatrix) -> Self {
        Self {
            mode: EmbedderMode::CorpusLookup,
            dim: known.dim(),
            lookup: Some(Arc::new(Lookup::new(known))),
            ..Self::none(0)
        }
    }

    /// `POST {endpoint}` with `{"texts": [..]}`, expecting `{"vectors": [[..], ..]}`.
    pub fn external(
        endpoint: impl Into<String>,
        dim: usize,
        timeout: Duration,
        auth: Option<(String, String)>,
    ) -> Result<Self, EmbedError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Upstream(e.to_string()))?;
        Ok(Self {
            mode: EmbedderMode::External,
            dim,
            lookup: None,
            endpoint: Some(endpoint.into()),
            auth,
            http,
        })
    }

    pub fn mode(&self) -> EmbedderMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub async fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        match self.mode {
            EmbedderMode::None => Err(EmbedError::NotConfigured),
            EmbedderMode::CorpusLookup => {
                let lookup = self.lookup.as_ref().expect("corpus_lookup has a table");
                texts
                    .iter()
                    .map(|t| {
                        lookup
                            .find(t)
                            .map(|i| lookup.matrix.row(i).to_vec())
                            .ok_or_else(|| EmbedError::NoMatch(t.clone()))
                    })
                    .collect()
            }
            EmbedderMode::External => {
                let vectors = match self.post(texts).await {
                    Err(EmbedError::Upstream(first)) => {
                        log::warn!("embedder request failed, retrying once: {first}");
                        self.post(texts).await?
                    }
                    other => other?,
                };
                let bad_dim = vectors.iter().map(Vec::len).find(|&d| d != self.dim);
                if vectors.len() != texts.len() || bad_dim.is_some() {
                    return Err(EmbedError::Shape {
                        found: vectors.len(),
                        dim: bad_dim.unwrap_or(self.dim),
                        expected_count: texts.len(),
                        expected: self.dim,
                    });
                }
                Ok(vectors)
            }
        }
    }

    async fn post(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let url = self.endpoint.as_deref().expect("external mode has an endpoint");
        let mut req = self.http.post(url).json(&EmbedRequest { texts });
        if let Some((name, value)) = &self.auth {
            req = req.header(name.as_str(), value.as_str());
        }
        let resp = req.send().await.map_err(|e| EmbedError::Upstream(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(EmbedError::Upstream(format!("status {status}")));
        }
        let body: EmbedResponse = resp.json().await.map_err(|e| EmbedError::Upstream(e.to_string()))?;
        Ok(body.vectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_texts_overlap_fully() {
        let a = trigrams("Avoid  Glitter");
        assert_eq!(trigram_similarity(&a, &trigrams("avoid glitter")), 1.0);
        assert!(trigram_similarity(&a, &trigrams("prefers matte finishes")) < 0.2);
    }
}
