//! Seeded synthetic corpora for tests, examples and the acceptance suite.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::benchmark::review_key;
use crate::corpus::{InteractionRecord, Sentiment};
use crate::embedding::EmbeddingMatrix;
use crate::error::Result;
use crate::preference::{PreferenceMap, PreferenceSet, PREFERENCES_PER_SET};

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// `n_points` points around `n_clusters` standard-normal centers in `d` dimensions.
///
/// Per-coordinate noise is `sigma_ratio` times the mean distance between centers.
/// Point `i` belongs to cluster `i % n_clusters`; ids are `p00000`, `p00001`, ….
pub fn gaussian_clusters(n_clusters: usize, n_points: usize, d: usize, sigma_ratio: f64, seed: u64) -> Result<EmbeddingMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..n_clusters).map(|_| gaussian(&mut rng, d)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n_clusters {
        for j in i + 1..n_clusters {
            total += centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            pairs += 1;
        }
    }
    let sigma = sigma_ratio * if pairs == 0 { 1.0 } else { total / pairs as f64 };
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let ids = (0..n_points).map(|i| format!("p{i:05}")).collect();
    let rows = (0..n_points)
        .map(|i| to_f32(&centers[i % n_clusters].iter().map(|c| c + noise.sample(&mut rng)).collect::<Vec<_>>()))
        .collect();
    EmbeddingMatrix::new(ids, rows)
}

#[derive(Clone, Debug)]
pub struct SteerableConfig {
    pub n_topics: usize,
    pub items_per_topic: usize,
    pub n_users: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dim: usize,
    /// Probability that the next interaction stays in the current topic.
    pub stay: f64,
    /// Spread of items around their topic center (per coordinate).
    pub item_noise: f64,
    /// Spread of preference and review vectors around the item they describe.
    pub text_noise: f64,
    pub negative_review_rate: f64,
    pub seed: u64,
}

impl Default for SteerableConfig {
    fn default() -> Self {
        Self {
            n_topics: 16,
            items_per_topic: 16,
            n_users: 300,
            min_len: 6,
            max_len: 12,
            dim: 32,
            stay: 0.8,
            item_noise: 0.6,
            text_noise: 0.15,
            negative_review_rate: 0.2,
            seed: 7,
        }
    }
}

/// Interactions plus every embedding namespace and generated preference set a
/// benchmark build needs.
#[derive(Clone, Debug)]
pub struct SteerableData {
    pub records: Vec<InteractionRecord>,
    pub items: EmbeddingMatrix,
    pub prefs: EmbeddingMatrix,
    pub reviews: EmbeddingMatrix,
    pub sets: PreferenceMap,
}

fn item_id(i: usize) -> String {
    format!("item{i:04}")
}

/// Users drift between topics; each preference set's first preference describes
/// the item the user interacts with next, so preferences carry information the
/// interaction history alone does not.
pub fn steerable_dataset(cfg: &SteerableConfig) -> Result<SteerableData> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let n_items = cfg.n_topics * cfg.items_per_topic;
    let centers: Vec<Vec<f64>> = (0..cfg.n_topics).map(|_| gaussian(&mut rng, d)).collect();
    let item_vecs: Vec<Vec<f64>> = (0..n_items)
        .map(|i| {
            let c = &centers[i / cfg.items_per_topic];
            c.iter().map(|x| x + cfg.item_noise * rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .collect();
    let jitter = |rng: &mut ChaCha8Rng, v: &[f64]| -> Vec<f32> {
        to_f32(&v.iter().map(|x| x + cfg.text_noise * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
    };

    let mut records = Vec::new();
    let mut reviews = Vec::new();
    let mut prefs: Vec<(String, Vec<f32>)> = Vec::new();
    let mut sets = BTreeMap::new();
    for u in 0..cfg.n_users {
        let user = format!("user{u:04}");
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut topic = rng.random_range(0..cfg.n_topics);
        let mut seq = Vec::with_capacity(len);
        let mut negative = Vec::with_capacity(len);
        for pos in 0..len {
            if pos > 0 && rng.random::<f64>() >= cfg.stay {
                topic = rng.random_range(0..cfg.n_topics);
            }
            let item = topic * cfg.items_per_topic + rng.random_range(0..cfg.items_per_topic);
            let neg = rng.random::<f64>() < cfg.negative_review_rate;
            let mut r = InteractionRecord::new(user.clone(), item_id(item), 1_000 + pos as i64);
            r.review = Some(if neg {
                format!("Disappointed with {} ({user}, purchase {pos})", item_id(item))
            } else {
                format!("Happy with {} ({user}, purchase {pos})", item_id(item))
            });
            r.rating = Some(if neg { 1.0 } else { 5.0 });
            r.review_sentiment = Some(if neg { Sentiment::Negative } else { Sentiment::Positive });
            r.title = Some(format!("Topic {topic} product {item}"));
            records.push(r);
            reviews.push((review_key(&user, pos), jitter(&mut rng, &item_vecs[item])));
            seq.push(item);
            negative.push(neg);
        }
        for t in 1..len {
            let mut texts = Vec::with_capacity(PREFERENCES_PER_SET);
            let mut push = |text: String, v: Vec<f32>, texts: &mut Vec<String>| {
                prefs.push((text.clone(), v));
                texts.push(text);
            };
            let next = seq[t];
            push(
                format!("Looking for something like {} ({user}/{t}/0)", item_id(next)),
                jitter(&mut rng, &item_vecs[next]),
                &mut texts,
            );
            let disliked: Vec<usize> = (0..t).filter(|&p| negative[p]).collect();
            let n_random = if disliked.is_empty() { PREFERENCES_PER_SET - 1 } else { PREFERENCES_PER_SET - 2 };
            for j in 0..n_random {
                let from = seq[rng.random_range(0..t)];
                push(
                    format!("Enjoys items like {} ({user}/{t}/{})", item_id(from), j + 1),
                    jitter(&mut rng, &item_vecs[from]),
                    &mut texts,
                );
            }
            if let Some(&p) = disliked.choose(&mut rng) {
                let item = seq[p];
                push(
                    format!("Avoid products like {} ({user}/{t}/4)", item_id(item)),
                    jitter(&mut rng, &item_vecs[item]),
                    &mut texts,
                );
            }
            sets.insert(
                (user.clone(), t),
                PreferenceSet {
                    user: user.clone(),
                    t,
                    preferences: texts,
                },
            );
        }
    }
    let items = EmbeddingMatrix::new((0..n_items).map(item_id).collect(), item_vecs.iter().map(|v| to_f32(v)).collect())?;
    let (rid, rv): (Vec<_>, Vec<_>) = reviews.into_iter().unzip();
    let (pid, pv): (Vec<_>, Vec<_>) = prefs.into_iter().unzip();
    Ok(SteerableData {
        records,
        items,
        prefs: EmbeddingMatrix::new(pid, pv)?,
        reviews: EmbeddingMatrix::new(rid, rv)?,
        sets,
    })
}
