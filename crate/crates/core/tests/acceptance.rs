//! Acceptance suite: one line per criterion, then a non-zero exit if any
//! verifiable criterion failed. Data-contingent checks report UNVERIFIED when
//! their input is absent.
//!
//!     cargo test --release --test acceptance

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use discern::benchmark::{
    build_benchmark, review_key, Axis, BenchmarkEmbeddings, BenchmarkSuite, BuildConfig, EvalInstance, MANIFEST_FILE,
    SUITE_FILE,
};
use discern::codec::file_digest;
use discern::corpus::{
    five_core_filter, ingest_interactions, leave_last_out, truncate_history, write_interactions_jsonl, Catalog, InputFormat,
    InteractionRecord, Sentiment, Split,
};
use discern::embedding::{cosine, EmbeddingMatrix};
use discern::eval::{m_at_k, ndcg_at_k, recall_at_k, relative_improvement_value, MetricReport};
use discern::preference::{
    history_entries, render_prompt, replay_line, PreferenceMap, PreferenceSet, PromptTemplate,
    RenderOptions,
};
use discern::quantizer::{codebook_coverage, quantize, train_residual_kmeans, Autoencoder, Codebook, QuantizerModel};
use discern::sid_index::{constrained_beam_search, CodeScorer, SidTrie};
use discern::synthetic::{gaussian_clusters, steerable_dataset, SteerableConfig};

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Unverified,
}

struct Outcome {
    name: &'static str,
    status: Status,
    detail: String,
}

fn outcome(name: &'static str, ok: bool, detail: String) -> Outcome {
    Outcome {
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

// ---------------------------------------------------------------- quantizer

fn brute_force_codes(codebooks: &[Vec<Vec<f32>>], x: &[f32]) -> Vec<u32> {
    let mut r: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let mut codes = Vec::new();
    for book in codebooks {
        let mut best = (0usize, f64::INFINITY);
        for (j, c) in book.iter().enumerate() {
            let d: f64 = r.iter().zip(c).map(|(a, &b)| (a - b as f64).powi(2)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        for (a, &b) in r.iter_mut().zip(&book[best.0]) {
            *a -= b as f64;
        }
        codes.push(best.0 as u32);
    }
    codes
}

fn quantizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..10 {
        let d = rng.random_range(1..=16);
        let k = rng.random_range(2..=8);
        let n = rng.random_range(1..=3);
        let books: Vec<Vec<Vec<f32>>> = (0..n)
            .map(|_| (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect())
            .collect();
        let model = QuantizerModel::from_codebooks(
            books.iter().enumerate().map(|(l, b)| Codebook::from_rows(l, b).unwrap()).collect(),
        )
        .unwrap();
        for _ in 0..200 {
            let x: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            checked += 1;
            if quantize(&model, &x).unwrap() != brute_force_codes(&books, &x) {
                mismatches += 1;
            }
        }
    }
    let took = start.elapsed();
    outcome(
        "quantizer matches brute-force nearest-codeword scan",
        mismatches == 0 && took < Duration::from_secs(1),
        format!("{mismatches}/{checked} mismatches over 10 random models (d<=16, 2<=K<=8, N<=3); {took:.2?} (limit 1 s)"),
    )
}

fn coverage_analog() -> Outcome {
    let start = Instant::now();
    let data = gaussian_clusters(256, 8192, 64, 0.02, 3).unwrap();
    let model = train_residual_kmeans(&data, 3, 256, 7, 25).unwrap();
    let coverage = codebook_coverage(&model, &data).unwrap();
    let took = start.elapsed();
    outcome(
        "level-1 codebook coverage on 256-cluster Gaussian corpus",
        coverage[0] > 0.95 && took < Duration::from_secs(60),
        format!("coverage {:.4} (need > 0.95), 8192 x 64, K=256, N=3; {took:.1?} (limit 60 s)", coverage[0]),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ae = Autoencoder::new(8, &[8, 4], 0.0, 13).unwrap();
    let books: Vec<Codebook> = (0..2)
        .map(|l| {
            let rows: Vec<Vec<f32>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-0.5f32..0.5)).collect()).collect();
            Codebook::from_rows(l, &rows).unwrap()
        })
        .collect();
    let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let offsets = ae.quantization_offsets(&x, &books);
    let (_, grad) = ae.reconstruction_grad(&x, &offsets);
    let base = ae.params().to_vec();
    let mut idx: Vec<usize> = (0..base.len()).collect();
    idx.shuffle(&mut rng);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &i in idx.iter().take(50) {
        let mut p = base.clone();
        p[i] = base[i] + h;
        ae.set_params(&p).unwrap();
        let up = ae.reconstruction_loss(&x, &offsets);
        p[i] = base[i] - h;
        ae.set_params(&p).unwrap();
        let down = ae.reconstruction_loss(&x, &offsets);
        let num = (up - down) / (2.0 * h);
        // Relative error with a 1e-6 floor so exactly-zero gradients compare absolutely.
        let rel = (num - grad[i]).abs() / num.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    outcome(
        "RQ-VAE reconstruction gradient vs central differences",
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 50 of {} params (d=8, widths 8-4, K=4, N=2; h=1e-6, limit 1e-4)", base.len()),
    )
}

// ---------------------------------------------------------------- beam search

struct TableScorer {
    logits: HashMap<Vec<u32>, f64>,
    uniform: BTreeSet<Vec<u32>>,
}

impl TableScorer {
    fn step(&self, prefix: &[u32], code: u32, n_children: usize) -> f64 {
        if self.uniform.contains(prefix) {
            return -(n_children as f64).ln();
        }
        let mut p = prefix.to_vec();
        p.push(code);
        self.logits[&p]
    }
}

impl CodeScorer for TableScorer {
    type Context = ();
    fn next_code_logits(&self, prefix: &[u32], children: &[u32], _: &()) -> discern::error::Result<Option<Vec<f64>>> {
        if self.uniform.contains(prefix) {
            return Ok(None);
        }
        Ok(Some(children.iter().map(|&c| self.step(prefix, c, children.len())).collect()))
    }
}

fn beam_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut mismatched = 0;
    let mut invalid = 0;
    for _ in 0..100 {
        let depth = rng.random_range(2..=4);
        let k_codes = rng.random_range(2..=6);
        let n_leaves = rng.random_range(1..=200);
        let mut paths = BTreeSet::new();
        for _ in 0..n_leaves * 3 {
            if paths.len() == n_leaves {
                break;
            }
            paths.insert((0..depth).map(|_| rng.random_range(0..k_codes)).collect::<Vec<u32>>());
        }
        let leaves: Vec<(String, Vec<u32>)> = paths.iter().enumerate().map(|(i, p)| (format!("i{i}"), p.clone())).collect();
        let trie = SidTrie::from_paths(depth, leaves.clone()).unwrap();
        let mut logits = HashMap::new();
        let mut uniform = BTreeSet::new();
        for p in &paths {
            for l in 0..depth {
                logits.entry(p[..=l].to_vec()).or_insert_with(|| rng.random_range(-5.0..0.0));
                if rng.random_bool(0.1) {
                    uniform.insert(p[..l].to_vec());
                }
            }
        }
        let scorer = TableScorer { logits, uniform };
        let k = rng.random_range(1..=leaves.len().min(10));
        let width = trie.max_live_prefixes().max(k);
        let hits = constrained_beam_search(&scorer, &trie, &(), width, k).unwrap();

        let mut exhaustive: Vec<(f64, Vec<u32>, String)> = leaves
            .iter()
            .map(|(item, path)| {
                let mut s = 0.0;
                for l in 0..depth {
                    let n = trie.children(&path[..l]).unwrap().len();
                    s += scorer.step(&path[..l], path[l], n);
                }
                (s, path.clone(), item.clone())
            })
            .collect();
        exhaustive.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let expect: Vec<(&str, f64)> = exhaustive.iter().take(k).map(|(s, _, i)| (i.as_str(), *s)).collect();
        let got: Vec<(&str, f64)> = hits.iter().map(|h| (h.item.as_str(), h.log_score)).collect();
        if got != expect {
            mismatched += 1;
        }
        invalid += hits.iter().filter(|h| !paths.contains(&h.sid.path())).count();
    }
    outcome(
        "beam search at saturating width equals exhaustive top-k",
        mismatched == 0 && invalid == 0,
        format!("{mismatched}/100 random tries differ (<=200 leaves, 10% uniform nodes); {invalid} invalid paths"),
    )
}

// ---------------------------------------------------------------- builder

struct Planted {
    catalog: Catalog,
    sets: PreferenceMap,
    items: EmbeddingMatrix,
    prefs: EmbeddingMatrix,
    reviews: EmbeddingMatrix,
}

/// 50 items in 10 tight clusters, 30 users drifting between clusters, and a
/// shared pool of preference texts so that (preference, item) collisions occur.
fn planted_corpus(seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 12;
    let noise = |rng: &mut ChaCha8Rng, v: &[f32], s: f32| -> Vec<f32> {
        v.iter().map(|x| x + rng.random_range(-s..s)).collect()
    };
    let centers: Vec<Vec<f32>> = (0..10).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    let item_vecs: Vec<Vec<f32>> = (0..50).map(|i| noise(&mut rng, &centers[i / 5], 0.15)).collect();
    let item_ids: Vec<String> = (0..50).map(|i| format!("it{i:02}")).collect();

    let mut pref_rows = Vec::new();
    let mut positive = Vec::new();
    for j in 0..40 {
        let anchor = rng.random_range(0..50);
        let text = format!("Enjoys things like {} #{j}", item_ids[anchor]);
        pref_rows.push((text.clone(), noise(&mut rng, &item_vecs[anchor], 0.1)));
        positive.push(text);
    }
    let mut negative = Vec::new();
    for j in 0..10 {
        let anchor = rng.random_range(0..50);
        let text = format!("Avoid anything like {} #{j}", item_ids[anchor]);
        pref_rows.push((text.clone(), noise(&mut rng, &item_vecs[anchor], 0.1)));
        negative.push(text);
    }

    let mut records = Vec::new();
    let mut review_rows = Vec::new();
    let mut sets = BTreeMap::new();
    for u in 0..30 {
        let user = format!("u{u:02}");
        let len = rng.random_range(3..=8);
        let mut cluster = rng.random_range(0..10);
        for pos in 0..len {
            if rng.random_bool(0.3) {
                cluster = rng.random_range(0..10);
            }
            let item = cluster * 5 + rng.random_range(0..5);
            let mut r = InteractionRecord::new(&user, &item_ids[item], pos as i64);
            let neg = rng.random_bool(0.35);
            r.review = Some(format!("review by {user} of {}", item_ids[item]));
            r.review_sentiment = Some(if neg { Sentiment::Negative } else { Sentiment::Positive });
            records.push(r);
            review_rows.push((review_key(&user, pos), noise(&mut rng, &item_vecs[item], 0.2)));
        }
        for t in 1..len {
            let mut chosen: Vec<String> = positive.choose_multiple(&mut rng, 4).cloned().collect();
            chosen.push(if rng.random_bool(0.6) {
                negative.choose(&mut rng).unwrap().clone()
            } else {
                positive.iter().find(|p| !chosen.contains(p)).unwrap().clone()
            });
            chosen.shuffle(&mut rng);
            sets.insert(
                (user.clone(), t),
                PreferenceSet {
                    user: user.clone(),
                    t,
                    preferences: chosen,
                },
            );
        }
    }
    let (pid, pv): (Vec<_>, Vec<_>) = pref_rows.into_iter().unzip();
    let (rid, rv): (Vec<_>, Vec<_>) = review_rows.into_iter().unzip();
    Planted {
        catalog: Catalog::from_records(records, "planted").unwrap(),
        sets,
        items: EmbeddingMatrix::new(item_ids, item_vecs).unwrap(),
        prefs: EmbeddingMatrix::new(pid, pv).unwrap(),
        reviews: EmbeddingMatrix::new(rid, rv).unwrap(),
    }
}

fn cos(a: &[f32], b: &[f32]) -> f64 {
    cosine(a, b).unwrap()
}

fn argmax_by<T: Clone>(xs: impl IntoIterator<Item = (T, f64)>, mut tie_less: impl FnMut(&T, &T) -> bool) -> Option<T> {
    let mut best: Option<(T, f64)> = None;
    for (x, s) in xs {
        best = match best {
            None => Some((x, s)),
            Some((b, bs)) if s > bs || (s == bs && tie_less(&x, &b)) => Some((x, s)),
            keep => keep,
        };
    }
    best.map(|(x, _)| x)
}

type Key = (String, String, String, usize, Vec<String>, Vec<String>, Option<String>);

fn key(i: &EvalInstance) -> Key {
    (
        i.split.as_str().to_string(),
        i.user.clone(),
        i.target.clone(),
        i.t,
        i.preferences.clone(),
        i.history.clone(),
        i.pair_id.clone(),
    )
}

fn sorted_keys<'a>(it: impl Iterator<Item = &'a EvalInstance>) -> Vec<Key> {
    let mut v: Vec<Key> = it.map(key).collect();
    v.sort();
    v
}

fn oracle_instance(
    split: Split,
    user: &str,
    t: usize,
    prefs: Vec<String>,
    history: &[String],
    target: &str,
    pair: Option<String>,
) -> Key {
    (split.as_str().to_string(), user.to_string(), target.to_string(), t, prefs, history.to_vec(), pair)
}

fn builder_oracle() -> Outcome {
    let p = planted_corpus(17);
    let emb = BenchmarkEmbeddings {
        items: &p.items,
        prefs: &p.prefs,
        reviews: Some(&p.reviews),
    };
    let suite = build_benchmark(&p.catalog, &p.sets, &emb, None, &BuildConfig::default()).unwrap();
    let mut problems = Vec::new();
    let item_vec = |i: &str| p.items.get(i).unwrap();
    let pref_vec = |t: &str| p.prefs.get(t).unwrap();
    let max_h = 20;

    // Preference matching on the recommendation axis.
    let split = leave_last_out(&p.catalog);
    let mut rec = Vec::new();
    for tag in Split::ALL {
        for ex in split.get(tag) {
            let Some(set) = p.sets.get(&(ex.user.clone(), ex.position)) else { continue };
            let best = argmax_by(
                set.preferences.iter().enumerate().map(|(i, t)| (i, cos(pref_vec(t), item_vec(&ex.target)))),
                |a, b| a < b,
            )
            .unwrap();
            rec.push(oracle_instance(
                tag,
                &ex.user,
                ex.position,
                vec![set.preferences[best].clone()],
                truncate_history(&ex.history, max_h),
                &ex.target,
                None,
            ));
        }
    }
    rec.sort();
    if rec != sorted_keys(suite.axis(Axis::Recommendation)) {
        problems.push("recommendation matching");
    }

    // Fine / coarse steering.
    let pool: Vec<String> = p.sets.values().flat_map(|s| s.preferences.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let items: Vec<&String> = p.catalog.items.iter().collect();
    let mut used: BTreeSet<(String, String)> = BTreeSet::new();
    let take = |item: &str, used: &mut BTreeSet<(String, String)>| -> Option<String> {
        let mut ranked: Vec<(&String, f64)> = pool.iter().map(|t| (t, cos(pref_vec(t), item_vec(item)))).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let hit = ranked.into_iter().map(|(t, _)| t.clone()).find(|t| !used.contains(&(t.clone(), item.to_string())))?;
        used.insert((hit.clone(), item.to_string()));
        Some(hit)
    };
    let (mut fine, mut coarse) = (Vec::new(), Vec::new());
    for tag in [Split::Test, Split::Val, Split::Train] {
        let mut exs: Vec<_> = split.get(tag).iter().collect();
        exs.sort_by(|a, b| (&a.user, a.position).cmp(&(&b.user, b.position)));
        for ex in exs {
            let others = || items.iter().filter(|i| ***i != ex.target).map(|i| i.as_str());
            let q = item_vec(&ex.target);
            let similar = argmax_by(others().map(|i| (i, cos(item_vec(i), q))), |a, b| a < b).unwrap();
            let distinct = argmax_by(others().map(|i| (i, -cos(item_vec(i), q))), |a, b| a < b).unwrap();
            let history = truncate_history(&ex.history, max_h);
            if let Some(p1) = take(similar, &mut used) {
                let mut steer: Option<(String, Vec<String>)> = None;
                'users: for (other, seq) in &p.catalog.sequences {
                    if *other == ex.user {
                        continue;
                    }
                    for pos in 1..seq.len() {
                        if seq.items[pos] == similar {
                            let h = truncate_history(&seq.items[..pos], max_h);
                            if h != history {
                                steer = Some((other.clone(), h.to_vec()));
                                break 'users;
                            }
                        }
                    }
                }
                let (u, h) = steer.unwrap_or_else(|| (ex.user.clone(), history.to_vec()));
                fine.push(oracle_instance(tag, &u, ex.position, vec![p1], &h, similar, None));
            }
            if let Some(p2) = take(distinct, &mut used) {
                coarse.push(oracle_instance(tag, &ex.user, ex.position, vec![p2], history, distinct, None));
            }
        }
    }
    fine.sort();
    coarse.sort();
    if fine != sorted_keys(suite.axis(Axis::Fine)) {
        problems.push("fine steering");
    }
    if coarse != sorted_keys(suite.axis(Axis::Coarse)) {
        problems.push("coarse steering");
    }
    let tuples: Vec<(&String, &String)> = suite
        .axis(Axis::Fine)
        .chain(suite.axis(Axis::Coarse))
        .map(|i| (&i.preferences[0], &i.target))
        .collect();
    let unique = tuples.iter().collect::<BTreeSet<_>>().len() == tuples.len();
    if !unique {
        problems.push("fine/coarse tuple uniqueness");
    }

    // Sentiment pairing.
    let (mut neg, mut pos) = (Vec::new(), Vec::new());
    let mut seen = BTreeSet::new();
    for ((user, t), set) in &p.sets {
        let seq = p.catalog.sequence(user).unwrap();
        let cands: Vec<usize> = (0..*t).filter(|&i| seq.sentiments[i] == Some(Sentiment::Negative)).collect();
        for (idx, text) in set.preferences.iter().enumerate() {
            let Some(rest) = text.strip_prefix("Avoid ") else { continue };
            let Some(at) = argmax_by(
                cands.iter().map(|&i| (i, cos(p.reviews.get(&review_key(user, i)).unwrap(), pref_vec(text)))),
                |a, b| a < b,
            ) else {
                continue;
            };
            let target = &seq.items[at];
            if !seen.insert((user.clone(), text.clone(), target.clone())) {
                continue;
            }
            let tag = Split::of_position(*t, seq.len());
            let pair = Some(format!("{user}:{t}:{idx}"));
            neg.push(oracle_instance(tag, user, at, vec![text.clone()], &[], target, pair.clone()));
            pos.push(oracle_instance(tag, user, at, vec![format!("Find {rest}")], &[], target, pair));
        }
    }
    neg.sort();
    pos.sort();
    if neg != sorted_keys(suite.axis(Axis::SentimentNeg)) || pos != sorted_keys(suite.axis(Axis::SentimentPos)) {
        problems.push("sentiment pairing");
    }
    let twins = {
        let by_pair = |a: Axis| -> BTreeMap<String, String> {
            suite.axis(a).map(|i| (i.pair_id.clone().unwrap(), i.target.clone())).collect()
        };
        let (n, p) = (by_pair(Axis::SentimentNeg), by_pair(Axis::SentimentPos));
        n == p && n.len() == suite.axis(Axis::SentimentNeg).count()
    };
    if !twins {
        problems.push("sentiment twins");
    }
    let counts: Vec<String> = Axis::ALL
        .iter()
        .map(|a| format!("{}={}", a.as_str(), suite.axis(*a).count()))
        .collect();
    outcome(
        "benchmark builder equals brute-force oracles",
        problems.is_empty() && counts.iter().all(|c| !c.ends_with("=0")),
        if problems.is_empty() {
            format!("50 items / 30 users; {}", counts.join(" "))
        } else {
            format!("mismatch in {}", problems.join(", "))
        },
    )
}

// ---------------------------------------------------------------- metrics

fn metric_fixture() -> Outcome {
    let list = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let ten = list(&["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]);
    // (target, hand Recall@5, hand NDCG@5, hand Recall@10, hand NDCG@10)
    let fixture: [(&str, f64, f64, f64, f64); 12] = [
        ("a", 1.0, 1.0, 1.0, 1.0),
        ("b", 1.0, 0.6309297535714575, 1.0, 0.6309297535714575),
        ("c", 1.0, 0.5, 1.0, 0.5),
        ("d", 1.0, 0.43067655807339306, 1.0, 0.43067655807339306),
        ("e", 1.0, 0.38685280723454163, 1.0, 0.38685280723454163),
        ("f", 0.0, 0.0, 1.0, 0.35620718710802218),
        ("g", 0.0, 0.0, 1.0, 0.33333333333333333),
        ("h", 0.0, 0.0, 1.0, 0.31546487678572871),
        ("i", 0.0, 0.0, 1.0, 0.30102999566398120),
        ("j", 0.0, 0.0, 1.0, 0.28906482631788782),
        ("x", 0.0, 0.0, 0.0, 0.0),
        ("y", 0.0, 0.0, 0.0, 0.0),
    ];
    let mut worst: f64 = 0.0;
    for (target, r5, n5, r10, n10) in fixture {
        worst = worst
            .max((recall_at_k(&ten, target, 5) - r5).abs())
            .max((ndcg_at_k(&ten, target, 5) - n5).abs())
            .max((recall_at_k(&ten, target, 10) - r10).abs())
            .max((ndcg_at_k(&ten, target, 10) - n10).abs());
    }
    let mean_r5 = fixture.iter().map(|f| recall_at_k(&ten, f.0, 5)).sum::<f64>() / 12.0;
    worst = worst.max((mean_r5 - 5.0 / 12.0).abs());
    let rank3 = ndcg_at_k(&ten, "c", 10);

    // m@k truth table: hit under the positive twin and miss under the negative one.
    let hit = list(&["t", "u"]);
    let miss = list(&["u", "v"]);
    let table = [
        (&hit, &miss, 1.0),
        (&hit, &hit, 0.0),
        (&miss, &miss, 0.0),
        (&miss, &hit, 0.0),
    ];
    let truth_ok = table.iter().all(|(p, n, want)| m_at_k(p, n, "t", "t", 2).unwrap() == *want);

    let rel = relative_improvement_value(0.0282, 0.0249).unwrap();
    outcome(
        "metric fixtures and relative improvement",
        worst < 1e-12 && rank3 == 0.5 && truth_ok && (rel - 13.2).abs() <= 0.2,
        format!(
            "12-instance fixture max error {worst:.1e}; ndcg rank 3 = {rank3}; m@k truth table {}; 0.0282 vs 0.0249 -> {rel:+.2}% (want +13.2 +- 0.2)",
            if truth_ok { "ok" } else { "WRONG" }
        ),
    )
}

// ---------------------------------------------------------------- CLI pipeline

fn discern(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_discern"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("discern {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Raw inputs: interactions, three embedding namespaces as JSONL, and a replay
/// file that answers every preference prompt with the synthetic preference set.
fn write_inputs(dir: &Path) -> Result<PreferenceMap, String> {
    let data = steerable_dataset(&SteerableConfig::default()).map_err(|e| e.to_string())?;
    write_interactions_jsonl(&dir.join("interactions.jsonl"), &data.records).map_err(|e| e.to_string())?;
    for (name, m) in [("items", &data.items), ("prefs", &data.prefs), ("reviews", &data.reviews)] {
        m.save_jsonl(&dir.join(format!("{name}.jsonl"))).map_err(|e| e.to_string())?;
    }
    let catalog = ingest_interactions(&dir.join("interactions.jsonl"), InputFormat::Jsonl).map_err(|e| e.to_string())?;
    let template = PromptTemplate::builtin("default").ok_or("no default template")?;
    let mut replay = String::new();
    for ((user, t), set) in &data.sets {
        let history = history_entries(&catalog, user, *t).map_err(|e| e.to_string())?;
        let prompt = render_prompt(&history, &template, RenderOptions::default()).map_err(|e| e.to_string())?;
        let response = serde_json::json!({ "instructions": set.preferences }).to_string();
        replay.push_str(&replay_line(&prompt.text, &response));
        replay.push('\n');
    }
    std::fs::write(dir.join("replay.jsonl"), replay).map_err(|e| e.to_string())?;
    Ok(data.sets)
}

struct Run {
    artifacts: Vec<PathBuf>,
    elapsed: Duration,
    markov: MetricReport,
    fusion: MetricReport,
    prefs_match: bool,
    report_stdout: String,
}

fn run_pipeline(input: &Path, out: &Path, expected_sets: &PreferenceMap) -> Result<Run, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let i = |name: &str| s(&input.join(name));
    let o = |name: &str| s(&out.join(name));
    let start = Instant::now();
    discern(&["ingest", "--input", &i("interactions.jsonl"), "--format", "jsonl", "--out", &o("catalog.pdcat")])?;
    for name in ["items", "prefs", "reviews"] {
        discern(&["embed-pack", "--input", &i(&format!("{name}.jsonl")), "--out", &o(&format!("{name}.pdem"))])?;
    }
    discern(&[
        "prefs", "generate", "--catalog", &o("catalog.pdcat"), "--template", "default", "--client",
        &format!("replay:{}", i("replay.jsonl")), "--out", &o("prefs.jsonl"),
    ])?;
    discern(&[
        "quantize", "--embeddings", &o("items.pdem"), "--kind", "rkmeans", "--levels", "3", "--k", "16", "--seed", "7",
        "--out", &o("rq.pdrq"), "--sids", &o("sids.tsv"),
    ])?;
    discern(&[
        "build-benchmark", "--catalog", &o("catalog.pdcat"), "--prefs", &o("prefs.jsonl"), "--embeddings",
        &format!("item={},pref={},review={}", o("items.pdem"), o("prefs.pdem"), o("reviews.pdem")),
        "--sids", &o("sids.tsv"), "--out", &o("suite"),
    ])?;
    for kind in ["markov", "fusion"] {
        discern(&[
            "train", "--catalog", &o("catalog.pdcat"), "--sids", &o("sids.tsv"), "--kind", kind, "--out",
            &o(&format!("{kind}.pdmk")),
        ])?;
        discern(&[
            "evaluate", "--suite", &o("suite"), "--model", &o(&format!("{kind}.pdmk")), "--ks", "5,10", "--beam", "30",
            "--out", &o(&format!("{kind}.json")),
        ])?;
    }
    let elapsed = start.elapsed();
    discern(&[
        "quantize", "--embeddings", &o("items.pdem"), "--kind", "rqvae", "--levels", "2", "--k", "8", "--widths", "16,8",
        "--epochs", "3", "--seed", "7", "--out", &o("vae.pdrq"), "--sids", &o("vae_sids.tsv"),
    ])?;
    let report_stdout = discern(&["report", "--a", &o("fusion.json"), "--b", &o("markov.json")])?;
    discern(&[
        "plot", "--reports", &format!("{},{}", o("markov.json"), o("fusion.json")), "--metric", "recall", "--k", "10",
        "--out", &o("recall.svg"),
    ])?;
    let generated = discern::preference::load_preference_sets(&out.join("prefs.jsonl")).map_err(|e| e.to_string())?;
    let artifacts = [
        "catalog.pdcat", "items.pdem", "prefs.pdem", "reviews.pdem", "prefs.jsonl", "rq.pdrq", "sids.tsv",
        "markov.pdmk", "fusion.pdmk", "markov.json", "fusion.json", "vae.pdrq", "vae_sids.tsv", "recall.svg",
    ]
    .iter()
    .map(|n| out.join(n))
    .chain([out.join("suite").join(SUITE_FILE), out.join("suite").join(MANIFEST_FILE)])
    .collect();
    Ok(Run {
        artifacts,
        elapsed,
        markov: MetricReport::load(&out.join("markov.json")).map_err(|e| e.to_string())?,
        fusion: MetricReport::load(&out.join("fusion.json")).map_err(|e| e.to_string())?,
        prefs_match: &generated == expected_sets,
        report_stdout,
    })
}

fn steerability(run: &Result<Run, String>) -> Outcome {
    const NAME: &str = "end-to-end steerability on the synthetic steerable corpus";
    let run = match run {
        Ok(r) => r,
        Err(e) => return outcome(NAME, false, e.clone()),
    };
    let recall = |r: &MetricReport| r.cell(Axis::Recommendation, Split::Test, 10).map_or(0.0, |c| c.recall);
    let (base, fused) = (recall(&run.markov), recall(&run.fusion));
    let m10 = run.fusion.cell(Axis::SentimentPos, Split::Test, 10).and_then(|c| c.m).unwrap_or(0.0);
    let pairs = run.fusion.cell(Axis::SentimentPos, Split::Test, 10).and_then(|c| c.pairs).unwrap_or(0);
    let ratio = if base > 0.0 { fused / base } else { f64::INFINITY };
    outcome(
        NAME,
        ratio >= 1.2 && m10 > 0.5 && run.elapsed < Duration::from_secs(300) && run.prefs_match,
        format!(
            "Recall@10 fusion {fused:.4} vs markov {base:.4} = x{ratio:.2} (need >= 1.20); m@10 {m10:.3} over {pairs} twins (need > 0.5); \
             pipeline {:.1?} (limit 300 s); replayed preference sets {}",
            run.elapsed,
            if run.prefs_match { "identical" } else { "DIFFER" }
        ),
    )
}

fn determinism(a: &Result<Run, String>, b: &Result<Run, String>) -> Outcome {
    const NAME: &str = "CLI stages are byte-for-byte deterministic";
    let (a, b) = match (a, b) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(NAME, false, e.clone()),
    };
    let mut differing = Vec::new();
    for (x, y) in a.artifacts.iter().zip(&b.artifacts) {
        if file_digest(x).ok() != file_digest(y).ok() || file_digest(x).is_err() {
            differing.push(x.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    if a.report_stdout != b.report_stdout {
        differing.push("report output".into());
    }
    outcome(
        NAME,
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts plus report output identical across two runs", a.artifacts.len())
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------- data-contingent

fn beauty_five_core() -> Outcome {
    const NAME: &str = "Beauty five-core statistics (22,363 users / 12,101 items / 198,502 actions)";
    let Some(path) = std::env::var_os("DISCERN_BEAUTY_PATH") else {
        return Outcome {
            name: NAME,
            status: Status::Unverified,
            detail: "raw review dump not present; set DISCERN_BEAUTY_PATH to a JSONL file to run".into(),
        };
    };
    match ingest_interactions(Path::new(&path), InputFormat::Jsonl).and_then(|c| five_core_filter(&c)) {
        Ok(c) => {
            let got = (c.num_users(), c.num_items(), c.num_interactions());
            outcome(NAME, got == (22_363, 12_101, 198_502), format!("got {got:?}"))
        }
        Err(e) => outcome(NAME, false, e.to_string()),
    }
}

fn main() {
    let started = Instant::now();
    let mut outcomes = vec![
        quantizer_oracle(),
        coverage_analog(),
        gradient_check(),
        beam_exactness(),
        builder_oracle(),
        metric_fixture(),
    ];
    let tmp = tempfile::tempdir().expect("temp dir");
    let input = tmp.path().join("input");
    std::fs::create_dir_all(&input).unwrap();
    let (first, second) = match write_inputs(&input) {
        Ok(sets) => {
            let [a, b] = ["run_a", "run_b"].map(|d| {
                let dir = tmp.path().join(d);
                std::fs::create_dir_all(&dir).unwrap();
                run_pipeline(&input, &dir, &sets)
            });
            (a, b)
        }
        Err(e) => (Err(e.clone()), Err(e)),
    };
    outcomes.push(steerability(&first));
    outcomes.push(beauty_five_core());
    outcomes.push(determinism(&first, &second));
    // Loaded to confirm the persisted suite reads back with its digest check.
    if let Ok(r) = &first {
        let suite_dir = r.artifacts[0].parent().unwrap().join("suite");
        if let Err(e) = BenchmarkSuite::load(&suite_dir) {
            outcomes.push(outcome("persisted suite reloads", false, e.to_string()));
        }
    }

    println!();
    for o in &outcomes {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Unverified => "UNVERIFIED",
        };
        println!("[{tag:<10}] {}: {}", o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| o.status == Status::Fail).count();
    let unverified = outcomes.iter().filter(|o| o.status == Status::Unverified).count();
    println!(
        "\nacceptance: {} passed, {failed} failed, {unverified} unverified ({:.1?})",
        outcomes.len() - failed - unverified,
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
