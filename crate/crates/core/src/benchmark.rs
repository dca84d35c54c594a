//! Builds the evaluation suite: preference-based recommendation, fine and
//! coarse steering, sentiment following and history consolidation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::corpus::{leave_last_out, truncate_history, Catalog, Sentiment, Split, SplitExample, DEFAULT_MAX_HISTORY};
use crate::embedding::{cosine, least_similar, load_embeddings, top_k_similar, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::preference::{classify_preference_sentiment, invert_negative_preference, InversionStyle, PreferenceMap, PREFERENCES_PER_SET};
use crate::quantizer::SidMap;

pub const SUITE_FILE: &str = "suite.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ITEM_EMBEDDINGS_FILE: &str = "items.pdem";
pub const PREF_EMBEDDINGS_FILE: &str = "prefs.pdem";
pub const SID_MAP_FILE: &str = "sids.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Recommendation,
    Fine,
    Coarse,
    SentimentPos,
    SentimentNeg,
    Consolidation,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::Recommendation,
        Axis::Fine,
        Axis::Coarse,
        Axis::SentimentPos,
        Axis::SentimentNeg,
        Axis::Consolidation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Recommendation => "recommendation",
            Axis::Fine => "fine",
            Axis::Coarse => "coarse",
            Axis::SentimentPos => "sentiment_pos",
            Axis::SentimentNeg => "sentiment_neg",
            Axis::Consolidation => "consolidation",
        }
    }

    pub fn is_sentiment(self) -> bool {
        matches!(self, Axis::SentimentPos | Axis::SentimentNeg)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown axis `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub axis: Axis,
    pub split: Split,
    pub user: String,
    /// Position of the interaction the instance was derived from (0-based).
    pub t: usize,
    pub preferences: Vec<String>,
    pub history: Vec<String>,
    pub target: String,
    /// Shared by the two halves of a sentiment twin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
}

impl EvalInstance {
    fn new(axis: Axis, split: Split, user: &str, t: usize, preferences: Vec<String>, history: &[String], target: &str) -> Self {
        Self {
            axis,
            split,
            user: user.to_string(),
            t,
            preferences,
            history: history.to_vec(),
            target: target.to_string(),
            pair_id: None,
        }
    }
}

/// Key of the review embedding for the interaction at `position` of `user`'s sequence.
pub fn review_key(user: &str, position: usize) -> String {
    format!("{user}@{position}")
}

#[derive(Clone, Copy, Debug)]
pub struct BenchmarkEmbeddings<'a> {
    pub items: &'a EmbeddingMatrix,
    pub prefs: &'a EmbeddingMatrix,
    /// Keyed by [`review_key`]; needed only when a negative preference has several candidate items.
    pub reviews: Option<&'a EmbeddingMatrix>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub max_history: usize,
    pub inversion: InversionStyle,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            max_history: DEFAULT_MAX_HISTORY,
            inversion: InversionStyle::Find,
        }
    }
}

/// The preference whose embedding is closest to the target's.
/// Ties go to the lower preference index.
pub fn match_preference_to_target<'p>(
    preferences: &'p [String],
    target: &str,
    prefs: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
) -> Result<(usize, &'p str)> {
    let t = items.require("item", target)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in preferences.iter().enumerate() {
        let v = prefs.require("preference", p)?;
        let c = cosine(v, t).ok_or_else(|| Error::ZeroNorm { id: p.clone() })?;
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    let (i, _) = best.ok_or(Error::EmptyCandidates)?;
    Ok((i, &preferences[i]))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub skipped: usize,
}

impl AxisCounts {
    fn add(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::Val => self.val += 1,
            Split::Test => self.test += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub catalog_digest: String,
    pub item_embeddings_digest: String,
    pub pref_embeddings_digest: String,
    pub review_embeddings_digest: Option<String>,
    pub sid_map_digest: Option<String>,
    pub suite_digest: String,
    pub config: Option<BuildConfig>,
    pub counts: BTreeMap<Axis, AxisCounts>,
    /// Inverted preferences without their own embedding, given their negative twin's vector.
    pub aliased_inversions: usize,
    pub pool_size: usize,
}

impl SuiteManifest {
    pub fn skipped(&self, axis: Axis) -> usize {
        self.counts.get(&axis).map_or(0, |c| c.skipped)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSuite {
    pub instances: Vec<EvalInstance>,
    pub manifest: SuiteManifest,
    pub item_embeddings: EmbeddingMatrix,
    /// Every preference text the suite references, keyed by text.
    pub pref_embeddings: EmbeddingMatrix,
    pub sids: Option<SidMap>,
}

#[derive(Clone, Debug, Default)]
pub struct AxisOutput {
    pub instances: Vec<EvalInstance>,
    pub skipped: usize,
}

pub fn build_recommendation_split(
    split: &[SplitExample],
    sets: &PreferenceMap,
    emb: &BenchmarkEmbeddings<'_>,
    max_history: usize,
    tag: Split,
) -> Result<AxisOutput> {
    let mut out = AxisOutput::default();
    for ex in split {
        let Some(set) = sets.get(&(ex.user.clone(), ex.position)) else {
            out.skipped += 1;
            continue;
        };
        if set.preferences.is_empty() {
            out.skipped += 1;
            continue;
        }
        let (_, p) = match_preference_to_target(&set.preferences, &ex.target, emb.prefs, emb.items)?;
        out.instances.push(EvalInstance::new(
            Axis::Recommendation,
            tag,
            &ex.user,
            ex.position,
            vec![p.to_string()],
            truncate_history(&ex.history, max_history),
            &ex.target,
        ));
    }
    Ok(out)
}

/// All distinct preference texts across every set, sorted.
pub fn preference_pool(sets: &PreferenceMap) -> Vec<String> {
    let pool: BTreeSet<&String> = sets.values().flat_map(|s| &s.preferences).collect();
    pool.into_iter().cloned().collect()
}

struct PoolRanker<'a> {
    pool: EmbeddingMatrix,
    items: &'a EmbeddingMatrix,
    cache: BTreeMap<String, Vec<String>>,
}

impl PoolRanker<'_> {
    /// Pool texts by descending cosine to `item`, ties by text.
    fn ranking(&mut self, item: &str) -> Result<&[String]> {
        if !self.cache.contains_key(item) {
            let q = self.items.require("item", item)?;
            let ranked = top_k_similar(&self.pool, q, self.pool.len().max(1), &[])?;
            self.cache.insert(item.to_string(), ranked.into_iter().map(|r| r.id).collect());
        }
        Ok(&self.cache[item])
    }

    fn first_unused(&mut self, item: &str, used: &mut BTreeSet<(String, String)>) -> Result<Option<String>> {
        let ranking = self.ranking(item)?;
        let found = ranking
            .iter()
            .find(|p| !used.contains(&((*p).clone(), item.to_string())))
            .cloned();
        if let Some(p) = &found {
            used.insert((p.clone(), item.to_string()));
        }
        Ok(found)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FineCoarseOutput {
    pub fine: AxisOutput,
    pub coarse: AxisOutput,
}

/// Fine and coarse steering instances for every split example.
///
/// Examples are processed test, val, train (each by user, then position) and a
/// `(preference, item)` tuple is never emitted twice across both axes. When the
/// best preference is taken, the next best one is used.
pub fn build_fine_coarse(
    catalog: &Catalog,
    split: &crate::corpus::DatasetSplit,
    pool: &[String],
    emb: &BenchmarkEmbeddings<'_>,
    max_history: usize,
) -> Result<FineCoarseOutput> {
    let mut out = FineCoarseOutput::default();
    if pool.is_empty() {
        let n = Split::ALL.iter().map(|s| split.get(*s).len()).sum();
        out.fine.skipped = n;
        out.coarse.skipped = n;
        return Ok(out);
    }
    let item_ids: Vec<&String> = catalog.items.iter().collect();
    let items = emb.items.subset(&item_ids)?;
    let mut ranker = PoolRanker {
        pool: emb.prefs.subset(pool)?,
        items: emb.items,
        cache: BTreeMap::new(),
    };
    // item → (user, position) for every occurrence past the first slot of a sequence
    let mut occurrences: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
    for seq in catalog.sequences.values() {
        for (pos, item) in seq.items.iter().enumerate().skip(1) {
            occurrences.entry(item.as_str()).or_default().push((seq.user.as_str(), pos));
        }
    }
    let mut used: BTreeSet<(String, String)> = BTreeSet::new();
    for tag in [Split::Test, Split::Val, Split::Train] {
        let mut examples: Vec<&SplitExample> = split.get(tag).iter().collect();
        examples.sort_by(|a, b| (&a.user, a.position).cmp(&(&b.user, b.position)));
        for ex in examples {
            let q = items.require("item", &ex.target)?;
            let exclude = [ex.target.as_str()];
            let similar = top_k_similar(&items, q, 1, &exclude)?.into_iter().next();
            let Some(similar) = similar else {
                out.fine.skipped += 1;
                out.coarse.skipped += 1;
                continue;
            };
            let distinct = least_similar(&items, q, &exclude)?;
            let history = truncate_history(&ex.history, max_history);

            match ranker.first_unused(&similar.id, &mut used)? {
                Some(p1) => {
                    let (user, hist) = steering_user(catalog, &occurrences, &similar.id, &ex.user, history, max_history);
                    out.fine.instances.push(EvalInstance::new(Axis::Fine, tag, &user, ex.position, vec![p1], &hist, &similar.id));
                }
                None => out.fine.skipped += 1,
            }
            match ranker.first_unused(&distinct.id, &mut used)? {
                Some(p2) => out.coarse.instances.push(EvalInstance::new(
                    Axis::Coarse,
                    tag,
                    &ex.user,
                    ex.position,
                    vec![p2],
                    history,
                    &distinct.id,
                )),
                None => out.coarse.skipped += 1,
            }
        }
    }
    Ok(out)
}

/// The user whose history precedes `item` in their own sequence and differs from
/// `history`: lexicographically smallest such user, else `user` with `history`.
fn steering_user(
    catalog: &Catalog,
    occurrences: &BTreeMap<&str, Vec<(&str, usize)>>,
    item: &str,
    user: &str,
    history: &[String],
    max_history: usize,
) -> (String, Vec<String>) {
    for &(other, pos) in occurrences.get(item).map(Vec::as_slice).unwrap_or(&[]) {
        if other == user {
            continue;
        }
        let seq = catalog.sequence(other).expect("occurrence index built from the catalog");
        let h = truncate_history(&seq.items[..pos], max_history);
        if h != history {
            return (other.to_string(), h.to_vec());
        }
    }
    (user.to_string(), history.to_vec())
}

#[derive(Clone, Debug, Default)]
pub struct SentimentOutput {
    pub positive: AxisOutput,
    pub negative: AxisOutput,
    /// Inverted texts in emission order, with the negative preference they came from.
    pub inversions: Vec<(String, String)>,
}

/// Pairs every negative preference with a negatively reviewed item from the
/// history it was generated from, and emits it together with its inversion.
/// Twins take the split of the preference set's position, so the set generated
/// for a user's held-out item yields test twins.
pub fn build_sentiment_pairs(
    catalog: &Catalog,
    sets: &PreferenceMap,
    emb: &BenchmarkEmbeddings<'_>,
    inversion: InversionStyle,
) -> Result<SentimentOutput> {
    let mut out = SentimentOutput::default();
    let mut seen: BTreeSet<(String, String, String)> = BTreeSet::new();
    for ((user, t), set) in sets {
        let Some(seq) = catalog.sequence(user) else {
            out.negative.skipped += set.preferences.iter().filter(|p| is_negative(p)).count();
            continue;
        };
        let window = (*t).min(seq.len());
        let candidates: Vec<usize> = (0..window)
            .filter(|&i| seq.sentiments[i] == Some(Sentiment::Negative))
            .collect();
        for (idx, p) in set.preferences.iter().enumerate() {
            if !is_negative(p) {
                continue;
            }
            let pos = match candidates.as_slice() {
                [] => {
                    out.negative.skipped += 1;
                    continue;
                }
                [only] => *only,
                many => {
                    let reviews = emb.reviews.ok_or_else(|| Error::MissingEmbedding {
                        namespace: "review".into(),
                        key: review_key(user, many[0]),
                    })?;
                    let pv = emb.prefs.require("preference", p)?;
                    let mut best: Option<(usize, f64)> = None;
                    for &i in many {
                        let rv = reviews.require("review", &review_key(user, i))?;
                        let c = cosine(pv, rv).ok_or_else(|| Error::ZeroNorm { id: review_key(user, i) })?;
                        if best.is_none_or(|(_, b)| c > b) {
                            best = Some((i, c));
                        }
                    }
                    best.expect("at least two candidates").0
                }
            };
            let target = &seq.items[pos];
            if !seen.insert((user.clone(), p.clone(), target.clone())) {
                continue;
            }
            let split = Split::of_position(*t, seq.len());
            let pair = format!("{user}:{t}:{idx}");
            let inverted = invert_negative_preference(p, inversion)?;
            let mut neg = EvalInstance::new(Axis::SentimentNeg, split, user, pos, vec![p.clone()], &[], target);
            neg.pair_id = Some(pair.clone());
            let mut pos_twin = EvalInstance::new(Axis::SentimentPos, split, user, pos, vec![inverted.clone()], &[], target);
            pos_twin.pair_id = Some(pair);
            out.inversions.push((inverted, p.clone()));
            out.negative.instances.push(neg);
            out.positive.instances.push(pos_twin);
        }
    }
    Ok(out)
}

fn is_negative(p: &str) -> bool {
    classify_preference_sentiment(p) == Sentiment::Negative
}

/// One instance per test example carrying all five preferences of the last set.
pub fn build_history_consolidation(split: &[SplitExample], sets: &PreferenceMap, max_history: usize) -> AxisOutput {
    let mut out = AxisOutput::default();
    for ex in split {
        match sets.get(&(ex.user.clone(), ex.position)) {
            Some(set) if set.preferences.len() == PREFERENCES_PER_SET => out.instances.push(EvalInstance::new(
                Axis::Consolidation,
                Split::Test,
                &ex.user,
                ex.position,
                set.preferences.clone(),
                truncate_history(&ex.history, max_history),
                &ex.target,
            )),
            _ => out.skipped += 1,
        }
    }
    out
}

/// Runs every builder and assembles a suite with its manifest and embeddings.
pub fn build_benchmark(
    catalog: &Catalog,
    sets: &PreferenceMap,
    emb: &BenchmarkEmbeddings<'_>,
    sids: Option<&SidMap>,
    config: &BuildConfig,
) -> Result<BenchmarkSuite> {
    if catalog.items.len() < 2 {
        return Err(Error::InvalidArgument("benchmark needs at least two items".into()));
    }
    let split = leave_last_out(catalog);
    let mut counts: BTreeMap<Axis, AxisCounts> = BTreeMap::new();
    let mut instances = Vec::new();
    let mut record = |axis: Axis, out: AxisOutput, instances: &mut Vec<EvalInstance>| {
        let c = counts.entry(axis).or_default();
        c.skipped += out.skipped;
        for inst in out.instances {
            c.add(inst.split);
            instances.push(inst);
        }
    };

    for tag in Split::ALL {
        let out = build_recommendation_split(split.get(tag), sets, emb, config.max_history, tag)?;
        record(Axis::Recommendation, out, &mut instances);
    }
    let pool = preference_pool(sets);
    let fc = build_fine_coarse(catalog, &split, &pool, emb, config.max_history)?;
    record(Axis::Fine, fc.fine, &mut instances);
    record(Axis::Coarse, fc.coarse, &mut instances);
    let sentiment = build_sentiment_pairs(catalog, sets, emb, config.inversion)?;
    let inversions = sentiment.inversions;
    record(Axis::SentimentNeg, sentiment.negative, &mut instances);
    record(Axis::SentimentPos, sentiment.positive, &mut instances);
    record(
        Axis::Consolidation,
        build_history_consolidation(&split.test, sets, config.max_history),
        &mut instances,
    );
    instances.sort_by(|a, b| (a.axis, &a.user, a.t).cmp(&(b.axis, &b.user, b.t)));

    // Preference embeddings the suite needs, plus aliases for inverted texts.
    let referenced: BTreeSet<&String> = instances.iter().flat_map(|i| &i.preferences).collect();
    let mut known = Vec::new();
    let mut aliases = BTreeMap::new();
    for (inverted, negative) in &inversions {
        if emb.prefs.get(inverted).is_none() {
            aliases.entry(inverted.clone()).or_insert_with(|| negative.clone());
        }
    }
    for p in &referenced {
        if !aliases.contains_key(*p) {
            known.push((*p).clone());
        }
    }
    let mut extra = Vec::new();
    for (inverted, negative) in &aliases {
        extra.push((inverted.clone(), emb.prefs.require("preference", negative)?.to_vec()));
    }
    let pref_embeddings = emb.prefs.subset(&known)?.extended(extra)?;
    let item_ids: Vec<&String> = catalog.items.iter().collect();
    let item_embeddings = emb.items.subset(&item_ids)?;

    let manifest = SuiteManifest {
        catalog_digest: catalog.digest(),
        item_embeddings_digest: item_embeddings.digest(),
        pref_embeddings_digest: pref_embeddings.digest(),
        review_embeddings_digest: emb.reviews.map(EmbeddingMatrix::digest),
        sid_map_digest: sids.map(SidMap::digest),
        suite_digest: codec::sha256_hex(&instances_jsonl(&instances)?),
        config: Some(*config),
        counts,
        aliased_inversions: aliases.len(),
        pool_size: pool.len(),
    };
    Ok(BenchmarkSuite {
        instances,
        manifest,
        item_embeddings,
        pref_embeddings,
        sids: sids.cloned(),
    })
}

fn instances_jsonl(instances: &[EvalInstance]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.push(b'\n');
    }
    Ok(out)
}

impl BenchmarkSuite {
    pub fn axis(&self, axis: Axis) -> impl Iterator<Item = &EvalInstance> {
        self.instances.iter().filter(move |i| i.axis == axis)
    }

    pub fn digest(&self) -> &str {
        &self.manifest.suite_digest
    }

    /// Writes the suite JSONL, manifest, embeddings and sid map (if any) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        codec::write_file(&dir.join(SUITE_FILE), &instances_jsonl(&self.instances)?)?;
        let mut manifest = serde_json::to_vec_pretty(&self.manifest)?;
        manifest.push(b'\n');
        codec::write_file(&dir.join(MANIFEST_FILE), &manifest)?;
        self.item_embeddings.save(&dir.join(ITEM_EMBEDDINGS_FILE))?;
        self.pref_embeddings.save(&dir.join(PREF_EMBEDDINGS_FILE))?;
        if let Some(s) = &self.sids {
            s.save(&dir.join(SID_MAP_FILE))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = codec::read_file(&dir.join(SUITE_FILE))?;
        let text = String::from_utf8_lossy(&bytes);
        let mut instances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            instances.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        let manifest: SuiteManifest = serde_json::from_slice(&codec::read_file(&dir.join(MANIFEST_FILE))?)?;
        if codec::sha256_hex(&bytes) != manifest.suite_digest {
            return Err(Error::DigestMismatch(format!("{} does not match its manifest", SUITE_FILE)));
        }
        let sid_path = dir.join(SID_MAP_FILE);
        let sids = if sid_path.exists() { Some(SidMap::load(&sid_path)?) } else { None };
        Ok(Self {
            instances,
            manifest,
            item_embeddings: load_embeddings(&dir.join(ITEM_EMBEDDINGS_FILE))?,
            pref_embeddings: load_embeddings(&dir.join(PREF_EMBEDDINGS_FILE))?,
            sids,
        })
    }
}
