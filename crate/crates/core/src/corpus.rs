//! Interaction logs: ingestion, k-core filtering, leave-last-out splitting.
//!
//! A [`Catalog`] holds one time-ordered [`UserSequence`] per user. Catalogs are
//! immutable once built; every transformation returns a new catalog.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian as LE, WriteBytesExt};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, sha256_hex};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"PDCAT";
const VERSION: u16 = 1;
const KIND: &str = "catalog";

/// Histories fed to models are capped at the most recent 20 items.
pub const DEFAULT_MAX_HISTORY: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" => Ok(Sentiment::Positive),
            "negative" | "neg" => Ok(Sentiment::Negative),
            other => Err(format!("unknown sentiment label `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
    pub review: Option<String>,
    pub rating: Option<f64>,
    pub review_sentiment: Option<Sentiment>,
    /// Optional human-readable item description carried alongside the record.
    pub title: Option<String>,
}

impl InteractionRecord {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
            review: None,
            rating: None,
            review_sentiment: None,
            title: None,
        }
    }
}

/// One user's interactions in ascending timestamp order. All vectors are parallel.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
    pub reviews: Vec<Option<String>>,
    pub ratings: Vec<Option<f64>>,
    pub sentiments: Vec<Option<Sentiment>>,
}

impl UserSequence {
    fn empty(user: &str) -> Self {
        Self {
            user: user.to_string(),
            items: Vec::new(),
            timestamps: Vec::new(),
            reviews: Vec::new(),
            ratings: Vec::new(),
            sentiments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn push(&mut self, r: &InteractionRecord) {
        self.items.push(r.item.clone());
        self.timestamps.push(r.timestamp);
        self.reviews.push(r.review.clone());
        self.ratings.push(r.rating);
        self.sentiments.push(r.review_sentiment);
    }

    fn retain_positions(&self, keep: impl Fn(usize) -> bool) -> Self {
        let mut out = UserSequence::empty(&self.user);
        for i in (0..self.len()).filter(|&i| keep(i)) {
            out.items.push(self.items[i].clone());
            out.timestamps.push(self.timestamps[i]);
            out.reviews.push(self.reviews[i].clone());
            out.ratings.push(self.ratings[i]);
            out.sentiments.push(self.sentiments[i]);
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_digest: String,
    /// Minimum interactions per user/item enforced by the last k-core pass (0 = unfiltered).
    pub min_user_interactions: u32,
    pub min_item_interactions: u32,
    pub filter_rounds: u32,
    pub subsample: Option<Subsample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsample {
    pub users: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub sequences: BTreeMap<String, UserSequence>,
    pub items: BTreeSet<String>,
    pub titles: BTreeMap<String, String>,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputFormat {
    Jsonl,
    Tsv,
}

impl FromStr for InputFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "jsonl" => Ok(InputFormat::Jsonl),
            "tsv" => Ok(InputFormat::Tsv),
            other => Err(format!("unknown input format `{other}` (expected jsonl or tsv)")),
        }
    }
}

/// Raw Amazon review dumps parse too, via their `reviewerID`/`asin`/`unixReviewTime` keys.
#[derive(Deserialize)]
struct JsonRecord {
    #[serde(alias = "reviewerID")]
    user: Option<serde_json::Value>,
    #[serde(alias = "asin")]
    item: Option<serde_json::Value>,
    #[serde(alias = "unixReviewTime")]
    ts: Option<serde_json::Value>,
    #[serde(alias = "reviewText")]
    review: Option<String>,
    #[serde(alias = "overall")]
    rating: Option<f64>,
    sentiment: Option<String>,
    title: Option<String>,
}

fn id_field(v: Option<serde_json::Value>, name: &str, line: usize) -> Result<String> {
    let s = match v {
        Some(serde_json::Value::String(s)) => s,
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(_) => return Err(parse_err(line, format!("field `{name}` must be a string"))),
        None => return Err(parse_err(line, format!("missing field `{name}`"))),
    };
    if s.is_empty() {
        return Err(parse_err(line, format!("field `{name}` is empty")));
    }
    Ok(s)
}

fn parse_ts(s: &str, line: usize) -> Result<i64> {
    s.trim()
        .parse::<i64>()
        .map_err(|_| parse_err(line, format!("timestamp `{s}` is not an integer")))
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_jsonl_line(text: &str, line: usize) -> Result<InteractionRecord> {
    let raw: JsonRecord =
        serde_json::from_str(text).map_err(|e| parse_err(line, format!("invalid JSON: {e}")))?;
    let timestamp = match raw.ts {
        Some(serde_json::Value::Number(n)) => n
            .as_i64()
            .ok_or_else(|| parse_err(line, "timestamp must be an integer"))?,
        Some(serde_json::Value::String(s)) => parse_ts(&s, line)?,
        Some(_) => return Err(parse_err(line, "timestamp must be an integer")),
        None => return Err(parse_err(line, "missing field `ts`")),
    };
    let review_sentiment = raw
        .sentiment
        .as_deref()
        .map(Sentiment::from_str)
        .transpose()
        .map_err(|m| parse_err(line, m))?;
    Ok(InteractionRecord {
        user: id_field(raw.user, "user", line)?,
        item: id_field(raw.item, "item", line)?,
        timestamp,
        review: raw.review,
        rating: raw.rating,
        review_sentiment,
        title: raw.title,
    })
}

/// TSV columns: user, item, ts, [review], [rating], [sentiment]. Empty cells are absent values.
fn parse_tsv_line(text: &str, line: usize) -> Result<InteractionRecord> {
    let cols: Vec<&str> = text.split('\t').collect();
    if cols.len() < 3 {
        return Err(parse_err(line, format!("expected at least 3 columns, found {}", cols.len())));
    }
    let nonempty = |i: usize| cols.get(i).map(|c| c.trim()).filter(|c| !c.is_empty());
    let user = nonempty(0).ok_or_else(|| parse_err(line, "empty user"))?;
    let item = nonempty(1).ok_or_else(|| parse_err(line, "empty item"))?;
    let ts = nonempty(2).ok_or_else(|| parse_err(line, "missing timestamp"))?;
    let rating = nonempty(4)
        .map(|r| r.parse::<f64>().map_err(|_| parse_err(line, format!("bad rating `{r}`"))))
        .transpose()?;
    let review_sentiment = nonempty(5)
        .map(Sentiment::from_str)
        .transpose()
        .map_err(|m| parse_err(line, m))?;
    Ok(InteractionRecord {
        user: user.to_string(),
        item: item.to_string(),
        timestamp: parse_ts(ts, line)?,
        review: cols.get(3).filter(|c| !c.is_empty()).map(|c| c.to_string()),
        rating,
        review_sentiment,
        title: None,
    })
}

/// Reads a JSONL or TSV interaction log into a catalog.
///
/// JSONL records use the keys `user`, `item`, `ts`, `review`, `rating`, `sentiment`
/// and optionally `title`. A TSV header row is skipped when its third column reads
/// `ts` or `timestamp`.
pub fn ingest_interactions(path: &Path, format: InputFormat) -> Result<Catalog> {
    let bytes = codec::read_file(path)?;
    let digest = sha256_hex(&bytes);
    let reader = BufReader::new(Cursor::new(bytes));
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line.map_err(|e| parse_err(line_no, e.to_string()))?;
        let text = text.trim_end_matches('\r');
        if text.trim().is_empty() {
            continue;
        }
        let record = match format {
            InputFormat::Jsonl => parse_jsonl_line(text, line_no)?,
            InputFormat::Tsv => {
                if line_no == 1 {
                    let third = text.split('\t').nth(2).unwrap_or("").trim();
                    if third.eq_ignore_ascii_case("ts") || third.eq_ignore_ascii_case("timestamp") {
                        continue;
                    }
                }
                parse_tsv_line(text, line_no)?
            }
        };
        records.push(record);
    }
    Catalog::from_records(records, digest)
}

impl Catalog {
    /// Builds a catalog from records in input order. Sorting is stable by timestamp;
    /// duplicate `(user, item, timestamp)` triples keep their first occurrence.
    pub fn from_records(
        records: impl IntoIterator<Item = InteractionRecord>,
        source_digest: impl Into<String>,
    ) -> Result<Self> {
        let mut seen: HashSet<(String, String, i64)> = HashSet::new();
        let mut per_user: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
        let mut titles = BTreeMap::new();
        for r in records {
            if r.user.is_empty() || r.item.is_empty() {
                return Err(Error::InvalidArgument("user and item must be non-empty".into()));
            }
            if !seen.insert((r.user.clone(), r.item.clone(), r.timestamp)) {
                continue;
            }
            if let Some(t) = &r.title {
                titles.entry(r.item.clone()).or_insert_with(|| t.clone());
            }
            per_user.entry(r.user.clone()).or_default().push(r);
        }
        if per_user.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut sequences = BTreeMap::new();
        let mut items = BTreeSet::new();
        for (user, mut recs) in per_user {
            recs.sort_by_key(|r| r.timestamp);
            let mut seq = UserSequence::empty(&user);
            for r in &recs {
                items.insert(r.item.clone());
                seq.push(r);
            }
            sequences.insert(user, seq);
        }
        Ok(Catalog {
            sequences,
            items,
            titles,
            provenance: Provenance {
                source_digest: source_digest.into(),
                ..Provenance::default()
            },
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.values().map(UserSequence::len).sum()
    }

    pub fn sequence(&self, user: &str) -> Option<&UserSequence> {
        self.sequences.get(user)
    }

    /// Display text for an item: its title when known, else the id.
    pub fn item_info<'a>(&'a self, item: &'a str) -> &'a str {
        self.titles.get(item).map(String::as_str).unwrap_or(item)
    }

    fn rebuild(&self, sequences: BTreeMap<String, UserSequence>, provenance: Provenance) -> Self {
        let items: BTreeSet<String> = sequences
            .values()
            .flat_map(|s| s.items.iter().cloned())
            .collect();
        let titles = self
            .titles
            .iter()
            .filter(|(k, _)| items.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Catalog {
            sequences,
            items,
            titles,
            provenance,
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_to(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LE>(VERSION)?;
        let p = &self.provenance;
        codec::write_str32(w, &p.source_digest)?;
        w.write_u32::<LE>(p.min_user_interactions)?;
        w.write_u32::<LE>(p.min_item_interactions)?;
        w.write_u32::<LE>(p.filter_rounds)?;
        match p.subsample {
            Some(s) => {
                w.write_u8(1)?;
                w.write_u64::<LE>(s.users)?;
                w.write_u64::<LE>(s.seed)?;
            }
            None => w.write_u8(0)?,
        }
        w.write_u32::<LE>(self.titles.len() as u32)?;
        for (item, title) in &self.titles {
            codec::write_str32(w, item)?;
            codec::write_str32(w, title)?;
        }
        w.write_u32::<LE>(self.sequences.len() as u32)?;
        for seq in self.sequences.values() {
            codec::write_str32(w, &seq.user)?;
            w.write_u32::<LE>(seq.len() as u32)?;
            for i in 0..seq.len() {
                codec::write_str32(w, &seq.items[i])?;
                w.write_i64::<LE>(seq.timestamps[i])?;
                codec::write_opt_str32(w, seq.reviews[i].as_deref())?;
                match seq.ratings[i] {
                    Some(r) => {
                        w.write_u8(1)?;
                        w.write_f64::<LE>(r)?;
                    }
                    None => w.write_u8(0)?,
                }
                w.write_u8(match seq.sentiments[i] {
                    None => 0,
                    Some(Sentiment::Positive) => 1,
                    Some(Sentiment::Negative) => 2,
                })?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = &mut Cursor::new(bytes);
        codec::expect_magic(r, MAGIC, KIND)?;
        let version = codec::read_u16(r, KIND)?;
        if version != VERSION {
            return Err(Error::format(KIND, format!("unsupported version {version}")));
        }
        let source_digest = codec::read_str32(r, KIND)?;
        let min_user_interactions = codec::read_u32(r, KIND)?;
        let min_item_interactions = codec::read_u32(r, KIND)?;
        let filter_rounds = codec::read_u32(r, KIND)?;
        let subsample = match codec::read_u8(r, KIND)? {
            0 => None,
            _ => Some(Subsample {
                users: codec::read_u64(r, KIND)?,
                seed: codec::read_u64(r, KIND)?,
            }),
        };
        let n_titles = codec::read_u32(r, KIND)?;
        let mut titles = BTreeMap::new();
        for _ in 0..n_titles {
            let item = codec::read_str32(r, KIND)?;
            titles.insert(item, codec::read_str32(r, KIND)?);
        }
        let n_users = codec::read_u32(r, KIND)?;
        let mut sequences = BTreeMap::new();
        let mut items = BTreeSet::new();
        for _ in 0..n_users {
            let user = codec::read_str32(r, KIND)?;
            let len = codec::read_u32(r, KIND)? as usize;
            if len == 0 {
                return Err(Error::format(KIND, format!("empty sequence for user `{user}`")));
            }
            let mut seq = UserSequence::empty(&user);
            for _ in 0..len {
                let item = codec::read_str32(r, KIND)?;
                items.insert(item.clone());
                seq.items.push(item);
                seq.timestamps.push(codec::read_i64(r, KIND)?);
                seq.reviews.push(codec::read_opt_str32(r, KIND)?);
                seq.ratings.push(match codec::read_u8(r, KIND)? {
                    0 => None,
                    _ => Some(codec::read_f64(r, KIND)?),
                });
                seq.sentiments.push(match codec::read_u8(r, KIND)? {
                    0 => None,
                    1 => Some(Sentiment::Positive),
                    2 => Some(Sentiment::Negative),
                    t => return Err(Error::format(KIND, format!("bad sentiment tag {t}"))),
                });
            }
            sequences.insert(user, seq);
        }
        Ok(Catalog {
            sequences,
            items,
            titles,
            provenance: Provenance {
                source_digest,
                min_user_interactions,
                min_item_interactions,
                filter_rounds,
                subsample,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

/// Iterated k-core filter: each round drops users with fewer than `min_user`
/// interactions, then items with fewer than `min_item` occurrences, until a
/// round removes nothing.
pub fn k_core_filter(catalog: &Catalog, min_user: usize, min_item: usize) -> Result<Catalog> {
    if catalog.sequences.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let mut sequences = catalog.sequences.clone();
    let mut rounds = 0usize;
    loop {
        rounds += 1;
        let before_users = sequences.len();
        sequences.retain(|_, s| s.len() >= min_user);
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for s in sequences.values() {
            for it in &s.items {
                *item_counts.entry(it.as_str()).or_default() += 1;
            }
        }
        let rare: HashSet<String> = item_counts
            .iter()
            .filter(|(_, &c)| c < min_item)
            .map(|(k, _)| k.to_string())
            .collect();
        let changed = sequences.len() != before_users || !rare.is_empty();
        if !rare.is_empty() {
            for s in sequences.values_mut() {
                if s.items.iter().any(|i| rare.contains(i)) {
                    *s = s.retain_positions(|p| !rare.contains(&s.items[p]));
                }
            }
            sequences.retain(|_, s| !s.is_empty());
        }
        if sequences.is_empty() {
            return Err(Error::EmptyAfterFilter { iterations: rounds });
        }
        if !changed {
            break;
        }
    }
    let provenance = Provenance {
        min_user_interactions: min_user as u32,
        min_item_interactions: min_item as u32,
        filter_rounds: rounds as u32,
        ..catalog.provenance.clone()
    };
    Ok(catalog.rebuild(sequences, provenance))
}

/// User and item 5-core filtering.
pub fn five_core_filter(catalog: &Catalog) -> Result<Catalog> {
    k_core_filter(catalog, 5, 5)
}

/// Keeps a seeded uniform sample of `users` users (all of them if fewer exist).
pub fn subsample_users(catalog: &Catalog, users: usize, seed: u64) -> Catalog {
    let ids: Vec<&String> = catalog.sequences.keys().collect();
    let keep: BTreeSet<&String> = if users >= ids.len() {
        ids.iter().copied().collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, ids.len(), users)
            .into_iter()
            .map(|i| ids[i])
            .collect()
    };
    let sequences = catalog
        .sequences
        .iter()
        .filter(|(u, _)| keep.contains(u))
        .map(|(u, s)| (u.clone(), s.clone()))
        .collect();
    let provenance = Provenance {
        subsample: Some(Subsample {
            users: users as u64,
            seed,
        }),
        ..catalog.provenance.clone()
    };
    catalog.rebuild(sequences, provenance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Split of the target at `position` in a sequence of length `len`.
    pub fn of_position(position: usize, len: usize) -> Split {
        if position + 1 == len {
            Split::Test
        } else if position + 2 == len {
            Split::Val
        } else {
            Split::Train
        }
    }
}

/// A next-item prediction target: predict `target` (at `position`) from `history`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitExample {
    pub user: String,
    pub position: usize,
    pub history: Vec<String>,
    pub target: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<SplitExample>,
    pub val: Vec<SplitExample>,
    pub test: Vec<SplitExample>,
    /// Users whose sequences were too short to yield a val and a test target.
    pub skipped_short: usize,
}

impl DatasetSplit {
    pub fn get(&self, split: Split) -> &[SplitExample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Minimum sequence length for leave-last-out: first item (never a target), val, test.
pub const MIN_SPLIT_LEN: usize = 3;

/// Leave-last-out: last item is the test target, the penultimate the validation
/// target, and every other item except the first is a training target.
pub fn leave_last_out(catalog: &Catalog) -> DatasetSplit {
    let mut out = DatasetSplit::default();
    for seq in catalog.sequences.values() {
        let n = seq.len();
        if n < MIN_SPLIT_LEN {
            log::warn!("user `{}` has {n} interactions; skipped in split", seq.user);
            out.skipped_short += 1;
            continue;
        }
        for position in 1..n {
            let example = SplitExample {
                user: seq.user.clone(),
                position,
                history: seq.items[..position].to_vec(),
                target: seq.items[position].clone(),
            };
            match Split::of_position(position, n) {
                Split::Train => out.train.push(example),
                Split::Val => out.val.push(example),
                Split::Test => out.test.push(example),
            }
        }
    }
    out
}

/// The `max_len` most recent entries of `history`, in order.
pub fn truncate_history<T>(history: &[T], max_len: usize) -> &[T] {
    &history[history.len().saturating_sub(max_len)..]
}

/// Writes records as JSONL in the ingestion schema.
pub fn write_interactions_jsonl(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        let mut obj = serde_json::Map::new();
        obj.insert("user".into(), r.user.clone().into());
        obj.insert("item".into(), r.item.clone().into());
        obj.insert("ts".into(), r.timestamp.into());
        if let Some(v) = &r.review {
            obj.insert("review".into(), v.clone().into());
        }
        if let Some(v) = r.rating {
            obj.insert("rating".into(), v.into());
        }
        if let Some(v) = r.review_sentiment {
            obj.insert("sentiment".into(), serde_json::to_value(v)?);
        }
        if let Some(v) = &r.title {
            obj.insert("title".into(), v.clone().into());
        }
        serde_json::to_writer(&mut out, &obj)?;
        out.push(b'\n');
    }
    codec::write_file(path, &out)
}
