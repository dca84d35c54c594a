//! Reference recommenders over semantic IDs and the contract the evaluation
//! harness drives them through.
//!
//! [`MarkovSidModel`] is an order-n model over the flattened code stream of a
//! user's history. [`FusionModel`] reranks its beam with cosine similarity to
//! the user's stated preferences. Anything else that can score next codes can
//! be plugged in with [`CodeScorer`], including an external process speaking
//! the line protocol of [`SubprocessScorer`].

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use byteorder::{LittleEndian as LE, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::corpus::{Catalog, Sentiment};
use crate::embedding::{cosine, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::quantizer::{SemanticId, SidMap};
use crate::sid_index::{build_trie, constrained_beam_search, CodeScorer, SidTrie};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_NEGATIVE_PENALTY: f64 = 1.0;

const MAGIC: &[u8] = b"PDMK";
const VERSION: u16 = 1;
const KIND: &str = "model";

/// What a model is conditioned on for one request.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScorerContext {
    pub history: Vec<SemanticId>,
    pub preferences: Vec<(Vec<f32>, Sentiment)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceInput {
    pub text: String,
    pub sentiment: Sentiment,
    pub embedding: Vec<f32>,
}

/// A recommendation request in item space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Query {
    /// Item ids, oldest first, already truncated by the caller.
    pub history: Vec<String>,
    pub preferences: Vec<PreferenceInput>,
}

impl Query {
    pub fn context(&self, sids: &SidMap) -> Result<ScorerContext> {
        Ok(ScorerContext {
            history: self
                .history
                .iter()
                .map(|i| sids.require(i).cloned())
                .collect::<Result<_>>()?,
            preferences: self
                .preferences
                .iter()
                .map(|p| (p.embedding.clone(), p.sentiment))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub item: String,
    pub score: f64,
    /// Log-probability under the sequential model (uniform prior without history).
    pub base_score: f64,
    /// Cosine to each query preference, in request order. Empty for unconditioned models.
    pub similarities: Vec<f64>,
}

/// A model the harness can evaluate.
pub trait Recommender: Send + Sync {
    fn name(&self) -> &str;
    fn sid_map(&self) -> &SidMap;
    fn recommend(&self, query: &Query, k: usize, beam_width: usize) -> Result<Vec<Ranked>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSidModel {
    pub order: usize,
    pub alpha: f64,
    pub n_levels: usize,
    pub k: usize,
    /// Context window of flattened tokens → next token → count, for every window length 1..=order.
    counts: BTreeMap<Vec<u32>, BTreeMap<u32, u64>>,
}

impl MarkovSidModel {
    /// Code `code` at depth `depth` as a single token.
    pub fn token(&self, depth: usize, code: u32) -> u32 {
        (depth * self.k) as u32 + code
    }

    fn stream(&self, sids: &[SemanticId]) -> Vec<u32> {
        sids.iter()
            .flat_map(|s| s.codes.iter().enumerate().map(|(d, &c)| self.token(d, c)))
            .collect()
    }

    pub fn count(&self, context: &[u32], next: u32) -> u64 {
        self.counts.get(context).and_then(|m| m.get(&next)).copied().unwrap_or(0)
    }

    pub fn num_contexts(&self) -> usize {
        self.counts.len()
    }

    /// Smoothed log-probabilities of `children` at depth `prefix.len()`, renormalized
    /// over the children. Backs off to shorter contexts while the current one is
    /// unseen; `None` (uniform) when no context was ever seen or at the
    /// disambiguator level.
    pub fn logits(&self, history: &[SemanticId], prefix: &[u32], children: &[u32]) -> Option<Vec<f64>> {
        let depth = prefix.len();
        if depth >= self.n_levels || children.is_empty() {
            return None;
        }
        let keep = self.order.div_ceil(self.n_levels.max(1)) + 1;
        let recent = &history[history.len().saturating_sub(keep)..];
        let mut stream = self.stream(recent);
        stream.extend(prefix.iter().enumerate().map(|(d, &c)| self.token(d, c)));
        for len in (1..=self.order.min(stream.len())).rev() {
            if let Some(next) = self.counts.get(&stream[stream.len() - len..]) {
                let w: Vec<f64> = children
                    .iter()
                    .map(|&c| next.get(&self.token(depth, c)).copied().unwrap_or(0) as f64 + self.alpha)
                    .collect();
                let total: f64 = w.iter().sum();
                return Some(w.iter().map(|x| (x / total).ln()).collect());
            }
        }
        None
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_u32::<LE>(self.order as u32)?;
        w.write_f64::<LE>(self.alpha)?;
        w.write_u32::<LE>(self.n_levels as u32)?;
        w.write_u32::<LE>(self.k as u32)?;
        w.write_u64::<LE>(self.counts.len() as u64)?;
        for (ctx, next) in &self.counts {
            w.write_u8(ctx.len() as u8)?;
            for &t in ctx {
                w.write_u32::<LE>(t)?;
            }
            w.write_u32::<LE>(next.len() as u32)?;
            for (&t, &c) in next {
                w.write_u32::<LE>(t)?;
                w.write_u64::<LE>(c)?;
            }
        }
        Ok(())
    }

    fn read_from(r: &mut Cursor<&[u8]>) -> Result<Self> {
        let order = codec::read_u32(r, KIND)? as usize;
        let alpha = codec::read_f64(r, KIND)?;
        let n_levels = codec::read_u32(r, KIND)? as usize;
        let k = codec::read_u32(r, KIND)? as usize;
        let n = codec::read_u64(r, KIND)?;
        let mut counts = BTreeMap::new();
        for _ in 0..n {
            let len = codec::read_u8(r, KIND)? as usize;
            let ctx = (0..len).map(|_| codec::read_u32(r, KIND)).collect::<Result<Vec<_>>>()?;
            let m = codec::read_u32(r, KIND)?;
            let mut next = BTreeMap::new();
            for _ in 0..m {
                next.insert(codec::read_u32(r, KIND)?, codec::read_u64(r, KIND)?);
            }
            counts.insert(ctx, next);
        }
        Ok(Self {
            order,
            alpha,
            n_levels,
            k,
            counts,
        })
    }
}

impl CodeScorer for MarkovSidModel {
    type Context = ScorerContext;

    fn next_code_logits(&self, prefix: &[u32], children: &[u32], context: &ScorerContext) -> Result<Option<Vec<f64>>> {
        Ok(self.logits(&context.history, prefix, children))
    }
}

/// Counts every window of 1..=`order` tokens preceding each token of each sequence.
pub fn train_markov(sequences: &[Vec<SemanticId>], n_levels: usize, k: usize, order: usize, alpha: f64) -> Result<MarkovSidModel> {
    if sequences.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("no training sequences".into()));
    }
    if order == 0 || !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("need order ≥ 1 and alpha > 0, got {order} and {alpha}")));
    }
    let mut model = MarkovSidModel {
        order,
        alpha,
        n_levels,
        k,
        counts: BTreeMap::new(),
    };
    for seq in sequences {
        if let Some(bad) = seq.iter().find(|s| s.codes.len() != n_levels || s.codes.iter().any(|&c| c as usize >= k)) {
            return Err(Error::InvalidArgument(format!("semantic id {bad} does not fit {n_levels} levels of {k}")));
        }
        let stream = model.stream(seq);
        for i in 1..stream.len() {
            for len in 1..=order.min(i) {
                *model
                    .counts
                    .entry(stream[i - len..i].to_vec())
                    .or_default()
                    .entry(stream[i])
                    .or_default() += 1;
            }
        }
    }
    Ok(model)
}

/// Training portion of every split-eligible user sequence (all but the last two items).
pub fn training_sequences(catalog: &Catalog, sids: &SidMap) -> Result<Vec<Vec<SemanticId>>> {
    catalog
        .sequences
        .values()
        .filter(|s| s.items.len() >= crate::corpus::MIN_SPLIT_LEN)
        .map(|s| {
            s.items[..s.items.len() - 2]
                .iter()
                .map(|i| sids.require(i).cloned())
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub base: MarkovSidModel,
    pub lambda: f64,
    pub negative_penalty: f64,
}

impl FusionModel {
    pub fn new(base: MarkovSidModel, lambda: f64, negative_penalty: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite() && negative_penalty >= 0.0 && negative_penalty.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda and negative_penalty must be finite and ≥ 0, got {lambda} and {negative_penalty}"
            )));
        }
        Ok(Self {
            base,
            lambda,
            negative_penalty,
        })
    }
}

fn by_score(a: &Ranked, b: &Ranked) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.item.cmp(&b.item))
}

/// Reranks base-model candidates by
/// `base + lambda·Σ_pos cos(p, item) − negative_penalty·Σ_neg cos(p, item)`.
///
/// Candidates are the beam's top `beam_width` items, or every item under a
/// uniform prior when the history is empty.
pub fn fusion_recommend(
    model: &FusionModel,
    trie: &SidTrie,
    items: &EmbeddingMatrix,
    context: &ScorerContext,
    k: usize,
    beam_width: usize,
) -> Result<Vec<Ranked>> {
    if k == 0 || k > beam_width {
        return Err(Error::InvalidArgument(format!("need 1 ≤ k ≤ beam_width, got k={k} beam_width={beam_width}")));
    }
    let candidates: Vec<(String, f64)> = if context.history.is_empty() {
        let leaves = trie.leaves();
        let prior = -(leaves.len() as f64).ln();
        leaves.into_iter().map(|(_, item)| (item, prior)).collect()
    } else {
        constrained_beam_search(&model.base, trie, context, beam_width, beam_width)?
            .into_iter()
            .map(|h| (h.item, h.log_score))
            .collect()
    };
    let mut ranked = candidates
        .into_iter()
        .map(|(item, base)| {
            let v = items.require("item", &item)?;
            let mut score = base;
            let mut similarities = Vec::with_capacity(context.preferences.len());
            for (p, sentiment) in &context.preferences {
                let c = cosine(p, v).ok_or_else(|| Error::ZeroNorm { id: item.clone() })?;
                similarities.push(c);
                score += match sentiment {
                    Sentiment::Positive => model.lambda * c,
                    Sentiment::Negative => -model.negative_penalty * c,
                };
            }
            Ok(Ranked {
                item,
                score,
                base_score: base,
                similarities,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(by_score);
    ranked.truncate(k);
    Ok(ranked)
}

/// Any [`CodeScorer`] over [`ScorerContext`] decoded with constrained beam search.
pub struct BeamRecommender<S> {
    name: String,
    scorer: S,
    sids: SidMap,
    trie: SidTrie,
}

impl<S> BeamRecommender<S>
where
    S: CodeScorer<Context = ScorerContext> + Send + Sync,
{
    pub fn new(name: impl Into<String>, scorer: S, sids: SidMap) -> Result<Self> {
        let trie = build_trie(&sids)?;
        Ok(Self {
            name: name.into(),
            scorer,
            sids,
            trie,
        })
    }

    pub fn scorer(&self) -> &S {
        &self.scorer
    }
}

impl<S> Recommender for BeamRecommender<S>
where
    S: CodeScorer<Context = ScorerContext> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn sid_map(&self) -> &SidMap {
        &self.sids
    }

    fn recommend(&self, query: &Query, k: usize, beam_width: usize) -> Result<Vec<Ranked>> {
        let ctx = query.context(&self.sids)?;
        Ok(constrained_beam_search(&self.scorer, &self.trie, &ctx, beam_width, k)?
            .into_iter()
            .map(|h| Ranked {
                item: h.item,
                score: h.log_score,
                base_score: h.log_score,
                similarities: Vec::new(),
            })
            .collect())
    }
}

pub struct FusionRecommender {
    name: String,
    model: FusionModel,
    sids: SidMap,
    trie: SidTrie,
    items: EmbeddingMatrix,
}

impl FusionRecommender {
    pub fn new(name: impl Into<String>, model: FusionModel, sids: SidMap, items: EmbeddingMatrix) -> Result<Self> {
        let trie = build_trie(&sids)?;
        Ok(Self {
            name: name.into(),
            model,
            sids,
            trie,
            items,
        })
    }

    pub fn model(&self) -> &FusionModel {
        &self.model
    }
}

impl Recommender for FusionRecommender {
    fn name(&self) -> &str {
        &self.name
    }

    fn sid_map(&self) -> &SidMap {
        &self.sids
    }

    fn recommend(&self, query: &Query, k: usize, beam_width: usize) -> Result<Vec<Ranked>> {
        let ctx = query.context(&self.sids)?;
        fusion_recommend(&self.model, &self.trie, &self.items, &ctx, k, beam_width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Markov,
    Fusion,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "markov" => Ok(ModelKind::Markov),
            "fusion" => Ok(ModelKind::Fusion),
            other => Err(format!("unknown model kind `{other}` (expected markov or fusion)")),
        }
    }
}

/// Persisted reference model: the Markov counts, fusion weights and the sid map it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub kind: ModelKind,
    pub markov: MarkovSidModel,
    pub lambda: f64,
    pub negative_penalty: f64,
    pub sids: SidMap,
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.write_u16::<LE>(VERSION).unwrap();
        w.write_u8(match self.kind {
            ModelKind::Markov => 0,
            ModelKind::Fusion => 1,
        })
        .unwrap();
        w.write_f64::<LE>(self.lambda).unwrap();
        w.write_f64::<LE>(self.negative_penalty).unwrap();
        codec::write_str32(&mut w, &self.sids.to_tsv()).unwrap();
        self.markov.write_to(&mut w).unwrap();
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = &mut Cursor::new(bytes);
        codec::expect_magic(r, MAGIC, KIND)?;
        let version = codec::read_u16(r, KIND)?;
        if version != VERSION {
            return Err(Error::format(KIND, format!("unsupported version {version}")));
        }
        let kind = match codec::read_u8(r, KIND)? {
            0 => ModelKind::Markov,
            1 => ModelKind::Fusion,
            t => return Err(Error::format(KIND, format!("unknown model tag {t}"))),
        };
        let lambda = codec::read_f64(r, KIND)?;
        let negative_penalty = codec::read_f64(r, KIND)?;
        let sids = SidMap::from_tsv(&codec::read_str32(r, KIND)?)?;
        let markov = MarkovSidModel::read_from(r)?;
        if r.position() as usize != bytes.len() {
            return Err(Error::format(KIND, "trailing bytes"));
        }
        Ok(Self {
            kind,
            markov,
            lambda,
            negative_penalty,
            sids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    pub fn digest(&self) -> String {
        codec::sha256_hex(&self.to_bytes())
    }

    /// A ready-to-query recommender. Fusion needs the item embedding matrix.
    pub fn into_recommender(self, items: Option<EmbeddingMatrix>) -> Result<Box<dyn Recommender>> {
        match self.kind {
            ModelKind::Markov => Ok(Box::new(BeamRecommender::new("markov", self.markov, self.sids)?)),
            ModelKind::Fusion => {
                let items = items.ok_or_else(|| Error::InvalidArgument("fusion model needs item embeddings".into()))?;
                let model = FusionModel::new(self.markov, self.lambda, self.negative_penalty)?;
                Ok(Box::new(FusionRecommender::new("fusion", model, self.sids, items)?))
            }
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prefix: &'a [u32],
    children: &'a [u32],
    history: Vec<Vec<u32>>,
    preferences: Vec<WirePreference<'a>>,
}

#[derive(Serialize)]
struct WirePreference<'a> {
    sentiment: Sentiment,
    embedding: &'a [f32],
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprobs: Option<Vec<f64>>,
}

/// External scorer speaking one JSON object per line over stdin/stdout.
///
/// Request: `{"prefix":[..],"children":[..],"history":[[k1,..,kN,d],..],"preferences":[{"sentiment":"positive","embedding":[..]}]}`.
/// Response: `{"logprobs":[..]}` aligned with `children`, or `{"logprobs":null}` for uniform.
pub struct SubprocessScorer {
    child: Mutex<Child>,
    io: Mutex<(ChildStdin, BufReader<ChildStdout>)>,
}

impl SubprocessScorer {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Client(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child: Mutex::new(child),
            io: Mutex::new((stdin, stdout)),
        })
    }
}

impl Drop for SubprocessScorer {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl CodeScorer for SubprocessScorer {
    type Context = ScorerContext;

    fn next_code_logits(&self, prefix: &[u32], children: &[u32], context: &ScorerContext) -> Result<Option<Vec<f64>>> {
        let request = ScoreRequest {
            prefix,
            children,
            history: context.history.iter().map(SemanticId::path).collect(),
            preferences: context
                .preferences
                .iter()
                .map(|(e, s)| WirePreference {
                    sentiment: *s,
                    embedding: e,
                })
                .collect(),
        };
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        let mut io = self.io.lock().map_err(|_| Error::Client("scorer lock poisoned".into()))?;
        io.0.write_all(line.as_bytes())?;
        io.0.flush()?;
        let mut reply = String::new();
        if io.1.read_line(&mut reply)? == 0 {
            return Err(Error::Client("scorer process closed its output".into()));
        }
        let parsed: ScoreResponse = serde_json::from_str(reply.trim()).map_err(|e| Error::ResponseParse {
            message: e.to_string(),
            raw: reply.clone(),
        })?;
        Ok(parsed.logprobs)
    }
}
