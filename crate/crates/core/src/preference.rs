//! Preference approximation scaffolding.
//!
//! For every user and timestep a prompt is rendered over the user's review
//! history, sent to an [`LlmClient`], and the reply is parsed and trimmed to
//! exactly five preferences. The prefix-rule sentiment classifier and the
//! negative-to-positive inversion used by the sentiment-following axis also
//! live here.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{self, sha256_hex};
use crate::corpus::{Catalog, Sentiment};
use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{}";
pub const PREFERENCES_PER_SET: usize = 5;
pub const DEFAULT_REVIEW_CHAR_CAP: usize = 2000;

const DEFAULT_BODY: &str = "Here is a list of items a user bought along with their respective reviews in json format: {}. Your task is to generate a list of up to five search instructions that reflect the user's preferences based on their reviews. Be specific about what the user likes, does not like, and should be avoided. Do not mention brands or certain products. Return a json file containing the search instructions with the key 'instructions'. Keep the instructions simple, short and concise, and do NOT include comments on delivery time or pricing.";

const ABSTRACT_BODY: &str = "Here is a list of items a user bought along with their respective reviews in json format: {}. Your task is to generate a list of up to five search instructions that summarizes the user's high-level preferences based on their reviews. Be specific on what the user does not like and should be avoided. Do not mention brands or certain products. Return a json file containing the search instructions with the key 'instructions'. Keep the instructions simple, short and concise, and do NOT include comments on delivery time or pricing.";

const FINE_GRAINED_BODY: &str = "Here is a list of items a user bought along with their respective reviews in json format: {}. Your task is to generate a list of up to five search instructions that reflect the user's preferences based on their reviews. Be specific about what the user likes, does not like, and should be avoided. It is okay to mention brands or certain products. Return a json file containing the search instructions with the key 'instructions'. Keep the instructions simple, short and concise, and do NOT include comments on delivery time or pricing.";

const PROPERTIES_BODY: &str = "Your task is to summarize the following reviews of an item into a list of item properties using keywords and phrases: {}. Keep your response short and concise. Only focus on objective properties of the item. Do NOT include subjective opinions or emotions. Do NOT include comments on price or delivery time. Return your response as a python list with at most 10 entries that accurately reflect the properties of the item.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Default,
    Abstract,
    FineGrained,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub granularity: Granularity,
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>, granularity: Granularity) -> Result<Self> {
        let (name, body) = (name.into(), body.into());
        let found = body.matches(PLACEHOLDER).count();
        if found != 1 {
            return Err(Error::Template { name, found });
        }
        Ok(Self {
            name,
            body,
            granularity,
        })
    }

    /// Built-in templates: `default`, `abstract`, `fine_grained`, `reviews_to_properties`.
    pub fn builtin(name: &str) -> Option<Self> {
        let (body, granularity) = match name {
            "default" => (DEFAULT_BODY, Granularity::Default),
            "abstract" => (ABSTRACT_BODY, Granularity::Abstract),
            "fine_grained" => (FINE_GRAINED_BODY, Granularity::FineGrained),
            "reviews_to_properties" => (PROPERTIES_BODY, Granularity::Default),
            _ => return None,
        };
        Some(Self::new(name, body, granularity).expect("built-in templates are valid"))
    }

    pub fn builtin_names() -> [&'static str; 4] {
        ["default", "abstract", "fine_grained", "reviews_to_properties"]
    }

    pub fn from_file(path: &Path, granularity: Granularity) -> Result<Self> {
        let body = String::from_utf8(codec::read_file(path)?)
            .map_err(|_| Error::format("template", "not UTF-8"))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Self::new(name, body, granularity)
    }

    /// A built-in name or a path to a template file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match Self::builtin(spec) {
            Some(t) => Ok(t),
            None => Self::from_file(Path::new(spec), Granularity::Default),
        }
    }
}

/// One (item, review) pair of the prompt's history block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HistoryEntry {
    pub item: String,
    pub review: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    /// Reviews longer than this many characters keep only their beginning.
    pub review_char_cap: usize,
    /// Cap on the serialized history block; the oldest entries are dropped to fit.
    pub history_char_cap: Option<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            review_char_cap: DEFAULT_REVIEW_CHAR_CAP,
            history_char_cap: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub entries_used: usize,
    pub truncated: bool,
}

fn cap_chars(s: &str, cap: usize) -> String {
    match s.char_indices().nth(cap) {
        Some((byte, _)) => s[..byte].to_string(),
        None => s.to_string(),
    }
}

/// Substitutes the chronological (item, review) history into the template as a JSON array.
pub fn render_prompt(history: &[HistoryEntry], template: &PromptTemplate, opts: RenderOptions) -> Result<RenderedPrompt> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("cannot render a prompt for an empty history".into()));
    }
    let capped: Vec<HistoryEntry> = history
        .iter()
        .map(|e| HistoryEntry {
            item: e.item.clone(),
            review: e.review.as_deref().map(|r| cap_chars(r, opts.review_char_cap)),
        })
        .collect();
    let mut start = 0;
    let mut block = serde_json::to_string(&capped)?;
    if let Some(cap) = opts.history_char_cap {
        while block.chars().count() > cap && start + 1 < capped.len() {
            start += 1;
            block = serde_json::to_string(&capped[start..])?;
        }
    }
    Ok(RenderedPrompt {
        text: template.body.replacen(PLACEHOLDER, &block, 1),
        entries_used: capped.len() - start,
        truncated: start > 0,
    })
}

/// The first `t` interactions of `user` as prompt history entries.
pub fn history_entries(catalog: &Catalog, user: &str, t: usize) -> Result<Vec<HistoryEntry>> {
    let seq = catalog
        .sequence(user)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown user `{user}`")))?;
    Ok((0..t.min(seq.len()))
        .map(|i| HistoryEntry {
            item: catalog.item_info(&seq.items[i]).to_string(),
            review: seq.reviews[i].clone(),
        })
        .collect())
}

/// Text-in, text-out access to a language model.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

impl<F> LlmClient for F
where
    F: Fn(&str) -> Result<String> + Send + Sync,
{
    fn complete(&self, prompt: &str) -> Result<String> {
        self(prompt)
    }
}

/// Client for an OpenAI-style `/chat/completions` endpoint.
pub struct HttpChatClient {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            client,
        })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }
}

impl LlmClient for HttpChatClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Client(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Client(format!("endpoint returned {status}")));
        }
        let v: Value = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Client("response has no choices[0].message.content".into()))
    }
}

#[derive(Serialize, Deserialize)]
struct ReplayLine {
    prompt_sha256: String,
    response: String,
}

/// A JSONL replay line answering `prompt` with `response`.
pub fn replay_line(prompt: &str, response: &str) -> String {
    serde_json::to_string(&ReplayLine {
        prompt_sha256: sha256_hex(prompt.as_bytes()),
        response: response.to_string(),
    })
    .expect("replay line serializes")
}

/// Serves canned responses keyed by the SHA-256 of the prompt.
///
/// Several lines for one prompt are served in file order on successive calls;
/// the last one repeats once the list is exhausted.
pub struct ReplayClient {
    responses: HashMap<String, Vec<String>>,
    cursor: Mutex<HashMap<String, usize>>,
    calls: AtomicUsize,
}

impl ReplayClient {
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut responses: HashMap<String, Vec<String>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: ReplayLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            responses.entry(l.prompt_sha256).or_default().push(l.response);
        }
        Ok(Self {
            responses,
            cursor: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = codec::read_file(path)?;
        Self::from_jsonl(&String::from_utf8_lossy(&bytes))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for ReplayClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = sha256_hex(prompt.as_bytes());
        let list = self
            .responses
            .get(&key)
            .ok_or_else(|| Error::Client(format!("no replay entry for prompt {key}")))?;
        let mut cursor = self.cursor.lock().expect("replay cursor poisoned");
        let pos = cursor.entry(key).or_insert(0);
        let out = list[(*pos).min(list.len() - 1)].clone();
        *pos += 1;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSet {
    pub user: String,
    /// Number of interactions the preferences were generated from.
    pub t: usize,
    pub preferences: Vec<String>,
}

pub type PreferenceMap = BTreeMap<(String, usize), PreferenceSet>;

pub fn save_preference_sets(path: &Path, sets: &PreferenceMap) -> Result<()> {
    let mut out = Vec::new();
    for set in sets.values() {
        serde_json::to_writer(&mut out, set)?;
        out.push(b'\n');
    }
    codec::write_file(path, &out)
}

pub fn load_preference_sets(path: &Path) -> Result<PreferenceMap> {
    let bytes = codec::read_file(path)?;
    let mut map = BTreeMap::new();
    for (i, line) in String::from_utf8_lossy(&bytes).lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let set: PreferenceSet = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        map.insert((set.user.clone(), set.t), set);
    }
    Ok(map)
}

#[derive(Clone, Copy, Debug)]
pub struct GenerationConfig {
    /// Additional attempts after the first failed one.
    pub max_retries: usize,
    /// Maximum concurrent client requests.
    pub concurrency: usize,
    pub render: RenderOptions,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_retries: 2,
            concurrency: 4,
            render: RenderOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenerationReport {
    pub sets: PreferenceMap,
    /// `(user, t)` keys whose generation failed after all retries.
    pub missing: Vec<(String, usize)>,
    pub retries: usize,
    pub client_calls: usize,
    pub truncated_prompts: usize,
}

struct Outcome {
    key: (String, usize),
    set: Option<Vec<String>>,
    calls: usize,
    truncated: bool,
}

fn generate_one(
    catalog: &Catalog,
    client: &dyn LlmClient,
    template: &PromptTemplate,
    config: &GenerationConfig,
    user: &str,
    t: usize,
) -> Result<Outcome> {
    let history = history_entries(catalog, user, t)?;
    let prompt = render_prompt(&history, template, config.render)?;
    let mut calls = 0;
    let mut set = None;
    while calls <= config.max_retries {
        calls += 1;
        let attempt = client
            .complete(&prompt.text)
            .and_then(|text| parse_response(&text))
            .and_then(postprocess_to_five);
        match attempt {
            Ok(prefs) => {
                set = Some(prefs);
                break;
            }
            Err(e) => log::debug!("user {user} t={t} attempt {calls}: {e}"),
        }
    }
    Ok(Outcome {
        key: (user.to_string(), t),
        set,
        calls,
        truncated: prompt.truncated,
    })
}

/// Generates a preference set for every user and every `t` in `1..T_u`.
///
/// Failed generations are retried up to `max_retries` times and then recorded
/// as missing; the run itself does not fail.
pub fn approximate_preferences(
    catalog: &Catalog,
    client: &dyn LlmClient,
    template: &PromptTemplate,
    config: &GenerationConfig,
) -> Result<GenerationReport> {
    let tasks: Vec<(&str, usize)> = catalog
        .sequences
        .values()
        .flat_map(|s| (1..s.len()).map(move |t| (s.user.as_str(), t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let outcomes: Vec<Outcome> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(u, t)| generate_one(catalog, client, template, config, u, t))
            .collect::<Result<_>>()
    })?;
    let mut report = GenerationReport::default();
    for o in outcomes {
        report.client_calls += o.calls;
        report.retries += o.calls - 1;
        report.truncated_prompts += o.truncated as usize;
        match o.set {
            Some(preferences) => {
                let set = PreferenceSet {
                    user: o.key.0.clone(),
                    t: o.key.1,
                    preferences,
                };
                report.sets.insert(o.key, set);
            }
            None => report.missing.push(o.key),
        }
    }
    Ok(report)
}

fn response_error(message: impl Into<String>, raw: &str) -> Error {
    Error::ResponseParse {
        message: message.into(),
        raw: raw.to_string(),
    }
}

/// Extracts the `instructions` string list from an LLM reply.
///
/// The first JSON object carrying an `instructions` key wins, wherever it sits
/// in the text (code fences and surrounding prose are skipped). Replies that use
/// Python-literal quoting (`{'instructions': ['a', "b"]}`) are accepted too.
pub fn parse_response(text: &str) -> Result<Vec<String>> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        let Some(Ok(Value::Object(obj))) = stream.next() else {
            continue;
        };
        if let Some(v) = obj.get("instructions") {
            return string_list(v).ok_or_else(|| response_error("`instructions` is not a list of strings", text));
        }
    }
    parse_python_literal(text).ok_or_else(|| response_error("no object with an `instructions` list", text))
}

fn string_list(v: &Value) -> Option<Vec<String>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_str().map(str::to_string))
        .collect()
}

fn parse_python_literal(text: &str) -> Option<Vec<String>> {
    let key_at = ["'instructions'", "\"instructions\""]
        .iter()
        .filter_map(|k| text.find(k).map(|p| p + k.len()))
        .min()?;
    let rest = text[key_at..].trim_start().strip_prefix(':')?.trim_start();
    let mut chars = rest.strip_prefix('[')?.chars().peekable();
    let mut out = Vec::new();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace() || *c == ',') {
            chars.next();
        }
        match chars.next()? {
            ']' => return Some(out),
            q @ ('\'' | '"') => {
                let mut s = String::new();
                loop {
                    match chars.next()? {
                        '\\' => match chars.next()? {
                            'n' => s.push('\n'),
                            't' => s.push('\t'),
                            c => s.push(c),
                        },
                        c if c == q => break,
                        c => s.push(c),
                    }
                }
                out.push(s);
            }
            _ => return None,
        }
    }
}

/// Trims, drops empty and duplicate entries, and keeps the first five.
pub fn postprocess_to_five(raw: Vec<String>) -> Result<Vec<String>> {
    let mut out: Vec<String> = Vec::with_capacity(PREFERENCES_PER_SET);
    for s in raw {
        let s = s.trim();
        if s.is_empty() || out.iter().any(|o| o == s) {
            continue;
        }
        out.push(s.to_string());
        if out.len() == PREFERENCES_PER_SET {
            return Ok(out);
        }
    }
    Err(Error::IncompletePreferences { survivors: out })
}

const NEGATIVE_MARKERS: [&str; 3] = ["avoid", "exclude", "no"];

/// Splits off the first whitespace-delimited token; returns it without
/// surrounding punctuation, lowercased, together with the remainder.
fn leading_word(text: &str) -> (String, &str) {
    let text = text.trim_start();
    let end = text.find(char::is_whitespace).unwrap_or(text.len());
    let word = text[..end]
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    (word, text[end..].trim_start())
}

/// Negative iff the preference opens with "Avoid", "Exclude" or "No" (any case).
pub fn classify_preference_sentiment(preference: &str) -> Sentiment {
    let (word, _) = leading_word(preference);
    if NEGATIVE_MARKERS.contains(&word.as_str()) {
        Sentiment::Negative
    } else {
        Sentiment::Positive
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionStyle {
    #[default]
    Find,
    SearchFor,
}

impl InversionStyle {
    pub fn word(self) -> &'static str {
        match self {
            InversionStyle::Find => "Find",
            InversionStyle::SearchFor => "Search for",
        }
    }
}

/// Replaces the leading negative marker with "Find" or "Search for".
pub fn invert_negative_preference(preference: &str, style: InversionStyle) -> Result<String> {
    if classify_preference_sentiment(preference) != Sentiment::Negative {
        return Err(Error::NotNegative(preference.to_string()));
    }
    let (_, rest) = leading_word(preference);
    Ok(if rest.is_empty() {
        style.word().to_string()
    } else {
        format!("{} {}", style.word(), rest)
    })
}
