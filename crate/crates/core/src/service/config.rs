use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sid_index::DEFAULT_BEAM_WIDTH;

pub const ENV_PREFIX: &str = "DISCERN_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedderMode {
    None,
    CorpusLookup,
    External,
}

impl std::str::FromStr for EmbedderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EmbedderMode::None),
            "corpus_lookup" => Ok(EmbedderMode::CorpusLookup),
            "external" => Ok(EmbedderMode::External),
            other => Err(Error::InvalidArgument(format!(
                "embedder must be none, corpus_lookup or external, got `{other}`"
            ))),
        }
    }
}

/// Settings for `discern serve`.
///
/// The file format is one `key = value` per line, `#` starts a comment. Every key
/// can be overridden by an environment variable `DISCERN_<KEY>` (upper case).
/// Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub catalog: PathBuf,
    pub model: PathBuf,
    pub item_embeddings: PathBuf,
    /// Optional standalone sid map; must match the one inside the model.
    pub sid_map: Option<PathBuf>,
    /// Known preference texts, the lookup table for `corpus_lookup`.
    pub pref_embeddings: Option<PathBuf>,
    pub embedder: EmbedderMode,
    pub embedder_url: Option<String>,
    pub embedder_auth_header: Option<String>,
    pub embedder_auth_value: Option<String>,
    pub embedder_timeout_ms: u64,
    /// Requests in flight beyond this are answered with 429.
    pub request_cap: usize,
    pub beam_width: usize,
    /// `*` allows any origin.
    pub cors_origins: Vec<String>,
    pub console_dir: Option<PathBuf>,
}

const KEYS: [&str; 15] = [
    "listen",
    "catalog",
    "model",
    "item_embeddings",
    "sid_map",
    "pref_embeddings",
    "embedder",
    "embedder_url",
    "embedder_auth_header",
    "embedder_auth_value",
    "embedder_timeout_ms",
    "request_cap",
    "beam_width",
    "cors_origins",
    "console_dir",
];

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim().to_string();
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("unknown key `{k}`"),
            });
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), std::env::vars())
    }

    /// Parses `text`, then applies `DISCERN_*` entries from `env`.
    pub fn parse(text: &str, base_dir: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut kv = parse_pairs(text)?;
        for (name, value) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            let key = key.to_lowercase();
            if KEYS.contains(&key.as_str()) {
                kv.insert(key, value);
            }
        }
        let take = |k: &str| kv.get(k).filter(|v| !v.is_empty()).cloned();
        let path = |k: &str| take(k).map(|v| base_dir.join(v));
        let need = |k: &str| path(k).ok_or_else(|| Error::InvalidArgument(format!("config is missing `{k}`")));
        let number = |k: &str, default: u64| -> Result<u64> {
            take(k).map_or(Ok(default), |v| {
                v.parse()
                    .map_err(|_| Error::InvalidArgument(format!("`{k}` must be a non-negative integer, got `{v}`")))
            })
        };
        let listen = take("listen").unwrap_or_else(|| "127.0.0.1:8080".into());
        let cfg = ServiceConfig {
            listen: listen
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad listen address `{listen}`")))?,
            catalog: need("catalog")?,
            model: need("model")?,
            item_embeddings: need("item_embeddings")?,
            sid_map: path("sid_map"),
            pref_embeddings: path("pref_embeddings"),
            embedder: take("embedder").as_deref().unwrap_or("none").parse()?,
            embedder_url: take("embedder_url"),
            embedder_auth_header: take("embedder_auth_header"),
            embedder_auth_value: take("embedder_auth_value"),
            embedder_timeout_ms: number("embedder_timeout_ms", 5000)?,
            request_cap: number("request_cap", 64)? as usize,
            beam_width: number("beam_width", DEFAULT_BEAM_WIDTH as u64)? as usize,
            cors_origins: take("cors_origins")
                .unwrap_or_else(|| "*".into())
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect(),
            console_dir: path("console_dir"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.request_cap == 0 || self.beam_width == 0 {
            return Err(Error::InvalidArgument("request_cap and beam_width must be positive".into()));
        }
        match self.embedder {
            EmbedderMode::External if self.embedder_url.is_none() => {
                Err(Error::InvalidArgument("embedder = external requires embedder_url".into()))
            }
            EmbedderMode::CorpusLookup if self.pref_embeddings.is_none() => {
                Err(Error::InvalidArgument("embedder = corpus_lookup requires pref_embeddings".into()))
            }
            _ if self.embedder_auth_header.is_some() != self.embedder_auth_value.is_some() => Err(Error::InvalidArgument(
                "embedder_auth_header and embedder_auth_value go together".into(),
            )),
            _ => Ok(()),
        }
    }
}
