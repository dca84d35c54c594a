use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{quantize_all, QuantizerModel};
use crate::codec::{self, sha256_hex};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

const KIND: &str = "sid map";

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId {
    pub codes: Vec<u32>,
    pub disambiguator: u32,
}

impl SemanticId {
    pub fn new(codes: Vec<u32>, disambiguator: u32) -> Self {
        Self { codes, disambiguator }
    }

    /// Codes followed by the disambiguator: the full root-to-leaf trie path.
    pub fn path(&self) -> Vec<u32> {
        let mut p = self.codes.clone();
        p.push(self.disambiguator);
        p
    }

    pub fn from_path(path: &[u32]) -> Option<Self> {
        let (&d, codes) = path.split_last()?;
        Some(Self::new(codes.to_vec(), d))
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.codes {
            write!(f, "{c},")?;
        }
        write!(f, "{}", self.disambiguator)
    }
}

impl FromStr for SemanticId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("bad code `{p}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::from_path(&parts).ok_or_else(|| "empty semantic id".to_string())
    }
}

/// Item → semantic ID assignment, tied to the quantizer that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SidMap {
    pub n_levels: usize,
    pub k: usize,
    pub model_digest: String,
    entries: BTreeMap<String, SemanticId>,
    by_path: BTreeMap<Vec<u32>, String>,
}

impl SidMap {
    pub fn new(n_levels: usize, k: usize, model_digest: String, entries: BTreeMap<String, SemanticId>) -> Result<Self> {
        let mut by_path = BTreeMap::new();
        for (item, sid) in &entries {
            if sid.codes.len() != n_levels {
                return Err(Error::InvalidArgument(format!(
                    "item {item} has {} codes, expected {n_levels}",
                    sid.codes.len()
                )));
            }
            if let Some(c) = sid.codes.iter().find(|&&c| c as usize >= k) {
                return Err(Error::InvalidArgument(format!("item {item} has code {c} outside [0, {k})")));
            }
            if by_path.insert(sid.path(), item.clone()).is_some() {
                return Err(Error::DuplicatePath(sid.path()));
            }
        }
        Ok(Self {
            n_levels,
            k,
            model_digest,
            entries,
            by_path,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, item: &str) -> Option<&SemanticId> {
        self.entries.get(item)
    }

    pub fn require(&self, item: &str) -> Result<&SemanticId> {
        self.get(item).ok_or_else(|| Error::UnknownItem(item.to_string()))
    }

    pub fn item_for_path(&self, path: &[u32]) -> Option<&str> {
        self.by_path.get(path).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SemanticId)> {
        self.entries.iter()
    }

    pub fn items(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn max_disambiguator(&self) -> u32 {
        self.entries.values().map(|s| s.disambiguator).max().unwrap_or(0)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("# model_digest={}\n# n_levels={} k={}\n", self.model_digest, self.n_levels, self.k);
        for (item, sid) in &self.entries {
            out.push_str(item);
            out.push('\t');
            out.push_str(&sid.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut digest = String::new();
        let mut n_levels = None;
        let mut k = None;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix('#') {
                for kv in rest.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("model_digest", v)) => digest = v.to_string(),
                        Some(("n_levels", v)) => n_levels = v.parse().ok(),
                        Some(("k", v)) => k = v.parse().ok(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (item, sid) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse { line: i + 1, message: "expected item<TAB>codes".into() })?;
            let sid: SemanticId = sid.parse().map_err(|message| Error::Parse { line: i + 1, message })?;
            if entries.insert(item.to_string(), sid).is_some() {
                return Err(Error::DuplicateId(item.to_string()));
            }
        }
        let n_levels = n_levels
            .or_else(|| entries.values().next().map(|s: &SemanticId| s.codes.len()))
            .ok_or_else(|| Error::format(KIND, "empty map without a level count"))?;
        let k = k.unwrap_or_else(|| {
            entries.values().flat_map(|s| s.codes.iter()).max().map_or(2, |&m| m as usize + 1)
        });
        Self::new(n_levels, k, digest, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = codec::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(KIND, e.to_string()))?;
        Self::from_tsv(&text)
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_tsv().as_bytes())
    }
}

/// Quantizes every row of `matrix` and resolves collisions: items sharing a code
/// tuple get disambiguators 0, 1, 2, … in ascending item-id order.
pub fn assign_semantic_ids(model: &QuantizerModel, matrix: &EmbeddingMatrix) -> Result<SidMap> {
    let codes = quantize_all(model, matrix)?;
    let mut by_item: Vec<(&String, Vec<u32>)> = matrix.ids().iter().zip(codes).collect();
    by_item.sort_by(|a, b| a.0.cmp(b.0));
    let mut next: BTreeMap<Vec<u32>, u32> = BTreeMap::new();
    let mut entries = BTreeMap::new();
    for (item, codes) in by_item {
        let slot = next.entry(codes.clone()).or_insert(0);
        entries.insert(item.clone(), SemanticId::new(codes, *slot));
        *slot += 1;
    }
    SidMap::new(model.n_levels(), model.codebook_size(), model.digest(), entries)
}
