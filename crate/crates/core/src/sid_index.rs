//! Trie of valid semantic IDs and prefix-constrained beam search over it.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::quantizer::{SemanticId, SidMap};

pub const DEFAULT_BEAM_WIDTH: usize = 30;

#[derive(Clone, Debug, Default)]
struct Node {
    children: BTreeMap<u32, usize>,
    item: Option<String>,
}

/// Every root-to-leaf path is `codes ++ [disambiguator]`, and every leaf names one item.
#[derive(Clone, Debug)]
pub struct SidTrie {
    nodes: Vec<Node>,
    depth: usize,
}

impl SidTrie {
    pub fn from_paths<I, S>(depth: usize, paths: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<u32>)>,
        S: Into<String>,
    {
        let mut trie = SidTrie {
            nodes: vec![Node::default()],
            depth,
        };
        for (item, path) in paths {
            if path.len() != depth {
                return Err(Error::InvalidArgument(format!(
                    "path {path:?} has length {}, expected {depth}",
                    path.len()
                )));
            }
            let mut at = 0;
            for &code in &path {
                at = match trie.nodes[at].children.get(&code) {
                    Some(&next) => next,
                    None => {
                        trie.nodes.push(Node::default());
                        let next = trie.nodes.len() - 1;
                        trie.nodes[at].children.insert(code, next);
                        next
                    }
                };
            }
            if trie.nodes[at].item.is_some() {
                return Err(Error::DuplicatePath(path));
            }
            trie.nodes[at].item = Some(item.into());
        }
        Ok(trie)
    }

    /// Path length from root to leaf (levels plus the disambiguator).
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of nodes including the root.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.item.is_some()).count()
    }

    fn find(&self, prefix: &[u32]) -> Option<usize> {
        let mut at = 0;
        for code in prefix {
            at = *self.nodes[at].children.get(code)?;
        }
        Some(at)
    }

    /// Valid next codes after `prefix`, ascending. `None` if the prefix is not in the trie.
    pub fn children(&self, prefix: &[u32]) -> Option<Vec<u32>> {
        self.find(prefix).map(|n| self.nodes[n].children.keys().copied().collect())
    }

    pub fn contains_prefix(&self, prefix: &[u32]) -> bool {
        self.find(prefix).is_some()
    }

    pub fn item_at(&self, path: &[u32]) -> Option<&str> {
        self.find(path).and_then(|n| self.nodes[n].item.as_deref())
    }

    /// All leaf paths with their items, in lexicographic path order.
    pub fn leaves(&self) -> Vec<(Vec<u32>, String)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            if let Some(item) = &self.nodes[n].item {
                out.push((path.clone(), item.clone()));
            }
            for (&code, &child) in self.nodes[n].children.iter().rev() {
                let mut p = path.clone();
                p.push(code);
                stack.push((child, p));
            }
        }
        out
    }

    /// Largest number of distinct prefixes at any single depth. A beam at least this
    /// wide makes the search exhaustive.
    pub fn max_live_prefixes(&self) -> usize {
        let mut level = vec![0usize];
        let mut widest = 1;
        for _ in 0..self.depth {
            level = level.iter().flat_map(|&n| self.nodes[n].children.values().copied()).collect();
            widest = widest.max(level.len());
        }
        widest
    }
}

pub fn build_trie(sids: &SidMap) -> Result<SidTrie> {
    SidTrie::from_paths(sids.n_levels + 1, sids.iter().map(|(item, sid)| (item.clone(), sid.path())))
}

/// Source of next-code log-probabilities for beam search.
pub trait CodeScorer {
    type Context: ?Sized;

    /// Log-probabilities aligned with `children` (the valid next codes after `prefix`).
    /// `None` means no opinion, and the children are scored uniformly.
    fn next_code_logits(&self, prefix: &[u32], children: &[u32], context: &Self::Context) -> Result<Option<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHit {
    pub sid: SemanticId,
    pub item: String,
    pub log_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamEntry {
    pub prefix: Vec<u32>,
    pub log_score: f64,
}

fn rank(a: &BeamEntry, b: &BeamEntry) -> Ordering {
    b.log_score.total_cmp(&a.log_score).then_with(|| a.prefix.cmp(&b.prefix))
}

/// Beam search that only ever expands children present in `trie`.
///
/// Returns up to `k` complete paths by summed log-probability, ties broken by
/// lexicographic path order.
pub fn constrained_beam_search<S: CodeScorer + ?Sized>(
    scorer: &S,
    trie: &SidTrie,
    context: &S::Context,
    beam_width: usize,
    k: usize,
) -> Result<Vec<BeamHit>> {
    if k == 0 || beam_width < k {
        return Err(Error::InvalidArgument(format!("need beam_width ≥ k ≥ 1, got beam_width={beam_width} k={k}")));
    }
    let mut beam = vec![BeamEntry {
        prefix: Vec::new(),
        log_score: 0.0,
    }];
    for _ in 0..trie.depth() {
        let mut next = Vec::new();
        for entry in &beam {
            let children = trie
                .children(&entry.prefix)
                .ok_or_else(|| Error::UnknownPath(entry.prefix.clone()))?;
            if children.is_empty() {
                continue;
            }
            let logits = match scorer.next_code_logits(&entry.prefix, &children, context)? {
                Some(l) if l.len() == children.len() => l,
                Some(l) => {
                    return Err(Error::InvalidArgument(format!(
                        "scorer returned {} scores for {} children of {:?}",
                        l.len(),
                        children.len(),
                        entry.prefix
                    )))
                }
                None => vec![-(children.len() as f64).ln(); children.len()],
            };
            for (&code, &lp) in children.iter().zip(&logits) {
                let mut prefix = entry.prefix.clone();
                prefix.push(code);
                if !lp.is_finite() {
                    return Err(Error::NonFiniteScore(prefix));
                }
                next.push(BeamEntry {
                    prefix,
                    log_score: entry.log_score + lp,
                });
            }
        }
        next.sort_by(rank);
        next.truncate(beam_width);
        beam = next;
    }
    beam.truncate(k);
    beam.into_iter()
        .map(|e| {
            let item = trie.item_at(&e.prefix).ok_or_else(|| Error::UnknownPath(e.prefix.clone()))?;
            Ok(BeamHit {
                item: item.to_string(),
                sid: SemanticId::from_path(&e.prefix).expect("trie paths are non-empty"),
                log_score: e.log_score,
            })
        })
        .collect()
}

/// Order-preserving translation of semantic IDs back to items.
pub fn decode_to_items(results: &[SemanticId], sids: &SidMap) -> Result<Vec<String>> {
    results
        .iter()
        .map(|s| {
            let path = s.path();
            sids.item_for_path(&path)
                .map(str::to_string)
                .ok_or(Error::UnknownPath(path))
        })
        .collect()
}
