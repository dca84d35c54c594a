//! Dense embedding matrices and exact cosine-similarity search.
//!
//! Every argmax/argmin used by the benchmark builder goes through
//! [`top_k_similar`] and [`least_similar`]. Scores are accumulated in `f64`
//! and ties are broken by ascending id so rankings are reproducible.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, sha256_hex};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"PDEM";
const VERSION: u16 = 1;
const KIND: &str = "embedding";
const NORM_TOLERANCE: f64 = 1e-4;
const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions with zero variance; these were centered but not scaled.
    pub zero_variance: Vec<bool>,
}

impl StandardizationStats {
    pub fn apply(&self, v: &[f32]) -> Vec<f32> {
        v.iter()
            .enumerate()
            .map(|(j, &x)| {
                let c = x as f64 - self.mean[j];
                (if self.zero_variance[j] { c } else { c / self.std[j] }) as f32
            })
            .collect()
    }

    pub fn invert(&self, v: &[f32]) -> Vec<f32> {
        v.iter()
            .enumerate()
            .map(|(j, &x)| {
                let s = if self.zero_variance[j] { 1.0 } else { self.std[j] };
                (x as f64 * s + self.mean[j]) as f32
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    data: Vec<f32>,
    norms: Vec<f64>,
    normalized: bool,
    stats: Option<StandardizationStats>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids && self.dim == other.dim && self.data == other.data && self.stats == other.stats
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub id: String,
    pub score: f64,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(dim * vectors.len());
        for (id, v) in ids.iter().zip(&vectors) {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    id: id.clone(),
                    expected: dim,
                    found: v.len(),
                });
            }
            data.extend_from_slice(v);
        }
        if ids.len() != vectors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        Self::from_flat(ids, dim, data)
    }

    pub fn from_flat(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidArgument(format!(
                "{} floats do not fill {} rows of dimension {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut norms = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let row = &data[i * dim..(i + 1) * dim];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { id: id.clone() });
            }
            norms.push(norm(row));
        }
        let normalized = !ids.is_empty() && norms.iter().all(|n| (n - 1.0).abs() <= NORM_TOLERANCE);
        Ok(Self {
            ids,
            index,
            dim,
            data,
            norms,
            normalized,
            stats: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.ids.len())
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    /// Like [`get`](Self::get) but reports which namespace lacks the key.
    pub fn require(&self, namespace: &str, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::MissingEmbedding {
            namespace: namespace.to_string(),
            key: id.to_string(),
        })
    }

    /// True when every row has unit L2 norm (within 1e-4).
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn standardization_stats(&self) -> Option<&StandardizationStats> {
        self.stats.as_ref()
    }

    pub fn with_stats(mut self, stats: StandardizationStats) -> Self {
        self.stats = Some(stats);
        self
    }

    /// Rows rescaled to unit norm.
    pub fn l2_normalized(&self) -> Result<Self> {
        let mut data = self.data.clone();
        for (i, id) in self.ids.iter().enumerate() {
            let n = self.norms[i];
            if n == 0.0 {
                return Err(Error::ZeroNorm { id: id.clone() });
            }
            for x in &mut data[i * self.dim..(i + 1) * self.dim] {
                *x = (*x as f64 / n) as f32;
            }
        }
        Self::from_flat(self.ids.clone(), self.dim, data)
    }

    /// Rows whose ids are listed, in the listed order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            data.extend_from_slice(self.require(KIND, id.as_ref())?);
        }
        let ids = ids.iter().map(|s| s.as_ref().to_string()).collect();
        Self::from_flat(ids, self.dim, data)
    }

    /// Appends rows; ids must be new.
    pub fn extended(&self, extra: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut ids = self.ids.clone();
        let mut data = self.data.clone();
        for (id, v) in extra {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    id,
                    expected: self.dim,
                    found: v.len(),
                });
            }
            ids.push(id);
            data.extend_from_slice(&v);
        }
        Self::from_flat(ids, self.dim, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::with_capacity(18 + self.data.len() * 4 + self.ids.len() * 16);
        self.write_binary_to(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    fn write_binary_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LE>(VERSION)?;
        w.write_u32::<LE>(self.dim as u32)?;
        w.write_u64::<LE>(self.ids.len() as u64)?;
        for (i, id) in self.ids.iter().enumerate() {
            codec::write_str16(w, id)?;
            codec::write_f32s(w, self.row(i))?;
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
        let dim = codec::read_u32(r, KIND)? as usize;
        let count = codec::read_u64(r, KIND)? as usize;
        let mut ids = Vec::with_capacity(count.min(1 << 24));
        let mut data = Vec::with_capacity(count.min(1 << 24) * dim);
        for _ in 0..count {
            let id = codec::read_str16(r, KIND)?;
            let v = codec::read_f32s(r, dim, KIND)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { id });
            }
            ids.push(id);
            data.extend_from_slice(&v);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::format(KIND, "trailing bytes after last record"));
        }
        Self::from_flat(ids, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            serde_json::to_writer(&mut out, &JsonRow { id: id.clone(), vector: self.row(i).to_vec() })?;
            out.push(b'\n');
        }
        codec::write_file(path, &out)
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    id: String,
    vector: Vec<f32>,
}

fn parse_jsonl(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (idx, line) in BufReader::new(Cursor::new(bytes)).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // serde_json rejects NaN/Inf literals, so non-finite values surface as parse errors.
        let row: JsonRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let expected = *dim.get_or_insert(row.vector.len());
        if row.vector.len() != expected {
            return Err(Error::DimensionMismatch {
                id: row.id,
                expected,
                found: row.vector.len(),
            });
        }
        ids.push(row.id);
        data.extend(row.vector);
    }
    EmbeddingMatrix::from_flat(ids, dim.unwrap_or(0), data)
}

/// Loads an embedding file, either the binary `PDEM` format or JSONL `{id, vector}` rows.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = codec::read_file(path)?;
    if bytes.starts_with(MAGIC) {
        EmbeddingMatrix::from_bytes(&bytes)
    } else {
        parse_jsonl(&bytes)
    }
}

/// Per-dimension z-scoring with population variance.
///
/// Zero-variance dimensions are centered only and flagged in the returned stats.
pub fn standardize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let n = matrix.len();
    if n < 2 {
        return Err(Error::InvalidArgument("standardize needs at least two rows".into()));
    }
    let d = matrix.dim;
    let mut mean = vec![0f64; d];
    for row in matrix.rows() {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0f64; d];
    for row in matrix.rows() {
        for j in 0..d {
            let c = row[j] as f64 - mean[j];
            var[j] += c * c;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    let zero_variance: Vec<bool> = std.iter().map(|&s| s <= ZERO_VARIANCE).collect();
    let stats = StandardizationStats {
        mean,
        std,
        zero_variance,
    };
    let data: Vec<f32> = matrix.rows().flat_map(|r| stats.apply(r)).collect();
    Ok(EmbeddingMatrix::from_flat(matrix.ids.clone(), d, data)?.with_stats(stats))
}

fn check_query(matrix: &EmbeddingMatrix, query: &[f32]) -> Result<f64> {
    if query.len() != matrix.dim {
        return Err(Error::DimensionMismatch {
            id: "<query>".into(),
            expected: matrix.dim,
            found: query.len(),
        });
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { id: "<query>".into() });
    }
    let n = norm(query);
    if n == 0.0 {
        return Err(Error::ZeroNorm { id: "<query>".into() });
    }
    Ok(n)
}

/// Cosine scores of every non-excluded row, in row order.
fn scored_candidates(matrix: &EmbeddingMatrix, query: &[f32], exclude: &[&str]) -> Result<Vec<(usize, f64)>> {
    let qn = check_query(matrix, query)?;
    let mut out = Vec::with_capacity(matrix.len());
    for (i, id) in matrix.ids.iter().enumerate() {
        if exclude.contains(&id.as_str()) {
            continue;
        }
        let rn = matrix.norms[i];
        if rn == 0.0 {
            return Err(Error::ZeroNorm { id: id.clone() });
        }
        let s = (dot(query, matrix.row(i)) / (qn * rn)).clamp(-1.0, 1.0);
        out.push((i, s));
    }
    Ok(out)
}

fn by_score_desc(matrix: &EmbeddingMatrix) -> impl Fn(&(usize, f64), &(usize, f64)) -> Ordering + '_ {
    move |a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| matrix.ids[a.0].cmp(&matrix.ids[b.0]))
    }
}

/// Exact top-`k` rows by cosine similarity to `query`, best first.
pub fn top_k_similar(
    matrix: &EmbeddingMatrix,
    query: &[f32],
    k: usize,
    exclude: &[&str],
) -> Result<Vec<SimilarityResult>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut scored = scored_candidates(matrix, query, exclude)?;
    let cmp = by_score_desc(matrix);
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, &cmp);
        scored.truncate(k);
    }
    scored.sort_by(&cmp);
    Ok(scored
        .into_iter()
        .map(|(i, score)| SimilarityResult {
            id: matrix.ids[i].clone(),
            score,
        })
        .collect())
}

/// Row with the lowest cosine similarity to `query`.
pub fn least_similar(matrix: &EmbeddingMatrix, query: &[f32], exclude: &[&str]) -> Result<SimilarityResult> {
    let scored = scored_candidates(matrix, query, exclude)?;
    let cmp = by_score_desc(matrix);
    // Lowest score; among equal scores the smallest id.
    let best = scored
        .into_iter()
        .min_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| cmp(a, b))
        })
        .ok_or(Error::EmptyCandidates)?;
    Ok(SimilarityResult {
        id: matrix.ids[best.0].clone(),
        score: best.1,
    })
}

/// [`top_k_similar`] for many queries at once; output order matches input order.
pub fn top_k_batch(
    matrix: &EmbeddingMatrix,
    queries: &[Vec<f32>],
    k: usize,
    exclude: &[&str],
) -> Result<Vec<Vec<SimilarityResult>>> {
    queries
        .par_iter()
        .map(|q| top_k_similar(matrix, q, k, exclude))
        .collect()
}
