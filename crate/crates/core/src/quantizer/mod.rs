//! Residual quantization of item embeddings into semantic IDs.
//!
//! A [`QuantizerModel`] holds `N` codebooks of `K` codewords each. Quantizing an
//! embedding greedily picks the nearest codeword at every level and passes the
//! residual on to the next level. Two trainers produce models: deterministic
//! residual k-means ([`train_residual_kmeans`]) and an RQ-VAE whose encoder
//! maps embeddings into a smaller latent space first ([`train_rqvae`]).

mod kmeans;
pub mod rqvae;
mod sid;

use std::io::{Cursor, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian as LE, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, sha256_hex};
use crate::embedding::{EmbeddingMatrix, StandardizationStats};
use crate::error::{Error, Result};

pub use kmeans::{kmeans, train_residual_kmeans, KMeansConfig};
pub use rqvae::{train_rqvae, Autoencoder, RqVaeConfig};
pub use sid::{assign_semantic_ids, SemanticId, SidMap};

const MAGIC: &[u8] = b"PDRQ";
const VERSION: u16 = 1;
const KIND: &str = "quantizer";

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub level: usize,
    k: usize,
    dim: usize,
    codewords: Vec<f32>,
}

impl Codebook {
    pub fn new(level: usize, k: usize, dim: usize, codewords: Vec<f32>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("codebook needs at least 2 codewords, got {k}")));
        }
        if codewords.len() != k * dim {
            return Err(Error::InvalidArgument(format!(
                "{} floats do not fill {k} codewords of dimension {dim}",
                codewords.len()
            )));
        }
        if codewords.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { id: format!("codebook level {level}") });
        }
        Ok(Self {
            level,
            k,
            dim,
            codewords,
        })
    }

    pub fn from_rows(level: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        Self::new(level, rows.len(), dim, rows.concat())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codeword(&self, j: usize) -> &[f32] {
        &self.codewords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.codewords
    }

    /// Nearest codeword to `r` by squared Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, r: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k {
            let d: f64 = self
                .codeword(j)
                .iter()
                .zip(r)
                .map(|(&c, &x)| {
                    let diff = x - c as f64;
                    diff * diff
                })
                .sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    ResidualKmeans,
    Rqvae,
}

impl FromStr for QuantizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rkmeans" | "residual_kmeans" => Ok(QuantizerKind::ResidualKmeans),
            "rqvae" => Ok(QuantizerKind::Rqvae),
            other => Err(format!("unknown quantizer kind `{other}` (expected rkmeans or rqvae)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerModel {
    pub kind: QuantizerKind,
    pub codebooks: Vec<Codebook>,
    pub autoencoder: Option<Autoencoder>,
    /// Statistics of the standardized matrix the model was trained on, if any.
    pub input_standardization: Option<StandardizationStats>,
    pub input_dim: usize,
    pub latent_dim: usize,
    /// JSON echo of the training configuration.
    pub config: String,
    pub training_curve: Vec<EpochStats>,
}

/// Codes chosen at every level together with the residual left after the last level.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantization {
    pub codes: Vec<u32>,
    pub residual: Vec<f64>,
}

impl QuantizerModel {
    /// A residual quantizer over the raw embedding space from explicit codebooks.
    pub fn from_codebooks(codebooks: Vec<Codebook>) -> Result<Self> {
        let dim = codebooks
            .first()
            .map(Codebook::dim)
            .ok_or_else(|| Error::InvalidArgument("at least one codebook required".into()))?;
        if codebooks.iter().any(|c| c.dim() != dim) {
            return Err(Error::InvalidArgument("codebooks disagree on dimension".into()));
        }
        Ok(Self {
            kind: QuantizerKind::ResidualKmeans,
            codebooks,
            autoencoder: None,
            input_standardization: None,
            input_dim: dim,
            latent_dim: dim,
            config: "{}".into(),
            training_curve: Vec::new(),
        })
    }

    pub fn n_levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks.first().map(Codebook::k).unwrap_or(0)
    }

    /// Maps an input embedding into the quantized space (identity without an encoder).
    pub fn encode(&self, embedding: &[f32]) -> Result<Vec<f64>> {
        if embedding.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                id: "<embedding>".into(),
                expected: self.input_dim,
                found: embedding.len(),
            });
        }
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { id: "<embedding>".into() });
        }
        let x: Vec<f64> = embedding.iter().map(|&v| v as f64).collect();
        Ok(match &self.autoencoder {
            Some(ae) => ae.encode(&x),
            None => x,
        })
    }

    pub fn quantize_detailed(&self, embedding: &[f32]) -> Result<Quantization> {
        let mut residual = self.encode(embedding)?;
        let mut codes = Vec::with_capacity(self.codebooks.len());
        for cb in &self.codebooks {
            let (j, _) = cb.nearest(&residual);
            for (r, &c) in residual.iter_mut().zip(cb.codeword(j)) {
                *r -= c as f64;
            }
            codes.push(j as u32);
        }
        Ok(Quantization { codes, residual })
    }

    /// Sum of the chosen codewords, in latent space.
    pub fn reconstruct_latent(&self, codes: &[u32]) -> Vec<f64> {
        let mut out = vec![0f64; self.latent_dim];
        for (cb, &j) in self.codebooks.iter().zip(codes) {
            for (o, &c) in out.iter_mut().zip(cb.codeword(j as usize)) {
                *o += c as f64;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        self.write_to(&mut w).expect("writing to a Vec cannot fail");
        w
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u16::<LE>(VERSION)?;
        w.write_u8(match self.kind {
            QuantizerKind::ResidualKmeans => 0,
            QuantizerKind::Rqvae => 1,
        })?;
        w.write_u32::<LE>(self.n_levels() as u32)?;
        w.write_u32::<LE>(self.codebook_size() as u32)?;
        w.write_u32::<LE>(self.latent_dim as u32)?;
        w.write_u32::<LE>(self.input_dim as u32)?;
        for cb in &self.codebooks {
            codec::write_f32s(w, cb.as_flat())?;
        }
        match &self.autoencoder {
            Some(ae) => {
                w.write_u8(1)?;
                ae.write_to(w)?;
            }
            None => w.write_u8(0)?,
        }
        match &self.input_standardization {
            Some(s) => {
                w.write_u8(1)?;
                codec::write_f64s(w, &s.mean)?;
                codec::write_f64s(w, &s.std)?;
                for &z in &s.zero_variance {
                    w.write_u8(z as u8)?;
                }
            }
            None => w.write_u8(0)?,
        }
        codec::write_str32(w, &self.config)?;
        w.write_u32::<LE>(self.training_curve.len() as u32)?;
        for e in &self.training_curve {
            w.write_u32::<LE>(e.epoch as u32)?;
            w.write_f64::<LE>(e.loss)?;
            w.write_f64::<LE>(e.reconstruction)?;
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
        let kind = match codec::read_u8(r, KIND)? {
            0 => QuantizerKind::ResidualKmeans,
            1 => QuantizerKind::Rqvae,
            t => return Err(Error::format(KIND, format!("unknown kind tag {t}"))),
        };
        let n = codec::read_u32(r, KIND)? as usize;
        let k = codec::read_u32(r, KIND)? as usize;
        let latent_dim = codec::read_u32(r, KIND)? as usize;
        let input_dim = codec::read_u32(r, KIND)? as usize;
        let mut codebooks = Vec::with_capacity(n);
        for level in 0..n {
            let flat = codec::read_f32s(r, k * latent_dim, KIND)?;
            codebooks.push(Codebook::new(level + 1, k, latent_dim, flat)?);
        }
        let autoencoder = match codec::read_u8(r, KIND)? {
            0 => None,
            _ => Some(Autoencoder::read_from(r)?),
        };
        let input_standardization = match codec::read_u8(r, KIND)? {
            0 => None,
            _ => {
                let mean = codec::read_f64s(r, input_dim, KIND)?;
                let std = codec::read_f64s(r, input_dim, KIND)?;
                let mut zero_variance = Vec::with_capacity(input_dim);
                for _ in 0..input_dim {
                    zero_variance.push(codec::read_u8(r, KIND)? != 0);
                }
                Some(StandardizationStats {
                    mean,
                    std,
                    zero_variance,
                })
            }
        };
        let config = codec::read_str32(r, KIND)?;
        let n_curve = codec::read_u32(r, KIND)? as usize;
        let mut training_curve = Vec::with_capacity(n_curve);
        for _ in 0..n_curve {
            training_curve.push(EpochStats {
                epoch: codec::read_u32(r, KIND)? as usize,
                loss: codec::read_f64(r, KIND)?,
                reconstruction: codec::read_f64(r, KIND)?,
            });
        }
        Ok(Self {
            kind,
            codebooks,
            autoencoder,
            input_standardization,
            input_dim,
            latent_dim,
            config,
            training_curve,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

/// Greedy residual quantization of one embedding: `(k_1, …, k_N)`.
pub fn quantize(model: &QuantizerModel, embedding: &[f32]) -> Result<Vec<u32>> {
    Ok(model.quantize_detailed(embedding)?.codes)
}

pub fn quantize_all(model: &QuantizerModel, matrix: &EmbeddingMatrix) -> Result<Vec<Vec<u32>>> {
    (0..matrix.len())
        .into_par_iter()
        .map(|i| quantize(model, matrix.row(i)))
        .collect()
}

/// Fraction of each level's codewords selected at least once over `matrix`.
pub fn codebook_coverage(model: &QuantizerModel, matrix: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let codes = quantize_all(model, matrix)?;
    Ok(model
        .codebooks
        .iter()
        .enumerate()
        .map(|(level, cb)| {
            let mut used = vec![false; cb.k()];
            for c in &codes {
                used[c[level] as usize] = true;
            }
            used.iter().filter(|&&u| u).count() as f64 / cb.k() as f64
        })
        .collect())
}
