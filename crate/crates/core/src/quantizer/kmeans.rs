use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{Codebook, QuantizerKind, QuantizerModel};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct KMeansConfig {
    pub n_levels: usize,
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    /// `k × d`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(d).enumerate() {
        let dist = sq_dist(point, c);
        if dist < best.1 {
            best = (j, dist);
        }
    }
    best
}

fn kmeans_pp_init(data: &[f64], d: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / d;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(k * d);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..d])).collect();
    while centroids.len() < k * d {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let c = centroids[start..].to_vec();
        d2.par_iter_mut().enumerate().for_each(|(i, v)| {
            *v = v.min(sq_dist(row(i), &c));
        });
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when assignments are stable or after `max_iters` rounds. A cluster that
/// empties out is re-seeded at the point farthest from its current centroid.
pub fn kmeans(data: &[f64], d: usize, k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Result<KMeansFit> {
    let n = if d == 0 { 0 } else { data.len() / d };
    if n < k {
        return Err(Error::InvalidArgument(format!("k-means with k={k} needs at least {k} points, got {n}")));
    }
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let mut centroids = kmeans_pp_init(data, d, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters.max(1) {
        iterations += 1;
        let assigned: Vec<(usize, f64)> = (0..n).into_par_iter().map(|i| nearest(row(i), &centroids, d)).collect();
        let next: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;

        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * d..(a + 1) * d].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
            for (j, &p) in empty.iter().zip(&far) {
                sums[j * d..(j + 1) * d].copy_from_slice(row(p));
                counts[*j] = 1;
            }
        }
        for j in 0..k {
            let c = counts[j] as f64;
            for (dst, s) in centroids[j * d..(j + 1) * d].iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                *dst = s / c;
            }
        }
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        iterations,
        converged,
    })
}

/// Fits `n_levels` codebooks by k-means on successive residuals of `data`.
///
/// Centroids are rounded to `f32` before residuals are formed, so the residuals
/// seen during training are exactly those [`super::quantize`] later produces.
pub(crate) fn residual_codebooks(mut data: Vec<f64>, d: usize, cfg: &KMeansConfig) -> Result<Vec<Codebook>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codebooks = Vec::with_capacity(cfg.n_levels);
    for level in 1..=cfg.n_levels {
        let fit = kmeans(&data, d, cfg.k, cfg.max_iters, &mut rng)?;
        log::debug!("level {level}: {} Lloyd iterations, converged={}", fit.iterations, fit.converged);
        let cb = Codebook::new(level, cfg.k, d, fit.centroids.iter().map(|&c| c as f32).collect())?;
        data.par_chunks_exact_mut(d).for_each(|r| {
            let (j, _) = cb.nearest(r);
            for (x, &c) in r.iter_mut().zip(cb.codeword(j)) {
                *x -= c as f64;
            }
        });
        codebooks.push(cb);
    }
    Ok(codebooks)
}

/// Residual k-means quantizer over the raw embedding space.
pub fn train_residual_kmeans(
    matrix: &EmbeddingMatrix,
    n_levels: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<QuantizerModel> {
    if n_levels == 0 {
        return Err(Error::InvalidArgument("n_levels must be at least 1".into()));
    }
    if matrix.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings cannot fill a codebook of {k}",
            matrix.len()
        )));
    }
    let cfg = KMeansConfig {
        n_levels,
        k,
        seed,
        max_iters,
    };
    let data: Vec<f64> = matrix.as_flat().iter().map(|&x| x as f64).collect();
    let codebooks = residual_codebooks(data, matrix.dim(), &cfg)?;
    let mut model = QuantizerModel::from_codebooks(codebooks)?;
    model.kind = QuantizerKind::ResidualKmeans;
    model.input_standardization = matrix.standardization_stats().cloned();
    model.config = serde_json::to_string(&cfg)?;
    Ok(model)
}
