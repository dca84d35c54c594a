//! RQ-VAE: an MLP autoencoder whose latent is residual-quantized.
//!
//! All parameters of the network live in one flat `f64` vector. The layout is a
//! pure function of `(input_dim, widths)`, which keeps the optimizer, the
//! gradient check and persistence trivial.

use std::io::{Cursor, Write};

use byteorder::{LittleEndian as LE, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::kmeans::residual_codebooks;
use super::{Codebook, EpochStats, KMeansConfig, QuantizerKind, QuantizerModel};
use crate::codec;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const KIND: &str = "autoencoder";
/// Each batch is split into this many shards whose gradients are summed in order,
/// so results do not depend on the size of the thread pool.
const GRAD_SHARDS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RqVaeConfig {
    pub widths: Vec<usize>,
    pub n_levels: usize,
    pub k: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub commitment_beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Lloyd iterations for the codebook initialization.
    pub kmeans_iters: usize,
    /// Level coverage under this value is logged as a warning.
    pub coverage_floor: f64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        Self {
            widths: vec![768, 512, 256, 128],
            n_levels: 3,
            k: 256,
            dropout: 0.1,
            weight_decay: 0.01,
            commitment_beta: 0.25,
            lr: 1e-3,
            epochs: 50,
            batch_size: 256,
            seed: 7,
            kmeans_iters: 25,
            coverage_floor: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LinearAt {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BlockAt {
    lin: LinearAt,
    gamma: usize,
    beta: usize,
    skip: Option<LinearAt>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoder: Vec<BlockAt>,
    decoder: Vec<BlockAt>,
    head: LinearAt,
    len: usize,
}

impl Layout {
    fn new(input_dim: usize, widths: &[usize]) -> Self {
        fn take(len: &mut usize, n: usize) -> usize {
            *len += n;
            *len - n
        }
        fn linear(len: &mut usize, inp: usize, out: usize) -> LinearAt {
            LinearAt {
                inp,
                out,
                w: take(len, inp * out),
                b: take(len, out),
            }
        }
        let mut len = 0;
        let mut enc_dims = vec![input_dim];
        enc_dims.extend_from_slice(widths);
        let dec_dims: Vec<usize> = widths.iter().rev().copied().collect();
        // Main linears first, then the norm parameters and projected skips.
        let blocks = |dims: &[usize], len: &mut usize| -> Vec<BlockAt> {
            dims.windows(2)
                .map(|p| BlockAt {
                    lin: linear(len, p[0], p[1]),
                    gamma: 0,
                    beta: 0,
                    skip: None,
                })
                .collect()
        };
        let mut encoder = blocks(&enc_dims, &mut len);
        let mut decoder = blocks(&dec_dims, &mut len);
        let head = linear(&mut len, *dec_dims.last().unwrap(), input_dim);
        for b in encoder.iter_mut().chain(decoder.iter_mut()) {
            b.gamma = take(&mut len, b.lin.out);
            b.beta = take(&mut len, b.lin.out);
            if b.lin.inp != b.lin.out {
                b.skip = Some(linear(&mut len, b.lin.inp, b.lin.out));
            }
        }
        Self {
            encoder,
            decoder,
            head,
            len,
        }
    }

    fn linears(&self) -> impl Iterator<Item = &LinearAt> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|b| std::iter::once(&b.lin).chain(b.skip.as_ref()))
            .chain(std::iter::once(&self.head))
    }

    /// True for every parameter that receives weight decay (linear weights only).
    fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for l in self.linears() {
            mask[l.w..l.w + l.inp * l.out].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

struct BlockCache {
    x: Vec<f64>,
    yhat: Vec<f64>,
    inv_sigma: f64,
    z: Vec<f64>,
    scale: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    input_dim: usize,
    widths: Vec<usize>,
    dropout: f64,
    layout: Layout,
    params: Vec<f64>,
}

fn linear(p: &[f64], l: &LinearAt, x: &[f64]) -> Vec<f64> {
    let w = &p[l.w..l.w + l.inp * l.out];
    (0..l.out)
        .map(|o| {
            let row = &w[o * l.inp..(o + 1) * l.inp];
            p[l.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

fn linear_backward(p: &[f64], g: &mut [f64], l: &LinearAt, x: &[f64], dy: &[f64], dx: &mut [f64]) {
    for (o, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        g[l.b + o] += d;
        let w = l.w + o * l.inp;
        for i in 0..l.inp {
            g[w + i] += d * x[i];
            dx[i] += d * p[w + i];
        }
    }
}

impl Autoencoder {
    /// Randomly initialized network. Linear weights are uniform in ±1/√fan_in.
    pub fn new(input_dim: usize, widths: &[usize], dropout: f64, seed: u64) -> Result<Self> {
        if input_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidArgument("autoencoder needs a positive input dim and widths".into()));
        }
        if widths.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument(format!("widths must not increase: {widths:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidArgument(format!("dropout {dropout} outside [0, 1)")));
        }
        let layout = Layout::new(input_dim, widths);
        let mut params = vec![0f64; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in layout.linears() {
            let bound = 1.0 / (l.inp as f64).sqrt();
            for v in &mut params[l.w..l.b + l.out] {
                *v = rng.random_range(-bound..bound) as f32 as f64;
            }
        }
        for b in layout.encoder.iter().chain(&layout.decoder) {
            params[b.gamma..b.gamma + b.lin.out].iter_mut().for_each(|g| *g = 1.0);
        }
        Ok(Self {
            input_dim,
            widths: widths.to_vec(),
            dropout,
            layout,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn block_forward(&self, b: &BlockAt, x: &[f64], rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, BlockCache) {
        let p = &self.params;
        let y = linear(p, &b.lin, x);
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_sigma = 1.0 / (var + LN_EPS).sqrt();
        let yhat: Vec<f64> = y.iter().map(|v| (v - mean) * inv_sigma).collect();
        let z: Vec<f64> = yhat
            .iter()
            .enumerate()
            .map(|(i, h)| p[b.gamma + i] * h + p[b.beta + i])
            .collect();
        let scale: Vec<f64> = match rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout);
                (0..z.len())
                    .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                    .collect()
            }
            _ => vec![1.0; z.len()],
        };
        let mut out: Vec<f64> = z.iter().zip(&scale).map(|(v, s)| v.max(0.0) * s).collect();
        match &b.skip {
            Some(s) => out.iter_mut().zip(linear(p, s, x)).for_each(|(o, v)| *o += v),
            None => out.iter_mut().zip(x).for_each(|(o, v)| *o += v),
        }
        let cache = BlockCache {
            x: x.to_vec(),
            yhat,
            inv_sigma,
            z,
            scale,
        };
        (out, cache)
    }

    fn block_backward(&self, g: &mut [f64], b: &BlockAt, c: &BlockCache, dout: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let mut dx = vec![0f64; c.x.len()];
        match &b.skip {
            Some(s) => linear_backward(p, g, s, &c.x, dout, &mut dx),
            None => dx.iter_mut().zip(dout).for_each(|(a, d)| *a += d),
        }
        let n = dout.len();
        let mut dyhat = vec![0f64; n];
        for i in 0..n {
            let dz = if c.z[i] > 0.0 { dout[i] * c.scale[i] } else { 0.0 };
            g[b.gamma + i] += dz * c.yhat[i];
            g[b.beta + i] += dz;
            dyhat[i] = dz * p[b.gamma + i];
        }
        let mean_d = dyhat.iter().sum::<f64>() / n as f64;
        let mean_dy = dyhat.iter().zip(&c.yhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let dy: Vec<f64> = dyhat
            .iter()
            .zip(&c.yhat)
            .map(|(d, h)| c.inv_sigma * (d - mean_d - h * mean_dy))
            .collect();
        linear_backward(p, g, &b.lin, &c.x, &dy, &mut dx);
        dx
    }

    fn encode_cached(&self, x: &[f64], mut rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Vec<BlockCache>) {
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.layout.encoder.len());
        for b in &self.layout.encoder {
            let (out, c) = self.block_forward(b, &h, rng.as_deref_mut());
            caches.push(c);
            h = out;
        }
        (h, caches)
    }

    fn decode_cached(&self, z: &[f64], mut rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, Vec<BlockCache>, Vec<f64>) {
        let mut h = z.to_vec();
        let mut caches = Vec::with_capacity(self.layout.decoder.len());
        for b in &self.layout.decoder {
            let (out, c) = self.block_forward(b, &h, rng.as_deref_mut());
            caches.push(c);
            h = out;
        }
        let xhat = linear(&self.params, &self.layout.head, &h);
        (xhat, caches, h)
    }

    fn decoder_backward(&self, g: &mut [f64], caches: &[BlockCache], head_in: &[f64], dxhat: &[f64]) -> Vec<f64> {
        let mut d = vec![0f64; head_in.len()];
        linear_backward(&self.params, g, &self.layout.head, head_in, dxhat, &mut d);
        for (b, c) in self.layout.decoder.iter().zip(caches).rev() {
            d = self.block_backward(g, b, c, &d);
        }
        d
    }

    fn encoder_backward(&self, g: &mut [f64], caches: &[BlockCache], dz: &[f64]) {
        let mut d = dz.to_vec();
        for (b, c) in self.layout.encoder.iter().zip(caches).rev() {
            d = self.block_backward(g, b, c, &d);
        }
    }

    /// Latent representation with dropout off.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encode_cached(x, None).0
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        self.decode_cached(z, None).0
    }

    /// `z_q − z` for input `x`: the offset the straight-through estimator adds to the latent.
    pub fn quantization_offsets(&self, x: &[f64], codebooks: &[Codebook]) -> Vec<f64> {
        let z = self.encode(x);
        let mut r = z.clone();
        for cb in codebooks {
            let (j, _) = cb.nearest(&r);
            r.iter_mut().zip(cb.codeword(j)).for_each(|(v, &c)| *v -= c as f64);
        }
        r.iter().map(|v| -v).collect()
    }

    /// Mean squared reconstruction error of `x` when the decoder sees `encode(x) + offsets`.
    pub fn reconstruction_loss(&self, x: &[f64], offsets: &[f64]) -> f64 {
        let z = self.encode(x);
        let zq: Vec<f64> = z.iter().zip(offsets).map(|(a, b)| a + b).collect();
        mse(&self.decode(&zq), x)
    }

    /// [`Self::reconstruction_loss`] and its gradient with respect to [`Self::params`].
    /// The offsets are held constant, as the straight-through estimator does.
    pub fn reconstruction_grad(&self, x: &[f64], offsets: &[f64]) -> (f64, Vec<f64>) {
        let mut g = vec![0f64; self.params.len()];
        let (z, enc) = self.encode_cached(x, None);
        let zq: Vec<f64> = z.iter().zip(offsets).map(|(a, b)| a + b).collect();
        let (xhat, dec, head_in) = self.decode_cached(&zq, None);
        let loss = mse(&xhat, x);
        let dxhat = mse_grad(&xhat, x, 1.0);
        let dz = self.decoder_backward(&mut g, &dec, &head_in, &dxhat);
        self.encoder_backward(&mut g, &enc, &dz);
        (loss, g)
    }

    pub(crate) fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_u32::<LE>(self.input_dim as u32)?;
        w.write_u32::<LE>(self.widths.len() as u32)?;
        for &x in &self.widths {
            w.write_u32::<LE>(x as u32)?;
        }
        w.write_f64::<LE>(self.dropout)?;
        w.write_u64::<LE>(self.params.len() as u64)?;
        let weights: Vec<f32> = self.params.iter().map(|&v| v as f32).collect();
        codec::write_f32s(w, &weights)
    }

    pub(crate) fn read_from(r: &mut Cursor<&[u8]>) -> Result<Self> {
        let input_dim = codec::read_u32(r, KIND)? as usize;
        let n = codec::read_u32(r, KIND)? as usize;
        if n > 64 {
            return Err(Error::format(KIND, format!("implausible layer count {n}")));
        }
        let mut widths = Vec::with_capacity(n);
        for _ in 0..n {
            widths.push(codec::read_u32(r, KIND)? as usize);
        }
        let dropout = codec::read_f64(r, KIND)?;
        let mut ae = Self::new(input_dim, &widths, dropout, 0).map_err(|e| Error::format(KIND, e.to_string()))?;
        let count = codec::read_u64(r, KIND)? as usize;
        if count != ae.params.len() {
            return Err(Error::format(
                KIND,
                format!("{count} weights stored, layout needs {}", ae.params.len()),
            ));
        }
        let weights = codec::read_f32s(r, count, KIND)?;
        ae.params = weights.into_iter().map(f64::from).collect();
        Ok(ae)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn mse_grad(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    let n = a.len() as f64;
    a.iter().zip(b).map(|(x, y)| 2.0 * (x - y) / n * scale).collect()
}

/// Codebooks held in f64 while training.
struct TrainCodebooks {
    n_levels: usize,
    k: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TrainCodebooks {
    fn word(&self, level: usize, j: usize) -> &[f64] {
        let at = (level * self.k + j) * self.dim;
        &self.data[at..at + self.dim]
    }

    fn nearest(&self, level: usize, r: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k {
            let d: f64 = self.word(level, j).iter().zip(r).map(|(c, x)| (x - c) * (x - c)).sum();
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    }
}

#[derive(Default)]
struct SampleLoss {
    total: f64,
    recon: f64,
}

/// Full loss of one sample. With `grads`, adds `scale ×` its gradient into the
/// network and codebook gradient buffers.
fn sample_step(
    ae: &Autoencoder,
    cbs: &TrainCodebooks,
    beta: f64,
    x: &[f64],
    rng: Option<&mut ChaCha8Rng>,
    grads: Option<(&mut [f64], &mut [f64], f64)>,
) -> SampleLoss {
    let mut rng = rng;
    let (z, enc) = ae.encode_cached(x, rng.as_deref_mut());
    let dl = cbs.dim as f64;
    let mut r = z.clone();
    let mut quant_loss = 0.0;
    let mut dz = vec![0f64; z.len()];
    let mut chosen = Vec::with_capacity(cbs.n_levels);
    for level in 0..cbs.n_levels {
        let j = cbs.nearest(level, &r);
        let c = cbs.word(level, j);
        for i in 0..r.len() {
            let diff = r[i] - c[i];
            quant_loss += diff * diff / dl;
            dz[i] += 2.0 * beta * diff / dl;
        }
        chosen.push((j, r.clone()));
        r.iter_mut().zip(c).for_each(|(v, c)| *v -= c);
    }
    let zq: Vec<f64> = z.iter().zip(&r).map(|(a, b)| a - b).collect();
    let (xhat, dec, head_in) = ae.decode_cached(&zq, rng);
    let recon = mse(&xhat, x);
    let total = recon + (1.0 + beta) * quant_loss;
    if let Some((g_net, g_cb, scale)) = grads {
        for (level, (j, r_n)) in chosen.iter().enumerate() {
            let at = (level * cbs.k + j) * cbs.dim;
            let c = cbs.word(level, *j);
            for i in 0..cbs.dim {
                g_cb[at + i] -= scale * 2.0 * (r_n[i] - c[i]) / dl;
            }
        }
        let dxhat = mse_grad(&xhat, x, scale);
        let dzq = ae.decoder_backward(g_net, &dec, &head_in, &dxhat);
        let dz: Vec<f64> = dz.iter().zip(&dzq).map(|(a, b)| a * scale + b).collect();
        ae.encoder_backward(g_net, &enc, &dz);
    }
    SampleLoss { total, recon }
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let s = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    ChaCha8Rng::seed_from_u64(s)
}

fn evaluate(ae: &Autoencoder, cbs: &TrainCodebooks, beta: f64, data: &[f64]) -> (f64, f64) {
    let d = ae.input_dim;
    let losses: Vec<SampleLoss> = data
        .par_chunks_exact(d)
        .map(|x| sample_step(ae, cbs, beta, x, None, None))
        .collect();
    let n = losses.len() as f64;
    let total = losses.iter().map(|l| l.total).sum::<f64>() / n;
    let recon = losses.iter().map(|l| l.recon).sum::<f64>() / n;
    (total, recon)
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    weight_decay: f64,
    decay: Vec<bool>,
}

impl AdamW {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g;
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g * g;
            if self.decay[i] {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains an RQ-VAE on a standardized embedding matrix.
///
/// Codebooks are initialized by residual k-means on the initial latents. The
/// returned model's training curve starts with an epoch-0 evaluation before
/// any update; every entry is measured on the full matrix with dropout off.
pub fn train_rqvae(matrix: &EmbeddingMatrix, config: &RqVaeConfig) -> Result<QuantizerModel> {
    let stats = matrix
        .standardization_stats()
        .ok_or_else(|| Error::InvalidArgument("train_rqvae expects a standardized matrix".into()))?;
    if config.n_levels == 0 || config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::InvalidArgument("n_levels, epochs and batch_size must be positive".into()));
    }
    if matrix.len() < config.k {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings cannot fill a codebook of {}",
            matrix.len(),
            config.k
        )));
    }
    let d = matrix.dim();
    let data: Vec<f64> = matrix.as_flat().iter().map(|&x| x as f64).collect();
    let n = matrix.len();
    let mut ae = Autoencoder::new(d, &config.widths, config.dropout, config.seed)?;
    let latent_dim = ae.latent_dim();

    let latents: Vec<f64> = data.par_chunks_exact(d).flat_map_iter(|x| ae.encode(x)).collect();
    let init = residual_codebooks(
        latents,
        latent_dim,
        &KMeansConfig {
            n_levels: config.n_levels,
            k: config.k,
            seed: config.seed,
            max_iters: config.kmeans_iters,
        },
    )?;
    let mut cbs = TrainCodebooks {
        n_levels: config.n_levels,
        k: config.k,
        dim: latent_dim,
        data: init.iter().flat_map(|c| c.as_flat().iter().map(|&v| v as f64)).collect(),
    };

    let n_net = ae.num_params();
    let mut decay = ae.layout.decay_mask();
    decay.resize(n_net + cbs.data.len(), false);
    let mut opt = AdamW {
        m: vec![0.0; decay.len()],
        v: vec![0.0; decay.len()],
        t: 0,
        lr: config.lr,
        weight_decay: config.weight_decay,
        decay,
    };

    let beta = config.commitment_beta;
    let mut curve = Vec::with_capacity(config.epochs + 1);
    let (loss, reconstruction) = evaluate(&ae, &cbs, beta, &data);
    if !loss.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    curve.push(EpochStats {
        epoch: 0,
        loss,
        reconstruction,
    });
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut flat = Vec::with_capacity(opt.m.len());
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let shard = batch.len().div_ceil(GRAD_SHARDS);
            let partial: Vec<(Vec<f64>, Vec<f64>)> = batch
                .par_chunks(shard)
                .map(|idx| {
                    let mut g_net = vec![0f64; n_net];
                    let mut g_cb = vec![0f64; cbs.data.len()];
                    for &i in idx {
                        let mut rng = sample_rng(config.seed, epoch, i);
                        let x = &data[i * d..(i + 1) * d];
                        sample_step(&ae, &cbs, beta, x, Some(&mut rng), Some((&mut g_net, &mut g_cb, scale)));
                    }
                    (g_net, g_cb)
                })
                .collect();
            let mut grads = vec![0f64; opt.m.len()];
            for (g_net, g_cb) in &partial {
                grads[..n_net].iter_mut().zip(g_net).for_each(|(a, b)| *a += b);
                grads[n_net..].iter_mut().zip(g_cb).for_each(|(a, b)| *a += b);
            }
            flat.clear();
            flat.extend_from_slice(&ae.params);
            flat.extend_from_slice(&cbs.data);
            opt.step(&mut flat, &grads);
            ae.params.copy_from_slice(&flat[..n_net]);
            cbs.data.copy_from_slice(&flat[n_net..]);
        }
        let (loss, reconstruction) = evaluate(&ae, &cbs, beta, &data);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {loss:.6} reconstruction {reconstruction:.6}");
        curve.push(EpochStats {
            epoch,
            loss,
            reconstruction,
        });
    }

    ae.params.iter_mut().for_each(|v| *v = *v as f32 as f64);
    let codebooks = (0..config.n_levels)
        .map(|level| {
            let at = level * config.k * latent_dim;
            let words = cbs.data[at..at + config.k * latent_dim].iter().map(|&v| v as f32).collect();
            Codebook::new(level + 1, config.k, latent_dim, words)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = QuantizerModel {
        kind: QuantizerKind::Rqvae,
        codebooks,
        autoencoder: Some(ae),
        input_standardization: Some(stats.clone()),
        input_dim: d,
        latent_dim,
        config: serde_json::to_string(config)?,
        training_curve: curve,
    };
    let coverage = super::codebook_coverage(&model, matrix)?;
    for (level, c) in coverage.iter().enumerate() {
        if *c < config.coverage_floor {
            log::warn!("codebook level {} coverage {:.3} is below {:.3}", level + 1, c, config.coverage_floor);
        }
    }
    Ok(model)
}
