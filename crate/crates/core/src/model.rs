//! A small, seeded, decoder-only transformer that runs incremental inference
//! against a [`CacheSet`].
//!
//! Architecture: token embedding, `L` pre-norm blocks (RMS norm, grouped
//! query attention with rotary position encoding, RMS norm, two-layer SiLU
//! feed-forward with 4× expansion), a final RMS norm and an unembedding.
//! Rotary encoding is applied once at the token's original position; retained
//! keys keep that rotation after eviction.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cache::CacheSet;
use crate::error::{Error, Result};
use crate::policies::group_average;
use crate::tensor::{attention_step, vec_matmul, Matrix, ProbRow};

/// Token id that ends generation.
pub const EOS_TOKEN: u32 = 0;

const MODEL_MAGIC: &[u8; 4] = b"KVTM";
const MODEL_VERSION: u32 = 1;
const ROPE_BASE: f64 = 10_000.0;
const RMS_EPS: f64 = 1e-6;
const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_position: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            query_heads: 4,
            kv_heads: 4,
            head_dim: 16,
            vocab: 256,
            max_position: 4096,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("query_heads", self.query_heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("vocab", self.vocab),
            ("max_position", self.max_position),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.query_heads.is_multiple_of(self.kv_heads) {
            return Err(Error::config(format!(
                "kv_heads {} does not divide query_heads {}",
                self.kv_heads, self.query_heads
            )));
        }
        if self.vocab > u32::MAX as usize {
            return Err(Error::config("vocabulary too large"));
        }
        Ok(())
    }

    /// Model width `H × d′`.
    pub fn model_dim(&self) -> usize {
        self.query_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }

    pub fn hidden_dim(&self) -> usize {
        FFN_EXPANSION * self.model_dim()
    }

    /// Total scalar parameters, norms included.
    pub fn parameter_count(&self) -> usize {
        let d = self.model_dim();
        let kv = self.kv_dim();
        let ff = self.hidden_dim();
        let per_layer = d + d * d + 2 * d * kv + d * d + d + d * ff + ff * d;
        self.vocab * d + self.layers * per_layer + d + d * self.vocab
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    embeddings: Matrix,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    unembedding: Matrix,
}

/// Logits plus every query head's attention row for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub position: usize,
    pub logits: Vec<f32>,
    /// Indexed `layer * query_heads + head`.
    pub attention: Vec<ProbRow>,
    /// Retained positions of each `(layer, kv_head)` after this step,
    /// indexed `layer * kv_heads + kv_head`.
    pub positions: Vec<Vec<usize>>,
    query_heads: usize,
    kv_heads: usize,
}

impl StepOutput {
    pub fn attention(&self, layer: usize, head: usize) -> &ProbRow {
        &self.attention[layer * self.query_heads + head]
    }

    pub fn retained(&self, layer: usize, kv_head: usize) -> &[usize] {
        &self.positions[layer * self.kv_heads + kv_head]
    }
}

/// Weight-sharing view used by the dense reference in tests.
impl ToyModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> &[f32] {
        &self.final_norm
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembedding
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = self.embeddings.data().len() + self.final_norm.len() + self.unembedding.data().len();
        for l in &self.layers {
            n += l.attn_norm.len() + l.ffn_norm.len();
            n += [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2]
                .iter()
                .map(|m| m.data().len())
                .sum::<usize>();
        }
        n
    }
}

pub fn init_model(config: ModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let d = config.model_dim();
    let kv = config.kv_dim();
    let ff = config.hidden_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0f32, 1.0 / (d as f32).sqrt()).expect("finite std");
    let mut gauss = |rows: usize, cols: usize| {
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("gaussian weights are finite")
    };
    let embeddings = gauss(config.vocab, d);
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: gauss(d, d),
            wk: gauss(d, kv),
            wv: gauss(d, kv),
            wo: gauss(d, d),
            ffn_norm: vec![1.0; d],
            w1: gauss(d, ff),
            w2: gauss(ff, d),
        })
        .collect();
    let final_norm = vec![1.0; d];
    let unembedding = gauss(d, config.vocab);
    Ok(ToyModel {
        config,
        embeddings,
        layers,
        final_norm,
        unembedding,
    })
}

pub fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter()
        .zip(gain)
        .map(|(&v, &g)| (f64::from(v) * inv * f64::from(g)) as f32)
        .collect()
}

/// Rotates consecutive pairs of each `head_dim`-sized head in place by the
/// angles of absolute position `pos`.
pub fn apply_rope(x: &mut [f32], head_dim: usize, pos: usize) {
    let pairs = head_dim / 2;
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..pairs {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let a = f64::from(head[2 * i]);
            let b = f64::from(head[2 * i + 1]);
            head[2 * i] = (a * cos - b * sin) as f32;
            head[2 * i + 1] = (a * sin + b * cos) as f32;
        }
    }
}

pub fn silu(x: f32) -> f32 {
    let x = f64::from(x);
    (x / (1.0 + (-x).exp())) as f32
}

/// Feed-forward sublayer output (without the residual).
pub fn feed_forward(layer: &LayerWeights, x: &[f32]) -> Vec<f32> {
    let normed = rms_norm(x, &layer.ffn_norm);
    let hidden: Vec<f32> = vec_matmul(&normed, &layer.w1).into_iter().map(silu).collect();
    vec_matmul(&hidden, &layer.w2)
}

/// Projects the final hidden state to vocabulary logits.
pub fn logits_from_hidden(model: &ToyModel, hidden: &[f32]) -> Vec<f32> {
    vec_matmul(&rms_norm(hidden, &model.final_norm), &model.unembedding)
}

/// Runs one token through the model, evicting and appending in every
/// `(layer, kv_head)` cache and updating statistics with the group-averaged
/// attention rows.
pub fn forward_step(
    model: &ToyModel,
    token: u32,
    position: usize,
    caches: &mut CacheSet,
) -> Result<StepOutput> {
    let cfg = &model.config;
    if position >= cfg.max_position {
        return Err(Error::invalid(format!(
            "position {position} exceeds max_position {}",
            cfg.max_position
        )));
    }
    if token as usize >= cfg.vocab {
        return Err(Error::invalid(format!("token {token} outside vocabulary of {}", cfg.vocab)));
    }
    if caches.layers() != cfg.layers || caches.kv_heads() != cfg.kv_heads {
        return Err(Error::invalid("cache set shape does not match the model"));
    }
    let dh = cfg.head_dim;
    let g = cfg.group_size();
    let scale = (1.0 / (dh as f64).sqrt()) as f32;
    let mut hidden = model.embeddings.row(token as usize).to_vec();
    let mut attention = Vec::with_capacity(cfg.layers * cfg.query_heads);
    let mut retained = Vec::with_capacity(cfg.layers * cfg.kv_heads);

    for (l, layer) in model.layers.iter().enumerate() {
        let normed = rms_norm(&hidden, &layer.attn_norm);
        let mut q = vec_matmul(&normed, &layer.wq);
        let mut k = vec_matmul(&normed, &layer.wk);
        let v = vec_matmul(&normed, &layer.wv);
        apply_rope(&mut q, dh, position);
        apply_rope(&mut k, dh, position);

        for kv in 0..cfg.kv_heads {
            caches.admit(l, kv, position, &k[kv * dh..(kv + 1) * dh], &v[kv * dh..(kv + 1) * dh])?;
        }

        let mut concat = Vec::with_capacity(cfg.model_dim());
        let layer_start = attention.len();
        for h in 0..cfg.query_heads {
            let head = caches.head(l, h / g);
            let out = attention_step(&q[h * dh..(h + 1) * dh], head.keys(), head.values(), scale)?;
            concat.extend_from_slice(&out.output);
            attention.push(out.probs);
        }
        for kv in 0..cfg.kv_heads {
            let rows: Vec<&[f32]> = attention[layer_start + kv * g..layer_start + (kv + 1) * g]
                .iter()
                .map(ProbRow::as_slice)
                .collect();
            let avg = group_average(&rows)?;
            caches.observe(l, kv, avg.as_slice())?;
            retained.push(caches.head(l, kv).positions().to_vec());
        }

        let attn_out = vec_matmul(&concat, &layer.wo);
        for (x, a) in hidden.iter_mut().zip(&attn_out) {
            *x += a;
        }
        let ff = feed_forward(layer, &hidden);
        for (x, f) in hidden.iter_mut().zip(&ff) {
            *x += f;
        }
    }

    Ok(StepOutput {
        position,
        logits: logits_from_hidden(model, &hidden),
        attention,
        positions: retained,
        query_heads: cfg.query_heads,
        kv_heads: cfg.kv_heads,
    })
}

/// Greedy argmax; ties go to the lowest token id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub steps: Vec<StepOutput>,
}

impl Generation {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}

/// Prefills `prompt` token by token, then greedily decodes up to `max_new`
/// tokens, stopping early after [`EOS_TOKEN`]. Eviction follows the policy
/// and budget bound into `caches`.
pub fn generate(
    model: &ToyModel,
    prompt: &[u32],
    max_new: usize,
    caches: &mut CacheSet,
) -> Result<Generation> {
    let mut steps = Vec::with_capacity(prompt.len() + max_new);
    let tokens = generate_with(model, prompt, max_new, caches, |s| steps.push(s))?;
    Ok(Generation {
        tokens,
        prompt_len: prompt.len(),
        steps,
    })
}

/// [`generate`] that hands each step to `on_step` instead of collecting.
pub fn generate_with(
    model: &ToyModel,
    prompt: &[u32],
    max_new: usize,
    caches: &mut CacheSet,
    mut on_step: impl FnMut(StepOutput),
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    let mut tokens = prompt.to_vec();
    let mut next = 0;
    for (pos, &tok) in prompt.iter().enumerate() {
        let out = forward_step(model, tok, pos, caches)?;
        next = argmax(&out.logits);
        on_step(out);
    }
    for i in 0..max_new {
        tokens.push(next);
        if next == EOS_TOKEN || i + 1 == max_new {
            break;
        }
        let out = forward_step(model, next, tokens.len() - 1, caches)?;
        next = argmax(&out.logits);
        on_step(out);
    }
    Ok(tokens)
}

impl ToyModel {
    /// Serialises to the `KVTM` binary layout: magic, `u32` version, the six
    /// size fields as `u32`, the seed as `u64`, then every weight as a
    /// little-endian `f32` in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(40 + 4 * c.parameter_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        for v in [c.layers, c.query_heads, c.kv_heads, c.head_dim, c.vocab, c.max_position] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.seed.to_le_bytes());
        let mut put = |xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        put(self.embeddings.data());
        for l in &self.layers {
            put(&l.attn_norm);
            put(l.wq.data());
            put(l.wk.data());
            put(l.wv.data());
            put(l.wo.data());
            put(&l.ffn_norm);
            put(l.w1.data());
            put(l.w2.data());
        }
        put(&self.final_norm);
        put(self.unembedding.data());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::parse("model file", m);
        if bytes.len() < 40 || &bytes[..4] != MODEL_MAGIC {
            return Err(bad("missing KVTM magic"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let f: Vec<usize> = (0..6).map(|i| u32_at(8 + 4 * i) as usize).collect();
        let seed = u64::from_le_bytes(bytes[32..40].try_into().unwrap());
        let config = ModelConfig {
            layers: f[0],
            query_heads: f[1],
            kv_heads: f[2],
            head_dim: f[3],
            vocab: f[4],
            max_position: f[5],
            seed,
        };
        config.validate()?;
        let body = &bytes[40..];
        if body.len() != 4 * config.parameter_count() {
            return Err(bad(&format!(
                "expected {} weight bytes, found {}",
                4 * config.parameter_count(),
                body.len()
            )));
        }
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let mut mat = |rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, floats.by_ref().take(rows * cols).collect())
        };
        let d = config.model_dim();
        let kv = config.kv_dim();
        let ff = config.hidden_dim();
        let embeddings = mat(config.vocab, d)?;
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attn_norm = mat(1, d)?.data().to_vec();
            let wq = mat(d, d)?;
            let wk = mat(d, kv)?;
            let wv = mat(d, kv)?;
            let wo = mat(d, d)?;
            let ffn_norm = mat(1, d)?.data().to_vec();
            let w1 = mat(d, ff)?;
            let w2 = mat(ff, d)?;
            layers.push(LayerWeights {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w1,
                w2,
            });
        }
        let final_norm = mat(1, d)?.data().to_vec();
        let unembedding = mat(d, config.vocab)?;
        Ok(ToyModel {
            config,
            embeddings,
            layers,
            final_norm,
            unembedding,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
