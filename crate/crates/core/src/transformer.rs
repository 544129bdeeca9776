//! Minimal decoder-only transformer with a KV cache.
//!
//! Prefill processes a whole prefix with a batched, causally masked attention;
//! decode extends a cache by one position. Because masking skips every key
//! after the query position, hidden state `h[p]` depends only on inputs
//! `1..=p`, which is what makes merged prefills over a shared public context
//! exact.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextKind, ContextPayload, PublicContext};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformerError {
    #[error("sequence length {len} exceeds maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("empty input: a cache must be started by a prefill of at least one token")]
    EmptyInput,
    #[error("token id {token} outside vocabulary of size {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("context kind {0:?} cannot be merged; expected an autoregressive context")]
    KindMismatch(ContextKind),
    #[error("position {position} outside the action range {first}..={last}")]
    InvalidPosition { position: usize, first: usize, last: usize },
    #[error("invalid transformer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            vocab_size: 64,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), TransformerError> {
        let all_positive = [
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.vocab_size,
            self.max_seq_len,
        ]
        .iter()
        .all(|&v| v > 0);
        if !all_positive {
            return Err(TransformerError::InvalidConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(TransformerError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Multiply-add count of a prefill over `m` positions, counting each
    /// multiply-add as two flops.
    pub fn prefill_flops(&self, m: usize) -> u64 {
        let d = self.d_model as u64;
        let m = m as u64;
        let dense = 2 * m * (4 * d * d + 2 * d * self.d_ff() as u64);
        // Causal scores and weighted sums touch m(m+1)/2 key positions each.
        let attention = 2 * 2 * d * (m * (m + 1) / 2);
        self.n_layers as u64 * (dense + attention)
    }

    /// Flops of one decode step when the cache already holds `m` positions.
    pub fn decode_flops(&self, m: usize) -> u64 {
        let d = self.d_model as u64;
        let dense = 2 * (4 * d * d + 2 * d * self.d_ff() as u64);
        let attention = 2 * 2 * d * (m as u64 + 1);
        self.n_layers as u64 * (dense + attention)
    }
}

/// Virtual cost units of a prefill over `m` positions, at `flops_per_unit`
/// flops per unit and at least one unit.
pub fn prefill_cost_units(cfg: &TransformerConfig, m: usize, flops_per_unit: u64) -> u64 {
    cfg.prefill_flops(m).div_ceil(flops_per_unit.max(1)).max(1)
}

#[derive(Debug, Clone)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0f32, 1.0 / (cols as f32).sqrt()).expect("positive std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x` for `x` of length `cols`.
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn layer_norm(x: &[f32]) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

#[derive(Debug, Clone)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

/// Keys and values of every layer for positions `1..=len`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KvCache {
    /// `keys[layer][position]` is a `d_model` vector.
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One input position: a vocabulary token or a latent vector from perception.
#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Token(u32),
    Latent(Vec<f32>),
}

#[derive(Debug, Clone)]
pub struct CausalTransformer {
    cfg: TransformerConfig,
    token_embedding: Matrix,
    position_embedding: Matrix,
    latent_type: Vec<f32>,
    blocks: Vec<Block>,
}

impl CausalTransformer {
    pub fn new(cfg: TransformerConfig) -> Result<Self, TransformerError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let token_embedding = Matrix::random(cfg.vocab_size, d, &mut rng);
        let position_embedding = Matrix::random(cfg.max_seq_len, d, &mut rng);
        let latent_type = Matrix::random(1, d, &mut rng).data;
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                wq: Matrix::random(d, d, &mut rng),
                wk: Matrix::random(d, d, &mut rng),
                wv: Matrix::random(d, d, &mut rng),
                wo: Matrix::random(d, d, &mut rng),
                w1: Matrix::random(cfg.d_ff(), d, &mut rng),
                w2: Matrix::random(d, cfg.d_ff(), &mut rng),
            })
            .collect();
        Ok(Self {
            cfg,
            token_embedding,
            position_embedding,
            latent_type,
            blocks,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    fn embed(&self, input: &Input, position: usize) -> Result<Vec<f32>, TransformerError> {
        let mut x = match input {
            Input::Token(t) => {
                if *t as usize >= self.cfg.vocab_size {
                    return Err(TransformerError::UnknownToken {
                        token: *t,
                        vocab: self.cfg.vocab_size,
                    });
                }
                self.token_embedding.row(*t as usize).to_vec()
            }
            Input::Latent(v) => {
                let mut x = self.latent_type.clone();
                for (xi, vi) in x.iter_mut().zip(v) {
                    *xi += vi;
                }
                x
            }
        };
        for (xi, pi) in x.iter_mut().zip(self.position_embedding.row(position)) {
            *xi += pi;
        }
        Ok(x)
    }

    fn check_len(&self, len: usize) -> Result<(), TransformerError> {
        if len > self.cfg.max_seq_len {
            return Err(TransformerError::LengthExceeded {
                len,
                max: self.cfg.max_seq_len,
            });
        }
        Ok(())
    }

    fn mlp(&self, block: &Block, x: &mut [f32]) {
        let hidden: Vec<f32> = block.w1.apply(&layer_norm(x)).into_iter().map(gelu).collect();
        for (xi, yi) in x.iter_mut().zip(block.w2.apply(&hidden)) {
            *xi += yi;
        }
    }

    /// Softmax-weighted value sum for one head of one query over keys `0..=last`.
    fn attend(&self, q: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>], head: usize, last: usize) -> Vec<f32> {
        let hd = self.cfg.d_model / self.cfg.n_heads;
        let span = head * hd..(head + 1) * hd;
        let scale = 1.0 / (hd as f32).sqrt();
        let scores: Vec<f32> = (0..=last)
            .map(|j| dot(&q[span.clone()], &keys[j][span.clone()]) * scale)
            .collect();
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let weights: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f32 = weights.iter().sum();
        let mut out = vec![0.0; hd];
        for (j, w) in weights.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&values[j][span.clone()]) {
                *o += w / total * v;
            }
        }
        out
    }

    /// Batched causal forward over `inputs` from an empty cache.
    pub fn prefill_inputs(&self, inputs: &[Input]) -> Result<(Vec<Vec<f32>>, KvCache), TransformerError> {
        if inputs.is_empty() {
            return Err(TransformerError::EmptyInput);
        }
        self.check_len(inputs.len())?;
        let mut xs = inputs
            .iter()
            .enumerate()
            .map(|(p, input)| self.embed(input, p))
            .collect::<Result<Vec<_>, _>>()?;
        let mut cache = KvCache::default();
        for block in &self.blocks {
            let normed: Vec<Vec<f32>> = xs.iter().map(|x| layer_norm(x)).collect();
            let q: Vec<Vec<f32>> = normed.iter().map(|x| block.wq.apply(x)).collect();
            let k: Vec<Vec<f32>> = normed.iter().map(|x| block.wk.apply(x)).collect();
            let v: Vec<Vec<f32>> = normed.iter().map(|x| block.wv.apply(x)).collect();
            for (i, x) in xs.iter_mut().enumerate() {
                let heads: Vec<f32> = (0..self.cfg.n_heads)
                    .flat_map(|h| self.attend(&q[i], &k, &v, h, i))
                    .collect();
                for (xi, yi) in x.iter_mut().zip(block.wo.apply(&heads)) {
                    *xi += yi;
                }
                self.mlp(block, x);
            }
            cache.keys.push(k);
            cache.values.push(v);
        }
        let hidden = xs.iter().map(|x| layer_norm(x)).collect();
        Ok((hidden, cache))
    }

    pub fn prefill(&self, tokens: &[u32]) -> Result<(Vec<Vec<f32>>, KvCache), TransformerError> {
        let inputs: Vec<Input> = tokens.iter().map(|&t| Input::Token(t)).collect();
        self.prefill_inputs(&inputs)
    }

    /// Extends `cache` by one position and returns that position's hidden state.
    pub fn decode_input(&self, input: &Input, cache: &KvCache) -> Result<(Vec<f32>, KvCache), TransformerError> {
        if cache.is_empty() {
            return Err(TransformerError::EmptyInput);
        }
        let pos = cache.len();
        self.check_len(pos + 1)?;
        let mut x = self.embed(input, pos)?;
        let mut next = cache.clone();
        for (l, block) in self.blocks.iter().enumerate() {
            let normed = layer_norm(&x);
            let q = block.wq.apply(&normed);
            next.keys[l].push(block.wk.apply(&normed));
            next.values[l].push(block.wv.apply(&normed));
            let heads: Vec<f32> = (0..self.cfg.n_heads)
                .flat_map(|h| self.attend(&q, &next.keys[l], &next.values[l], h, pos))
                .collect();
            for (xi, yi) in x.iter_mut().zip(block.wo.apply(&heads)) {
                *xi += yi;
            }
            self.mlp(block, &mut x);
        }
        Ok((layer_norm(&x), next))
    }

    pub fn decode(&self, token: u32, cache: &KvCache) -> Result<(Vec<f32>, KvCache), TransformerError> {
        self.decode_input(&Input::Token(token), cache)
    }

    /// Logits over the vocabulary, tied to the token embedding.
    pub fn logits(&self, hidden: &[f32]) -> Vec<f32> {
        self.token_embedding.apply(hidden)
    }

    pub fn greedy(&self, hidden: &[f32]) -> u32 {
        let logits = self.logits(hidden);
        let mut best = 0;
        for (i, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = i;
            }
        }
        best as u32
    }

    /// Input sequence of an autoregressive context: vision latents, language
    /// latents, then action tokens. Returns the inputs and the prefix length `l`.
    pub fn context_inputs(&self, ctx: &PublicContext) -> Result<(Vec<Input>, usize), TransformerError> {
        let ContextPayload::Autoregressive {
            vision_tokens,
            language_tokens,
            action_tokens,
        } = &ctx.payload
        else {
            return Err(TransformerError::KindMismatch(ctx.kind()));
        };
        let latent = |v: &Vec<f64>| Input::Latent(v.iter().map(|&x| x as f32).collect());
        let mut inputs: Vec<Input> = vision_tokens.iter().chain(language_tokens).map(latent).collect();
        let l = inputs.len();
        inputs.extend(action_tokens.iter().map(|&t| Input::Token(t)));
        Ok((inputs, l))
    }

    /// One prefill over the whole context, returning the hidden state at each
    /// requested 1-based position in `l+1..=l+j`.
    pub fn merged_generate(
        &self,
        ctx: &PublicContext,
        positions: &[usize],
    ) -> Result<BTreeMap<usize, Vec<f32>>, TransformerError> {
        let (inputs, l) = self.context_inputs(ctx)?;
        self.check_len(inputs.len())?;
        let last = inputs.len();
        for &p in positions {
            if p <= l || p > last {
                return Err(TransformerError::InvalidPosition {
                    position: p,
                    first: l + 1,
                    last,
                });
            }
        }
        let (hidden, _) = self.prefill_inputs(&inputs)?;
        Ok(positions.iter().map(|&p| (p, hidden[p - 1].clone())).collect())
    }
}

/// Relative difference `|a - b| / (|b| + eps)` under the Euclidean norm.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt();
    diff / (norm + 1e-12)
}
