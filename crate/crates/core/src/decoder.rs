//! Greedy autoregressive decoding over a per-layer, per-group KV cache.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{check_tokens, group_of_head, model_forward_traced, scale_of, AttentionConfig, Checkpoint};
use crate::error::{Error, Result};
use crate::tensor::{dot, matmul, Precision, Scalar, Tensor};

/// Default cache capacity in positions.
pub const DEFAULT_CAPACITY: usize = 2048;

/// Post-projection keys and values for every layer, `G * head_dim` wide.
///
/// Storage is allocated up front for `capacity` positions; only the first
/// `len()` rows are live and counted by [`KVCache::bytes`].
#[derive(Debug, Clone)]
pub struct KVCache<F> {
    config: AttentionConfig,
    capacity: usize,
    len: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

impl<F: Scalar> KVCache<F> {
    pub fn new(config: &AttentionConfig, capacity: usize) -> Result<Self> {
        config.validate()?;
        if capacity == 0 {
            return Err(Error::Argument("cache capacity must be positive".into()));
        }
        let width = config.kv_width();
        Ok(Self {
            config: *config,
            capacity,
            len: 0,
            keys: vec![vec![F::ZERO; capacity * width]; config.n_layers],
            values: vec![vec![F::ZERO; capacity * width]; config.n_layers],
        })
    }

    /// Positions filled.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn precision(&self) -> Precision {
        F::PRECISION
    }

    /// Row width of each store: `G * head_dim`.
    pub fn width(&self) -> usize {
        self.config.kv_width()
    }

    /// `2 * n_layers * len * G * head_dim * bytes_per_element`.
    pub fn bytes(&self) -> u64 {
        (2 * self.config.n_layers * self.len * self.width() * F::PRECISION.bytes()) as u64
    }

    /// Live keys of `layer` as a `len x G*head_dim` matrix.
    pub fn keys(&self, layer: usize) -> Tensor<F> {
        let w = self.width();
        Tensor::from_vec(&[self.len, w], self.keys[layer][..self.len * w].to_vec()).expect("consistent cache shape")
    }

    pub fn values(&self, layer: usize) -> Tensor<F> {
        let w = self.width();
        Tensor::from_vec(&[self.len, w], self.values[layer][..self.len * w].to_vec()).expect("consistent cache shape")
    }

    pub fn clear(&mut self) {
        self.len = 0;
    }

    fn ensure_room(&self, extra: usize) -> Result<()> {
        if self.len + extra > self.capacity {
            return Err(Error::Capacity(format!(
                "{} cached + {extra} new positions exceeds capacity {}",
                self.len, self.capacity
            )));
        }
        Ok(())
    }
}

fn check_compatible<F: Scalar>(ckpt: &Checkpoint<F>, cache: &KVCache<F>) -> Result<()> {
    if ckpt.config != cache.config {
        return Err(Error::Config("cache was built for a different model config".into()));
    }
    if !ckpt.config.causal {
        return Err(Error::Config("incremental decoding requires a causal model".into()));
    }
    Ok(())
}

/// Feeds the prompt into the cache and returns the logits of its last position.
///
/// Fails without touching the cache if the prompt does not fit.
pub fn prefill<F: Scalar>(ckpt: &Checkpoint<F>, cache: &mut KVCache<F>, prompt: &[usize]) -> Result<Vec<F>> {
    check_compatible(ckpt, cache)?;
    if prompt.is_empty() {
        return Err(Error::Argument("empty prompt".into()));
    }
    cache.ensure_room(prompt.len())?;
    check_tokens(prompt, ckpt.config.vocab)?;
    if !cache.is_empty() {
        let mut logits = Vec::new();
        for &tok in prompt {
            logits = decode_step(ckpt, cache, tok)?;
        }
        return Ok(logits);
    }

    let trace = model_forward_traced(ckpt, prompt)?;
    let w = cache.width();
    for (layer, tr) in trace.layers.iter().enumerate() {
        cache.keys[layer][..prompt.len() * w].copy_from_slice(tr.k.data());
        cache.values[layer][..prompt.len() * w].copy_from_slice(tr.v.data());
    }
    cache.len = prompt.len();
    Ok(trace.logits.row(prompt.len() - 1).to_vec())
}

/// Appends one position to the cache and returns its logits.
pub fn decode_step<F: Scalar>(ckpt: &Checkpoint<F>, cache: &mut KVCache<F>, token: usize) -> Result<Vec<F>> {
    check_compatible(ckpt, cache)?;
    cache.ensure_room(1)?;
    check_tokens(&[token], ckpt.config.vocab)?;
    let cfg = &ckpt.config;
    let hd = cfg.head_dim;
    let w = cache.width();
    let pos = cache.len;
    let span = pos + 1;
    let scale = scale_of::<F>(cfg);

    let mut x = Tensor::from_vec(&[1, cfg.d_model], ckpt.embedding.row(token).to_vec())?;
    let mut scores = vec![F::ZERO; span];
    for (layer, weights) in ckpt.layers.iter().enumerate() {
        let q = matmul(&x, &weights.wq)?;
        let k = matmul(&x, &weights.wk)?;
        let v = matmul(&x, &weights.wv)?;
        cache.keys[layer][pos * w..span * w].copy_from_slice(k.data());
        cache.values[layer][pos * w..span * w].copy_from_slice(v.data());
        let keys = &cache.keys[layer];
        let values = &cache.values[layer];

        let mut heads = vec![F::ZERO; cfg.q_width()];
        for h in 0..cfg.n_heads {
            let g = group_of_head(h, cfg)?;
            let qh = &q.data()[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &keys[j * w + g * hd..j * w + (g + 1) * hd]) * scale;
            }
            crate::tensor::softmax_in_place(&mut scores);
            let out = &mut heads[h * hd..(h + 1) * hd];
            for (j, &p) in scores.iter().enumerate() {
                let vrow = &values[j * w + g * hd..j * w + (g + 1) * hd];
                for (o, &vv) in out.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
        let heads = Tensor::from_vec(&[1, cfg.q_width()], heads)?;
        let attn = matmul(&heads, &weights.wo)?;
        x.add_assign(&attn)?;
    }
    let logits = matmul(&x, &ckpt.unembedding)?;
    cache.len = span;
    Ok(logits.into_data())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<F: Scalar>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Tokens and per-step costs of one greedy generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Cache size after each decode step.
    pub step_cache_bytes: Vec<u64>,
    pub step_time_s: Vec<f64>,
    pub prefill_time_s: f64,
    pub total_time_s: f64,
}

impl DecodeTrace {
    /// Mean decode-step time per generated token.
    pub fn time_per_token_s(&self) -> f64 {
        if self.step_time_s.is_empty() {
            return 0.0;
        }
        self.step_time_s.iter().sum::<f64>() / self.step_time_s.len() as f64
    }
}

/// Greedy generation of `n_steps` tokens after `prompt`.
///
/// Every generated token is fed back through [`decode_step`], so the cache
/// ends holding `prompt.len() + n_steps` positions.
pub fn generate<F: Scalar>(
    ckpt: &Checkpoint<F>,
    prompt: &[usize],
    n_steps: usize,
    capacity: usize,
) -> Result<DecodeTrace> {
    if prompt.len() + n_steps > capacity {
        return Err(Error::Capacity(format!(
            "prompt ({}) + steps ({n_steps}) exceeds capacity {capacity}",
            prompt.len()
        )));
    }
    let start = Instant::now();
    let mut cache = KVCache::new(&ckpt.config, capacity)?;
    let mut logits = prefill(ckpt, &mut cache, prompt)?;
    let prefill_time_s = start.elapsed().as_secs_f64();

    let mut tokens = Vec::with_capacity(n_steps);
    let mut step_cache_bytes = Vec::with_capacity(n_steps);
    let mut step_time_s = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let next = argmax(&logits);
        tokens.push(next);
        let t0 = Instant::now();
        logits = decode_step(ckpt, &mut cache, next)?;
        step_time_s.push(t0.elapsed().as_secs_f64());
        step_cache_bytes.push(cache.bytes());
    }
    Ok(DecodeTrace {
        prompt: prompt.to_vec(),
        tokens,
        step_cache_bytes,
        step_time_s,
        prefill_time_s,
        total_time_s: start.elapsed().as_secs_f64(),
    })
}
