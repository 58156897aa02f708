//! Grouped-query attention and the minimal decoder-only stack built on it.
//!
//! Query heads are split into `n_kv_groups` contiguous blocks; every head in
//! a block reads the same key and value head. `n_kv_groups == n_heads` is
//! ordinary multi-head attention, `n_kv_groups == 1` is multi-query.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, softmax_in_place, Rng, Scalar, Tensor};

/// Model shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub head_dim: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub causal: bool,
}

impl AttentionConfig {
    /// Builds a validated config with `d_model = n_heads * head_dim`.
    pub fn new(
        n_heads: usize,
        n_kv_groups: usize,
        head_dim: usize,
        n_layers: usize,
        vocab: usize,
        causal: bool,
    ) -> Result<Self> {
        let cfg = Self { d_model: n_heads * head_dim, n_heads, n_kv_groups, head_dim, n_layers, vocab, causal };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_groups", self.n_kv_groups),
            ("head_dim", self.head_dim),
            ("n_layers", self.n_layers),
            ("vocab", self.vocab),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_kv_groups > self.n_heads {
            return Err(Error::Config(format!("G ({}) > H ({})", self.n_kv_groups, self.n_heads)));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return Err(Error::Config(format!(
                "H mod G != 0 (H={}, G={})",
                self.n_heads, self.n_kv_groups
            )));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model ({}) != H * head_dim ({} * {})",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }

    /// Query heads per key/value group.
    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_kv_groups
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_groups * self.head_dim
    }

    /// Same shape with a different group count.
    pub fn with_groups(&self, groups: usize) -> Result<Self> {
        let cfg = Self { n_kv_groups: groups, ..*self };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Group index of query head `head`: heads `[g*H/G, (g+1)*H/G)` form group `g`.
pub fn group_of_head(head: usize, config: &AttentionConfig) -> Result<usize> {
    if head >= config.n_heads {
        return Err(Error::OutOfRange(format!("head {head} >= H ({})", config.n_heads)));
    }
    Ok(head / config.heads_per_group())
}

/// Projection matrices of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F> {
    /// `d_model x H*head_dim`
    pub wq: Tensor<F>,
    /// `d_model x G*head_dim`
    pub wk: Tensor<F>,
    /// `d_model x G*head_dim`
    pub wv: Tensor<F>,
    /// `H*head_dim x d_model`
    pub wo: Tensor<F>,
}

impl<F: Scalar> LayerWeights<F> {
    pub fn zeros(config: &AttentionConfig) -> Self {
        let d = config.d_model;
        Self {
            wq: Tensor::zeros(&[d, config.q_width()]),
            wk: Tensor::zeros(&[d, config.kv_width()]),
            wv: Tensor::zeros(&[d, config.kv_width()]),
            wo: Tensor::zeros(&[config.q_width(), d]),
        }
    }

    pub fn random(config: &AttentionConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let in_std = 1.0 / (d as f64).sqrt();
        let out_std = 1.0 / (config.q_width() as f64).sqrt();
        Self {
            wq: Tensor::randn(&[d, config.q_width()], in_std, rng),
            wk: Tensor::randn(&[d, config.kv_width()], in_std, rng),
            wv: Tensor::randn(&[d, config.kv_width()], in_std, rng),
            wo: Tensor::randn(&[config.q_width(), d], out_std, rng),
        }
    }

    pub fn check_shapes(&self, config: &AttentionConfig) -> Result<()> {
        let d = config.d_model;
        let expect = [
            ("Wq", &self.wq, [d, config.q_width()]),
            ("Wk", &self.wk, [d, config.kv_width()]),
            ("Wv", &self.wv, [d, config.kv_width()]),
            ("Wo", &self.wo, [config.q_width(), d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::Dimension(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> LayerWeights<G> {
        LayerWeights { wq: self.wq.cast(), wk: self.wk.cast(), wv: self.wv.cast(), wo: self.wo.cast() }
    }

    pub fn tensors(&self) -> [&Tensor<F>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

/// Every weight of the decoder plus its config. Gradients reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: AttentionConfig,
    /// `vocab x d_model`
    pub embedding: Tensor<F>,
    pub layers: Vec<LayerWeights<F>>,
    /// `d_model x vocab`
    pub unembedding: Tensor<F>,
}

impl<F: Scalar> Checkpoint<F> {
    /// Fresh randomly initialized model.
    pub fn init(config: AttentionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let embedding = Tensor::randn(&[config.vocab, config.d_model], 1.0, &mut rng);
        let layers = (0..config.n_layers).map(|_| LayerWeights::random(&config, &mut rng)).collect();
        let unembedding =
            Tensor::randn(&[config.d_model, config.vocab], 1.0 / (config.d_model as f64).sqrt(), &mut rng);
        Ok(Self { config, embedding, layers, unembedding })
    }

    /// All-zero checkpoint with the shapes of `config`.
    pub fn zeros(config: AttentionConfig) -> Self {
        Self {
            config,
            embedding: Tensor::zeros(&[config.vocab, config.d_model]),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(&config)).collect(),
            unembedding: Tensor::zeros(&[config.d_model, config.vocab]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.embedding.shape() != [c.vocab, c.d_model] {
            return Err(Error::Dimension(format!("embedding has shape {:?}", self.embedding.shape())));
        }
        if self.unembedding.shape() != [c.d_model, c.vocab] {
            return Err(Error::Dimension(format!("unembedding has shape {:?}", self.unembedding.shape())));
        }
        if self.layers.len() != c.n_layers {
            return Err(Error::Dimension(format!("{} layers, config says {}", self.layers.len(), c.n_layers)));
        }
        for layer in &self.layers {
            layer.check_shapes(c)?;
        }
        Ok(())
    }

    /// Weight tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Tensor<F>> {
        let mut out = vec![&self.embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.unembedding);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.unembedding);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Checkpoint<G> {
        Checkpoint {
            config: self.config,
            embedding: self.embedding.cast(),
            layers: self.layers.iter().map(LayerWeights::cast).collect(),
            unembedding: self.unembedding.cast(),
        }
    }
}

/// Intermediates of one attention layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace<F> {
    pub q: Tensor<F>,
    pub k: Tensor<F>,
    pub v: Tensor<F>,
    /// Attention probabilities per query head, each `T x T`.
    pub probs: Vec<Tensor<F>>,
    /// Concatenated head outputs, `T x H*head_dim`.
    pub heads: Tensor<F>,
    pub out: Tensor<F>,
}

pub(crate) fn scale_of<F: Scalar>(config: &AttentionConfig) -> F {
    F::ONE / F::from_usize(config.head_dim).sqrt()
}

/// Grouped-query self-attention over `x` (`T x d_model`).
pub fn attention_forward<F: Scalar>(
    config: &AttentionConfig,
    weights: &LayerWeights<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    Ok(attention_forward_traced(config, weights, x)?.out)
}

pub fn attention_forward_traced<F: Scalar>(
    config: &AttentionConfig,
    weights: &LayerWeights<F>,
    x: &Tensor<F>,
) -> Result<AttentionTrace<F>> {
    config.validate()?;
    weights.check_shapes(config)?;
    if x.shape().len() != 2 || x.cols() != config.d_model || x.rows() == 0 {
        return Err(Error::Dimension(format!("input shape {:?}, expected T x {}", x.shape(), config.d_model)));
    }
    let t = x.rows();
    let hd = config.head_dim;
    let q = matmul(x, &weights.wq)?;
    let k = matmul(x, &weights.wk)?;
    let v = matmul(x, &weights.wv)?;
    let scale = scale_of::<F>(config);

    let mut heads = Tensor::zeros(&[t, config.q_width()]);
    let mut probs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let g = group_of_head(h, config)?;
        let qh = q.col_block(h * hd, hd)?;
        let kg = k.col_block(g * hd, hd)?;
        let vg = v.col_block(g * hd, hd)?;
        let mut p = matmul_nt(&qh, &kg)?.scale(scale);
        for i in 0..t {
            let row = p.row_mut(i);
            if config.causal {
                for s in row.iter_mut().skip(i + 1) {
                    *s = F::NEG_INFINITY;
                }
            }
            softmax_in_place(row);
        }
        let oh = matmul(&p, &vg)?;
        heads.set_col_block(h * hd, &oh)?;
        probs.push(p);
    }
    let out = matmul(&heads, &weights.wo)?;
    Ok(AttentionTrace { q, k, v, probs, heads, out })
}

/// Residual-stream activations of a full forward pass.
#[derive(Debug, Clone)]
pub struct ModelTrace<F> {
    /// Input to each layer, plus the final residual stream (`n_layers + 1` entries).
    pub residuals: Vec<Tensor<F>>,
    pub layers: Vec<AttentionTrace<F>>,
    pub logits: Tensor<F>,
}

pub(crate) fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= vocab) {
        return Err(Error::OutOfRange(format!("token {bad} >= vocab ({vocab})")));
    }
    Ok(())
}

pub(crate) fn embed<F: Scalar>(ckpt: &Checkpoint<F>, tokens: &[usize]) -> Result<Tensor<F>> {
    check_tokens(tokens, ckpt.config.vocab)?;
    let d = ckpt.config.d_model;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &tok in tokens {
        data.extend_from_slice(ckpt.embedding.row(tok));
    }
    Tensor::from_vec(&[tokens.len(), d], data)
}

/// Logits (`T x vocab`) of the embed, residual-attention stack, unembed model.
pub fn model_forward<F: Scalar>(ckpt: &Checkpoint<F>, tokens: &[usize]) -> Result<Tensor<F>> {
    Ok(model_forward_traced(ckpt, tokens)?.logits)
}

pub fn model_forward_traced<F: Scalar>(ckpt: &Checkpoint<F>, tokens: &[usize]) -> Result<ModelTrace<F>> {
    if tokens.is_empty() {
        return Err(Error::Argument("empty token sequence".into()));
    }
    let mut x = embed(ckpt, tokens)?;
    let mut residuals = Vec::with_capacity(ckpt.layers.len() + 1);
    let mut layers = Vec::with_capacity(ckpt.layers.len());
    for w in &ckpt.layers {
        let tr = attention_forward_traced(&ckpt.config, w, &x)?;
        let next = x.add(&tr.out)?;
        residuals.push(x);
        layers.push(tr);
        x = next;
    }
    let logits = matmul(&x, &ckpt.unembedding)?;
    residuals.push(x);
    Ok(ModelTrace { residuals, layers, logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Standard multi-head attention written independently of the grouped path:
    /// plain loops, every head owns its own K/V slice.
    fn mha_oracle(x: &[f64], t: usize, d: usize, h: usize, hd: usize, w: &LayerWeights<f64>, causal: bool) -> Vec<f64> {
        let proj = |m: &Tensor<f64>, width: usize| {
            let mut out = vec![0.0; t * width];
            for i in 0..t {
                for j in 0..width {
                    out[i * width + j] = (0..d).map(|c| x[i * d + c] * m.get(c, j)).sum();
                }
            }
            out
        };
        let (q, k, v) = (proj(&w.wq, h * hd), proj(&w.wk, h * hd), proj(&w.wv, h * hd));
        let mut concat = vec![0.0; t * h * hd];
        for head in 0..h {
            for i in 0..t {
                let limit = if causal { i + 1 } else { t };
                let scores: Vec<f64> = (0..limit)
                    .map(|j| (0..hd).map(|c| q[i * h * hd + head * hd + c] * k[j * h * hd + head * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in 0..hd {
                    concat[i * h * hd + head * hd + c] =
                        (0..limit).map(|j| (scores[j] - m).exp() / z * v[j * h * hd + head * hd + c]).sum();
                }
            }
        }
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            for j in 0..d {
                out[i * d + j] = (0..h * hd).map(|c| concat[i * h * hd + c] * w.wo.get(c, j)).sum();
            }
        }
        out
    }

    #[test]
    fn group_of_head_examples() {
        let c = |g| AttentionConfig::new(8, g, 2, 1, 4, true).unwrap();
        assert_eq!(group_of_head(3, &c(4)).unwrap(), 1);
        assert_eq!(group_of_head(5, &c(1)).unwrap(), 0);
        assert_eq!(group_of_head(7, &c(8)).unwrap(), 7);
        assert!(matches!(group_of_head(8, &c(8)), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(8, 3, 4, 1, 4, true).unwrap_err().to_string().contains("H mod G != 0"));
        assert!(AttentionConfig::new(4, 8, 4, 1, 4, true).is_err());
        assert!(AttentionConfig::new(4, 0, 4, 1, 4, true).is_err());
        let mut c = AttentionConfig::new(4, 2, 4, 1, 4, true).unwrap();
        c.d_model = 17;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_projection_width_is_groups_times_head_dim() {
        let c = AttentionConfig::new(8, 2, 4, 1, 4, true).unwrap();
        let w = LayerWeights::<f32>::zeros(&c);
        assert_eq!(w.wk.shape(), &[32, 8]);
        assert_eq!(w.wv.shape(), &[32, 8]);
        assert_eq!(w.wq.shape(), &[32, 32]);
    }

    #[test]
    fn gqa_h_matches_mha_oracle_seed0() {
        let cfg = AttentionConfig::new(2, 2, 4, 1, 4, true).unwrap();
        let mut rng = Rng::new(0);
        let w = LayerWeights::<f64>::random(&cfg, &mut rng);
        let x = Tensor::<f64>::randn(&[3, cfg.d_model], 1.0, &mut rng);
        let got = attention_forward(&cfg, &w.cast::<f32>(), &x.cast::<f32>()).unwrap();
        let want = mha_oracle(x.data(), 3, cfg.d_model, 2, 4, &w, true);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_token_reduces_to_value_output_chain() {
        let cfg = AttentionConfig::new(4, 2, 2, 1, 4, true).unwrap();
        let mut rng = Rng::new(0);
        let w = LayerWeights::<f64>::random(&cfg, &mut rng);
        let x = Tensor::<f64>::randn(&[1, cfg.d_model], 1.0, &mut rng);
        let got = attention_forward(&cfg, &w, &x).unwrap();
        // softmax over one position is 1: each head outputs its group's value row.
        let v = matmul(&x, &w.wv).unwrap();
        let mut concat = Tensor::zeros(&[1, cfg.q_width()]);
        for h in 0..4 {
            let g = group_of_head(h, &cfg).unwrap();
            concat.set_col_block(h * 2, &v.col_block(g * 2, 2).unwrap()).unwrap();
        }
        let want = matmul(&concat, &w.wo).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn zero_wo_gives_embedding_unembedding_chain() {
        let cfg = AttentionConfig::new(2, 1, 2, 1, 4, true).unwrap();
        let mut ckpt = Checkpoint::<f32>::init(cfg, 0).unwrap();
        ckpt.layers[0].wo = Tensor::zeros(&[4, 4]);
        ckpt.embedding = Tensor::identity(4);
        let logits = model_forward(&ckpt, &[0, 1, 2, 3]).unwrap();
        assert_eq!(logits, ckpt.unembedding);
    }

    #[test]
    fn rejects_out_of_range_token() {
        let cfg = AttentionConfig::new(2, 1, 2, 1, 4, true).unwrap();
        let ckpt = Checkpoint::<f32>::init(cfg, 0).unwrap();
        assert!(matches!(model_forward(&ckpt, &[0, 4]), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn rejects_bad_input_width() {
        let cfg = AttentionConfig::new(2, 1, 2, 1, 4, true).unwrap();
        let w = LayerWeights::<f32>::zeros(&cfg);
        assert!(attention_forward(&cfg, &w, &Tensor::zeros(&[3, 5])).is_err());
    }
}
