//! Hand-derived gradients, plain SGD, synthetic next-token tasks, and the
//! convert-then-uptrain experiments built on them.

use serde::{Deserialize, Serialize};

use crate::attention::{check_tokens, group_of_head, model_forward, model_forward_traced, scale_of, AttentionConfig, Checkpoint};
use crate::convert::{convert_checkpoint, encode_checkpoint, fnv1a64, ConversionMethod};
use crate::costmodel::median;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{derive_seed, matmul, matmul_nt, matmul_tn, Rng, Scalar, Tensor};

// Child-seed stream labels.
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_UPTRAIN: u64 = 4;
const STREAM_TABLE: u64 = 5;
const STREAM_RANDOM_INIT: u64 = 6;
const STREAM_RETRY: u64 = 7;

/// Synthetic sequence source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Next token drawn from a fixed random distribution conditioned on the previous two.
    Markov2,
    /// Uniform random prefix of `offset` tokens, then `x[i] = x[i - offset]`.
    Copy { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub vocab: usize,
    pub seq_len: usize,
}

/// Logit scale of the random Markov transition rows; larger is more peaked.
const MARKOV_SHARPNESS: f64 = 2.5;

/// Materialized sampler for a [`SyntheticTask`].
#[derive(Debug, Clone)]
pub struct TaskSampler {
    task: SyntheticTask,
    /// Markov2: `vocab * vocab` rows of cumulative probabilities.
    cdf: Vec<f64>,
    /// Markov2: per-context entropy in nats.
    entropy: Vec<f64>,
}

impl SyntheticTask {
    pub fn markov(seed: u64, vocab: usize, seq_len: usize) -> Self {
        Self { kind: TaskKind::Markov2, seed, vocab, seq_len }
    }

    pub fn sampler(&self) -> Result<TaskSampler> {
        if self.vocab < 2 || self.seq_len < 2 {
            return Err(Error::Argument("task needs vocab >= 2 and seq_len >= 2".into()));
        }
        let v = self.vocab;
        let (mut cdf, mut entropy) = (Vec::new(), Vec::new());
        match self.kind {
            TaskKind::Markov2 => {
                let mut rng = Rng::new(derive_seed(self.seed, STREAM_TABLE));
                cdf.reserve(v * v * v);
                for _ in 0..v * v {
                    let logits: Vec<f64> = (0..v).map(|_| rng.normal() * MARKOV_SHARPNESS).collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = w.iter().sum();
                    let mut acc = 0.0;
                    let mut h = 0.0;
                    for wi in &w {
                        let p = wi / z;
                        acc += p;
                        if p > 0.0 {
                            h -= p * p.ln();
                        }
                        cdf.push(acc);
                    }
                    entropy.push(h);
                }
            }
            TaskKind::Copy { offset } => {
                if offset == 0 || offset >= self.seq_len {
                    return Err(Error::Argument(format!("copy offset {offset} must be in 1..seq_len")));
                }
            }
        }
        Ok(TaskSampler { task: *self, cdf, entropy })
    }
}

impl TaskSampler {
    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<usize> {
        let SyntheticTask { vocab: v, seq_len: n, .. } = self.task;
        let mut seq = Vec::with_capacity(n);
        match self.task.kind {
            TaskKind::Markov2 => {
                seq.push(rng.below(v));
                seq.push(rng.below(v));
                while seq.len() < n {
                    let ctx = seq[seq.len() - 2] * v + seq[seq.len() - 1];
                    let row = &self.cdf[ctx * v..(ctx + 1) * v];
                    let u = rng.next_f64();
                    let next = row.iter().position(|&c| u < c).unwrap_or(v - 1);
                    seq.push(next);
                }
            }
            TaskKind::Copy { offset } => {
                for i in 0..n {
                    let tok = if i < offset { rng.below(v) } else { seq[i - offset] };
                    seq.push(tok);
                }
            }
        }
        seq
    }

    pub fn corpus(&self, count: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = Rng::new(seed);
        (0..count).map(|_| self.sample(&mut rng)).collect()
    }

    /// Held-out evaluation sequences, fixed by the task seed.
    pub fn eval_corpus(&self, count: usize) -> Vec<Vec<usize>> {
        self.corpus(count, derive_seed(self.task.seed, STREAM_EVAL))
    }

    /// Mean per-prediction cross-entropy of the true process on `corpus`
    /// (the best achievable loss for a model that sees the same tokens).
    pub fn entropy_floor(&self, corpus: &[Vec<usize>]) -> f64 {
        let v = self.task.vocab;
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in corpus {
            for i in 1..seq.len() {
                total += match self.task.kind {
                    TaskKind::Markov2 if i >= 2 => self.entropy[seq[i - 2] * v + seq[i - 1]],
                    TaskKind::Copy { offset } if i >= offset => 0.0,
                    // Unconditioned prefix tokens are uniform.
                    _ => (v as f64).ln(),
                };
                count += 1;
            }
        }
        total / count.max(1) as f64
    }
}

/// Mean next-token cross-entropy over every position that has a successor.
pub fn eval_loss<F: Scalar>(ckpt: &Checkpoint<F>, corpus: &[Vec<usize>]) -> Result<f64> {
    let parts = par::map(corpus, |seq| -> Result<(f64, usize)> {
        let logits = model_forward(ckpt, seq)?;
        let mut total = 0.0;
        for i in 0..seq.len().saturating_sub(1) {
            total += token_nll(logits.row(i), seq[i + 1]).to_f64();
        }
        Ok((total, seq.len().saturating_sub(1)))
    });
    let mut total = 0.0;
    let mut count = 0;
    for p in parts {
        let (t, c) = p?;
        total += t;
        count += c;
    }
    if count == 0 {
        return Err(Error::Argument("evaluation corpus has no predictions".into()));
    }
    Ok(total / count as f64)
}

fn token_nll<F: Scalar>(row: &[F], target: usize) -> F {
    let m = row.iter().fold(F::NEG_INFINITY, |a, &b| a.max(b));
    let z: F = row.iter().map(|&l| (l - m).exp()).sum();
    z.ln() + m - row[target]
}

/// Loss summed over one sequence and gradients of `inv_count * loss_sum`.
fn sequence_grads<F: Scalar>(ckpt: &Checkpoint<F>, tokens: &[usize], inv_count: F) -> Result<(F, Checkpoint<F>)> {
    let cfg = &ckpt.config;
    let t = tokens.len();
    let hd = cfg.head_dim;
    let scale = scale_of::<F>(cfg);
    let trace = model_forward_traced(ckpt, tokens)?;
    let mut grads = Checkpoint::zeros(*cfg);

    // Softmax cross-entropy; the last position has no target.
    let mut loss = F::ZERO;
    let mut dlogits = Tensor::zeros(&[t, cfg.vocab]);
    for i in 0..t - 1 {
        let row = trace.logits.row(i);
        let target = tokens[i + 1];
        loss += token_nll(row, target);
        let out = dlogits.row_mut(i);
        out.copy_from_slice(row);
        crate::tensor::softmax_in_place(out);
        out[target] -= F::ONE;
        for v in out.iter_mut() {
            *v *= inv_count;
        }
    }

    let last = &trace.residuals[cfg.n_layers];
    grads.unembedding = matmul_tn(last, &dlogits)?;
    let mut dx = matmul_nt(&dlogits, &ckpt.unembedding)?;

    for l in (0..cfg.n_layers).rev() {
        let w = &ckpt.layers[l];
        let tr = &trace.layers[l];
        let x = &trace.residuals[l];

        let d_out = &dx;
        let dwo = matmul_tn(&tr.heads, d_out)?;
        let dheads = matmul_nt(d_out, &w.wo)?;
        let mut dq = Tensor::zeros(&[t, cfg.q_width()]);
        let mut dk = Tensor::zeros(&[t, cfg.kv_width()]);
        let mut dv = Tensor::zeros(&[t, cfg.kv_width()]);
        for h in 0..cfg.n_heads {
            let g = group_of_head(h, cfg)?;
            let p = &tr.probs[h];
            let doh = dheads.col_block(h * hd, hd)?;
            let qh = tr.q.col_block(h * hd, hd)?;
            let kg = tr.k.col_block(g * hd, hd)?;
            let vg = tr.v.col_block(g * hd, hd)?;

            let dp = matmul_nt(&doh, &vg)?;
            dv.add_col_block(g * hd, &matmul_tn(p, &doh)?)?;
            let mut ds = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let prow = p.row(i);
                let dprow = dp.row(i);
                let inner: F = prow.iter().zip(dprow).map(|(&a, &b)| a * b).sum();
                for ((o, &pv), &dpv) in ds.row_mut(i).iter_mut().zip(prow).zip(dprow) {
                    *o = pv * (dpv - inner) * scale;
                }
            }
            dq.add_col_block(h * hd, &matmul(&ds, &kg)?)?;
            dk.add_col_block(g * hd, &matmul_tn(&ds, &qh)?)?;
        }
        let gl = &mut grads.layers[l];
        gl.wq = matmul_tn(x, &dq)?;
        gl.wk = matmul_tn(x, &dk)?;
        gl.wv = matmul_tn(x, &dv)?;
        gl.wo = dwo;

        let mut dx_in = dx.clone();
        dx_in.add_assign(&matmul_nt(&dq, &w.wq)?)?;
        dx_in.add_assign(&matmul_nt(&dk, &w.wk)?)?;
        dx_in.add_assign(&matmul_nt(&dv, &w.wv)?)?;
        dx = dx_in;
    }

    for (i, &tok) in tokens.iter().enumerate() {
        let src = dx.row(i).to_vec();
        for (o, v) in grads.embedding.row_mut(tok).iter_mut().zip(src) {
            *o += v;
        }
    }
    Ok((loss, grads))
}

/// Mean next-token cross-entropy of the batch and its gradient.
pub fn loss_and_grads<F: Scalar>(ckpt: &Checkpoint<F>, batch: &[Vec<usize>]) -> Result<(f64, Checkpoint<F>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    ckpt.validate()?;
    let mut count = 0usize;
    for seq in batch {
        if seq.len() < 2 {
            return Err(Error::Argument("every training sequence needs at least two tokens".into()));
        }
        check_tokens(seq, ckpt.config.vocab)?;
        count += seq.len() - 1;
    }
    let inv = F::ONE / F::from_usize(count);
    let parts = par::map(batch, |seq| sequence_grads(ckpt, seq, inv));

    let mut loss = F::ZERO;
    let mut grads = Checkpoint::zeros(ckpt.config);
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            acc.add_assign(t)?;
        }
    }
    let loss = (loss * inv).to_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    for t in grads.tensors() {
        t.check_finite("gradient")?;
    }
    Ok((loss, grads))
}

/// `w <- w - lr * g` for every weight.
pub fn sgd_step<F: Scalar>(ckpt: &mut Checkpoint<F>, grads: &Checkpoint<F>, lr: F) -> Result<()> {
    if ckpt.config != grads.config {
        return Err(Error::Dimension("gradient config differs from checkpoint config".into()));
    }
    for (w, g) in ckpt.tensors_mut().into_iter().zip(grads.tensors()) {
        if w.shape() != g.shape() {
            return Err(Error::Dimension(format!("gradient shape {:?} vs weight {:?}", g.shape(), w.shape())));
        }
        for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
            *wv -= lr * gv;
        }
    }
    Ok(())
}

/// Optimizer and data settings shared by pretraining and uptraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub task: SyntheticTask,
    pub lr: f64,
    pub batch_size: usize,
    /// Size of the fixed training corpus cycled through in order.
    pub train_sequences: usize,
    pub eval_sequences: usize,
    /// Original (base) training budget that `alpha` is a fraction of.
    pub base_steps: usize,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_sequences == 0 || self.eval_sequences == 0 {
            return Err(Error::Argument("batch size and corpus sizes must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Argument(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        Ok(())
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            task: SyntheticTask::markov(0, 32, 24),
            lr: 0.5,
            batch_size: 8,
            train_sequences: 4096,
            eval_sequences: 64,
            base_steps: 2000,
        }
    }
}

/// Runs `steps` SGD steps, returning the per-step training loss (measured before each update).
fn run_sgd<F: Scalar>(
    ckpt: &mut Checkpoint<F>,
    corpus: &[Vec<usize>],
    settings: &TrainSettings,
    steps: usize,
    mut on_step: impl FnMut(usize, &Checkpoint<F>) -> Result<()>,
) -> Result<Vec<f64>> {
    let lr = F::from_f64(settings.lr);
    let mut trajectory = Vec::with_capacity(steps);
    let bs = settings.batch_size;
    let mut batch = Vec::with_capacity(bs);
    for step in 0..steps {
        on_step(step, ckpt)?;
        batch.clear();
        for i in 0..bs {
            batch.push(corpus[(step * bs + i) % corpus.len()].clone());
        }
        let (loss, grads) = match loss_and_grads(ckpt, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged { step, loss: f64::NAN, trajectory });
            }
            Err(e) => return Err(e),
        };
        trajectory.push(loss);
        sgd_step(ckpt, &grads, lr)?;
        if ckpt.tensors().iter().any(|t| t.check_finite("weights").is_err()) {
            return Err(Error::Diverged { step, loss, trajectory });
        }
    }
    Ok(trajectory)
}

/// Largest single-step increase of the training loss (0 if it never rises).
pub fn max_loss_increase(trajectory: &[f64]) -> f64 {
    trajectory.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRun {
    pub config: AttentionConfig,
    pub settings: TrainSettings,
    pub seed: u64,
    pub loss_trajectory: Vec<f64>,
    pub eval_loss: f64,
    pub max_loss_increase: f64,
}

/// Trains a multi-head model from scratch on the task for `settings.base_steps`.
pub fn pretrain_base<F: Scalar>(
    config: AttentionConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(Checkpoint<F>, BaseRun)> {
    settings.validate()?;
    if settings.base_steps == 0 {
        return Err(Error::Argument("base training needs at least one step".into()));
    }
    if config.n_kv_groups != config.n_heads {
        return Err(Error::Config("the base model must be multi-head (G = H)".into()));
    }
    if config.vocab != settings.task.vocab {
        return Err(Error::Config(format!("model vocab {} != task vocab {}", config.vocab, settings.task.vocab)));
    }
    let sampler = settings.task.sampler()?;
    let mut ckpt = Checkpoint::init(config, derive_seed(seed, STREAM_INIT))?;
    let corpus = sampler.corpus(settings.train_sequences, derive_seed(seed, STREAM_DATA));
    let trajectory = run_sgd(&mut ckpt, &corpus, settings, settings.base_steps, |_, _| Ok(()))?;
    let eval = eval_loss(&ckpt, &sampler.eval_corpus(settings.eval_sequences))?;
    let run = BaseRun {
        config,
        settings: *settings,
        seed,
        max_loss_increase: max_loss_increase(&trajectory),
        loss_trajectory: trajectory,
        eval_loss: eval,
    };
    Ok((ckpt, run))
}

/// Uptraining fractions at which eval loss is recorded when the budget reaches them.
pub const ALPHA_GRID: [f64; 3] = [0.0, 0.05, 0.10];

/// Retries allowed when an uptraining run diverges.
pub const MAX_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub alpha: f64,
    pub step: usize,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryRecord {
    pub seed: u64,
    pub diverged_at_step: usize,
}

/// One convert-then-uptrain run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    /// FNV-1a of the serialized base checkpoint, hex.
    pub base_id: String,
    pub config: AttentionConfig,
    pub method: ConversionMethod,
    pub target_groups: usize,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: usize,
    pub loss_trajectory: Vec<f64>,
    pub eval_points: Vec<EvalPoint>,
    pub base_eval_loss: f64,
    pub final_eval_loss: f64,
    pub max_loss_increase: f64,
    pub retries: Vec<RetryRecord>,
}

impl TrainRun {
    pub fn eval_at(&self, alpha: f64) -> Option<f64> {
        self.eval_points.iter().find(|p| (p.alpha - alpha).abs() < 1e-12).map(|p| p.eval_loss)
    }
}

pub fn checkpoint_id<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<String> {
    Ok(format!("{:016x}", fnv1a64(&encode_checkpoint(ckpt)?)))
}

/// Converts `base` to `target_groups` and trains it for `round(alpha * base_steps)` steps.
pub fn uptrain<F: Scalar>(
    base: &Checkpoint<F>,
    settings: &TrainSettings,
    target_groups: usize,
    method: ConversionMethod,
    alpha: f64,
    seed: u64,
) -> Result<(Checkpoint<F>, TrainRun)> {
    settings.validate()?;
    if base.config.n_kv_groups != base.config.n_heads {
        return Err(Error::Config("uptraining starts from a multi-head (G = H) checkpoint".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let sampler = settings.task.sampler()?;
    let eval_corpus = sampler.eval_corpus(settings.eval_sequences);
    let base_eval_loss = eval_loss(base, &eval_corpus)?;
    let steps = (alpha * settings.base_steps as f64).round() as usize;
    let checkpoints: Vec<(f64, usize)> = ALPHA_GRID
        .iter()
        .filter(|&&a| a <= alpha + 1e-12)
        .map(|&a| (a, (a * settings.base_steps as f64).round() as usize))
        .collect();

    let mut retries = Vec::new();
    let mut attempt_seed = seed;
    loop {
        let method = match method {
            ConversionMethod::RandomInit { seed: s } => {
                ConversionMethod::RandomInit { seed: derive_seed(s ^ attempt_seed, STREAM_RANDOM_INIT) }
            }
            m => m,
        };
        let mut ckpt = convert_checkpoint(base, target_groups, method)?;
        let corpus = sampler.corpus(settings.train_sequences, derive_seed(attempt_seed, STREAM_UPTRAIN));
        let mut eval_points = Vec::new();
        let result = run_sgd(&mut ckpt, &corpus, settings, steps, |step, ck| {
            for &(a, s) in checkpoints.iter().filter(|(_, s)| *s == step) {
                eval_points.push(EvalPoint { alpha: a, step: s, eval_loss: eval_loss(ck, &eval_corpus)? });
            }
            Ok(())
        });
        match result {
            Ok(trajectory) => {
                let final_eval_loss = eval_loss(&ckpt, &eval_corpus)?;
                for &(a, s) in checkpoints.iter().filter(|(_, s)| *s == steps) {
                    if !eval_points.iter().any(|p| p.step == s) {
                        eval_points.push(EvalPoint { alpha: a, step: s, eval_loss: final_eval_loss });
                    }
                }
                eval_points.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
                let run = TrainRun {
                    base_id: checkpoint_id(base)?,
                    config: ckpt.config,
                    method,
                    target_groups,
                    alpha,
                    lr: settings.lr,
                    batch_size: settings.batch_size,
                    seed,
                    steps,
                    max_loss_increase: max_loss_increase(&trajectory),
                    loss_trajectory: trajectory,
                    eval_points,
                    base_eval_loss,
                    final_eval_loss,
                    retries,
                };
                return Ok((ckpt, run));
            }
            Err(Error::Diverged { step, .. }) if retries.len() < MAX_RETRIES => {
                retries.push(RetryRecord { seed: attempt_seed, diverged_at_step: step });
                attempt_seed = derive_seed(attempt_seed, STREAM_RETRY);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Multi-seed experiment settings: each seed trains its own base model on its own task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySettings {
    pub config: AttentionConfig,
    pub train: TrainSettings,
    pub seeds: Vec<u64>,
}

impl StudySettings {
    fn for_seed(&self, seed: u64) -> TrainSettings {
        let mut s = self.train;
        s.task.seed = derive_seed(seed, STREAM_TABLE);
        s
    }
}

/// Eval loss of one (method, G) conversion at a given alpha per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base_eval_loss: f64,
    pub runs: Vec<TrainRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub method: ConversionMethod,
    pub target_groups: usize,
    pub alpha: f64,
    pub per_seed: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub settings: StudySettings,
    pub base_eval_median: f64,
    pub cells: Vec<StudyCell>,
    pub seeds: Vec<SeedResult>,
}

impl StudyReport {
    pub fn median(&self, method: &str, groups: usize, alpha: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method.name() == method && c.target_groups == groups && (c.alpha - alpha).abs() < 1e-12)
            .map(|c| c.median)
    }
}

/// One uptraining arm of a study: convert with `method` to `groups`, train to `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyArm {
    pub method: ConversionMethod,
    pub groups: usize,
    pub alpha: f64,
}

/// Pretrains one base per seed (in parallel across seeds) and runs every arm on it.
pub fn run_study<F: Scalar>(settings: &StudySettings, arms: &[StudyArm]) -> Result<StudyReport> {
    if settings.seeds.is_empty() {
        return Err(Error::Argument("study needs at least one seed".into()));
    }
    let results = par::map(&settings.seeds, |&seed| -> Result<SeedResult> {
        let train = settings.for_seed(seed);
        let (base, base_run) = pretrain_base::<F>(settings.config, &train, seed)?;
        let runs = arms
            .iter()
            .map(|arm| {
                let method = match arm.method {
                    ConversionMethod::RandomInit { .. } => ConversionMethod::RandomInit { seed },
                    m => m,
                };
                uptrain(&base, &train, arm.groups, method, arm.alpha, seed).map(|(_, r)| r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SeedResult { seed, base_eval_loss: base_run.eval_loss, runs })
    });
    let seeds = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for (i, arm) in arms.iter().enumerate() {
        for &a in ALPHA_GRID.iter().filter(|&&a| a <= arm.alpha + 1e-12) {
            let per_seed: Vec<f64> = seeds.iter().filter_map(|s| s.runs[i].eval_at(a)).collect();
            if per_seed.len() == seeds.len() {
                let exists = cells.iter().any(|c: &StudyCell| {
                    c.method.name() == arm.method.name() && c.target_groups == arm.groups && (c.alpha - a).abs() < 1e-12
                });
                if !exists {
                    cells.push(StudyCell {
                        method: arm.method,
                        target_groups: arm.groups,
                        alpha: a,
                        median: median(&per_seed),
                        per_seed,
                    });
                }
            }
        }
    }
    let base_eval_median = median(&seeds.iter().map(|s| s.base_eval_loss).collect::<Vec<_>>());
    Ok(StudyReport { settings: settings.clone(), base_eval_median, cells, seeds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AttentionConfig {
        AttentionConfig::new(2, 2, 2, 1, 6, true).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let mut ck = Checkpoint::<f64>::init(tiny(), 0).unwrap();
        ck.unembedding = Tensor::zeros(&[4, 6]);
        let (loss, _) = loss_and_grads(&ck, &[vec![0, 1, 2, 3, 4]]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_example_keeps_mean_loss() {
        let ck = Checkpoint::<f64>::init(tiny(), 1).unwrap();
        let seq = vec![0, 5, 2, 3, 1];
        let (a, ga) = loss_and_grads(&ck, std::slice::from_ref(&seq)).unwrap();
        let (b, gb) = loss_and_grads(&ck, &[seq.clone(), seq]).unwrap();
        assert!((a - b).abs() < 1e-14);
        for (x, y) in ga.tensors().iter().zip(gb.tensors()) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-14);
        }
    }

    #[test]
    fn loss_rejects_bad_batches() {
        let ck = Checkpoint::<f32>::init(tiny(), 1).unwrap();
        assert!(loss_and_grads(&ck, &[]).is_err());
        assert!(loss_and_grads(&ck, &[vec![1]]).is_err());
        assert!(loss_and_grads(&ck, &[vec![1, 9]]).is_err());
    }

    #[test]
    fn sgd_examples() {
        let ck = Checkpoint::<f64>::init(tiny(), 2).unwrap();
        let (_, g) = loss_and_grads(&ck, &[vec![0, 1, 2]]).unwrap();

        let mut a = ck.clone();
        sgd_step(&mut a, &g, 0.0).unwrap();
        assert_eq!(a, ck);

        let mut b = ck.clone();
        sgd_step(&mut b, &Checkpoint::zeros(ck.config), 0.3).unwrap();
        assert_eq!(b, ck);

        let mut single = Checkpoint::zeros(ck.config);
        single.layers[0].wk.data_mut()[3] = 0.75;
        let mut c = ck.clone();
        sgd_step(&mut c, &single, 0.5).unwrap();
        let before = ck.layers[0].wk.data()[3];
        assert_eq!(c.layers[0].wk.data()[3], before - 0.5 * 0.75);
        assert_eq!(c.layers[0].wq, ck.layers[0].wq);
    }

    #[test]
    fn sgd_rejects_mismatched_grads() {
        let mut ck = Checkpoint::<f64>::init(tiny(), 2).unwrap();
        let other = Checkpoint::<f64>::zeros(AttentionConfig::new(2, 1, 2, 1, 6, true).unwrap());
        assert!(sgd_step(&mut ck, &other, 0.1).is_err());
    }

    #[test]
    fn markov_sampler_is_reproducible() {
        let s = SyntheticTask::markov(3, 8, 12).sampler().unwrap();
        assert_eq!(s.corpus(4, 1), s.corpus(4, 1));
        assert_ne!(s.corpus(4, 1), s.corpus(4, 2));
        for seq in s.corpus(4, 1) {
            assert_eq!(seq.len(), 12);
            assert!(seq.iter().all(|&t| t < 8));
        }
        let floor = s.entropy_floor(&s.corpus(32, 5));
        assert!(floor > 0.0 && floor < 8f64.ln());
    }

    #[test]
    fn copy_task_repeats_at_offset() {
        let task = SyntheticTask { kind: TaskKind::Copy { offset: 3 }, seed: 0, vocab: 5, seq_len: 10 };
        let s = task.sampler().unwrap();
        let seq = s.sample(&mut Rng::new(4));
        for i in 3..10 {
            assert_eq!(seq[i], seq[i - 3]);
        }
        let bad = SyntheticTask { kind: TaskKind::Copy { offset: 10 }, ..task };
        assert!(bad.sampler().is_err());
    }

    fn quick_settings(vocab: usize) -> TrainSettings {
        TrainSettings {
            task: SyntheticTask::markov(0, vocab, 8),
            lr: 0.5,
            batch_size: 4,
            train_sequences: 64,
            eval_sequences: 8,
            base_steps: 20,
        }
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = AttentionConfig::new(2, 2, 2, 1, 6, true).unwrap();
        let s = quick_settings(6);
        let (a, ra) = pretrain_base::<f32>(cfg, &s, 7).unwrap();
        let (b, rb) = pretrain_base::<f32>(cfg, &s, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.loss_trajectory, rb.loss_trajectory);
        assert_eq!(ra.loss_trajectory.len(), 20);
    }

    #[test]
    fn zero_lr_full_batch_keeps_loss_constant() {
        let cfg = AttentionConfig::new(2, 2, 2, 1, 6, true).unwrap();
        let s = TrainSettings { lr: 0.0, train_sequences: 4, ..quick_settings(6) };
        let (_, run) = pretrain_base::<f32>(cfg, &s, 1).unwrap();
        let first = run.loss_trajectory[0];
        assert!(run.loss_trajectory.iter().all(|l| (l - first).abs() < 1e-7));
        assert_eq!(run.max_loss_increase, 0.0);
    }

    #[test]
    fn pretrain_requires_mha_and_matching_vocab() {
        let s = quick_settings(6);
        assert!(pretrain_base::<f32>(AttentionConfig::new(2, 1, 2, 1, 6, true).unwrap(), &s, 0).is_err());
        assert!(pretrain_base::<f32>(AttentionConfig::new(2, 2, 2, 1, 7, true).unwrap(), &s, 0).is_err());
    }

    #[test]
    fn uptrain_alpha_zero_identity() {
        let cfg = AttentionConfig::new(2, 2, 2, 1, 6, true).unwrap();
        let s = quick_settings(6);
        let (base, br) = pretrain_base::<f32>(cfg, &s, 0).unwrap();
        let (_, run) = uptrain(&base, &s, 2, ConversionMethod::MeanPool, 0.0, 0).unwrap();
        assert_eq!(run.steps, 0);
        assert!(run.loss_trajectory.is_empty());
        assert!((run.final_eval_loss - br.eval_loss).abs() < 1e-6);
        assert_eq!(run.eval_points.len(), 1);
    }

    #[test]
    fn uptrain_steps_and_grid() {
        let cfg = AttentionConfig::new(2, 2, 2, 1, 6, true).unwrap();
        let s = TrainSettings { base_steps: 100, ..quick_settings(6) };
        let (base, _) = pretrain_base::<f32>(cfg, &TrainSettings { base_steps: 5, ..s }, 0).unwrap();
        let (ck, run) = uptrain(&base, &s, 1, ConversionMethod::FirstHead, 0.1, 0).unwrap();
        assert_eq!(ck.config.n_kv_groups, 1);
        assert_eq!(run.steps, 10);
        assert_eq!(run.loss_trajectory.len(), 10);
        let alphas: Vec<f64> = run.eval_points.iter().map(|p| p.alpha).collect();
        assert_eq!(alphas, vec![0.0, 0.05, 0.10]);
        assert_eq!(run.eval_at(0.10), Some(run.final_eval_loss));
        assert!(uptrain(&base, &s, 1, ConversionMethod::MeanPool, 1.5, 0).is_err());
    }

    #[test]
    fn max_increase_of_trajectory() {
        assert_eq!(max_loss_increase(&[3.0, 2.0, 2.5, 1.0, 1.25]), 0.5);
        assert_eq!(max_loss_increase(&[]), 0.0);
    }
}
