//! Roofline accounting for one decode step and a wall-clock decode benchmark.
//!
//! FLOP convention: one multiply-add is two FLOPs. Per layer and batch row,
//! a decode step does `d_model * (H + G + G + H) * head_dim` projection MACs,
//! `T * H * head_dim` MACs for the score matrix and the same again for the
//! value aggregation, where `T` is the number of cached positions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, Checkpoint};
use crate::decoder::generate;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Precision, Scalar};

pub const FLOP_CONVENTION: &str = "flops = 2 * (weight MACs + attention MACs); weight MACs = batch * layers * d_model * (2H + 2G) * head_dim; attention MACs = batch * layers * 2 * seq_len * H * head_dim";

pub const SHARDING_NOTE: &str = "kv heads per partition = max(ceil(G / P), 1); for G > 1 this extrapolates the single-head replication rule";

/// Fixed CSV header shared by cost and bench reports.
pub const CSV_HEADER: &str = "groups,kv_bytes,weight_bytes,flops,pred_time_s,wall_time_s_median,trials";

/// `2 * n_layers * batch * seq_len * G * head_dim * bytes_per_element`.
pub fn kv_cache_bytes(config: &AttentionConfig, seq_len: usize, batch: usize, precision: Precision) -> u64 {
    2 * config.n_layers as u64
        * batch as u64
        * seq_len as u64
        * config.n_kv_groups as u64
        * config.head_dim as u64
        * precision.bytes() as u64
}

/// KV heads each of `partitions` shards holds when `groups` heads are split
/// across them; a shard with no head of its own keeps a replica.
pub fn sharded_kv_heads_per_partition(groups: usize, partitions: usize) -> usize {
    groups.div_ceil(partitions.max(1)).max(1)
}

/// Loaded KV bytes relative to an unreplicated layout: `per_partition * P / G`.
pub fn replication_waste(groups: usize, partitions: usize) -> f64 {
    (sharded_kv_heads_per_partition(groups, partitions) * partitions) as f64 / groups as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub bandwidth_bytes_per_s: f64,
    pub peak_flops: f64,
    pub partitions: usize,
}

impl HardwareSpec {
    pub fn new(bandwidth_bytes_per_s: f64, peak_flops: f64, partitions: usize) -> Result<Self> {
        let hw = Self { bandwidth_bytes_per_s, peak_flops, partitions };
        hw.validate()?;
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0;
        if !positive(self.bandwidth_bytes_per_s) || !positive(self.peak_flops) || self.partitions == 0 {
            return Err(Error::Argument(format!("hardware figures must be positive: {self:?}")));
        }
        Ok(())
    }

    /// A single desktop CPU core, roughly.
    pub fn desk() -> Self {
        Self { bandwidth_bytes_per_s: 20e9, peak_flops: 50e9, partitions: 1 }
    }

    /// An 8-way sharded accelerator slice.
    pub fn accelerator_pod() -> Self {
        Self { bandwidth_bytes_per_s: 1.2e12, peak_flops: 275e12, partitions: 8 }
    }
}

/// Analytic cost of one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub groups: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub precision: Precision,
    pub kv_heads_per_partition: usize,
    pub replication_waste: f64,
    /// KV bytes loaded across all partitions, replication included.
    pub kv_bytes_per_step: u64,
    pub weight_bytes_per_step: u64,
    pub flops_per_step: u64,
    pub bandwidth_time_s: f64,
    pub compute_time_s: f64,
    pub predicted_time_s: f64,
    pub bandwidth_bound: bool,
    pub arithmetic_intensity: f64,
}

impl CostReport {
    pub fn total_bytes(&self) -> u64 {
        self.kv_bytes_per_step + self.weight_bytes_per_step
    }
}

/// Bytes of the attention projection matrices, loaded once per step.
pub fn weight_bytes(config: &AttentionConfig, precision: Precision) -> u64 {
    let per_layer = 2 * config.d_model * config.q_width() + 2 * config.d_model * config.kv_width();
    (config.n_layers * per_layer * precision.bytes()) as u64
}

pub fn weight_macs(config: &AttentionConfig, batch: usize) -> u64 {
    (batch * config.n_layers * config.d_model * (2 * config.q_width() + 2 * config.kv_width())) as u64
}

pub fn attention_macs(config: &AttentionConfig, seq_len: usize, batch: usize) -> u64 {
    (batch * config.n_layers * 2 * seq_len * config.n_heads * config.head_dim) as u64
}

/// Roofline estimate: `max(bytes / bandwidth, flops / peak)` over `P` partitions.
pub fn predict_step_time(
    config: &AttentionConfig,
    hw: &HardwareSpec,
    seq_len: usize,
    batch: usize,
    precision: Precision,
) -> Result<CostReport> {
    config.validate()?;
    hw.validate()?;
    let p = hw.partitions;
    let per_partition = sharded_kv_heads_per_partition(config.n_kv_groups, p);
    let kv_bytes = kv_cache_bytes(config, seq_len, batch, precision) / config.n_kv_groups as u64
        * (per_partition * p) as u64;
    let weight_bytes = weight_bytes(config, precision);
    let flops = 2 * (weight_macs(config, batch) + attention_macs(config, seq_len, batch));
    let bandwidth_time_s = (kv_bytes + weight_bytes) as f64 / (hw.bandwidth_bytes_per_s * p as f64);
    let compute_time_s = flops as f64 / (hw.peak_flops * p as f64);
    Ok(CostReport {
        groups: config.n_kv_groups,
        seq_len,
        batch,
        precision,
        kv_heads_per_partition: per_partition,
        replication_waste: replication_waste(config.n_kv_groups, p),
        kv_bytes_per_step: kv_bytes,
        weight_bytes_per_step: weight_bytes,
        flops_per_step: flops,
        bandwidth_time_s,
        compute_time_s,
        predicted_time_s: bandwidth_time_s.max(compute_time_s),
        bandwidth_bound: bandwidth_time_s >= compute_time_s,
        arithmetic_intensity: flops as f64 / (kv_bytes + weight_bytes) as f64,
    })
}

/// Analytic sweep over group counts, one report per `G`.
pub fn cost_sweep(
    config: &AttentionConfig,
    groups: &[usize],
    hw: &HardwareSpec,
    seq_len: usize,
    batch: usize,
    precision: Precision,
) -> Result<Vec<CostReport>> {
    groups
        .iter()
        .map(|&g| predict_step_time(&config.with_groups(g)?, hw, seq_len, batch, precision))
        .collect()
}

pub fn cost_csv(reports: &[CostReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},,0",
            r.groups, r.kv_bytes_per_step, r.weight_bytes_per_step, r.flops_per_step, r.predicted_time_s
        );
    }
    out
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub const MIN_TRIALS: usize = 5;

/// Relative slack allowed when checking that measured time is ordered in `G`.
pub const DEFAULT_NOISE_BAND: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub groups: usize,
    /// Cache size at the end of generation.
    pub kv_bytes: u64,
    pub weight_bytes: u64,
    /// FLOPs of the final decode step.
    pub flops: u64,
    /// Roofline time per generated token, averaged over the decode steps.
    pub pred_time_s: f64,
    pub wall_time_s_median: f64,
    pub trials: usize,
    /// Per-trial mean decode time per token.
    pub wall_time_s_trials: Vec<f64>,
    /// Greedy tokens of the first trial; every trial must reproduce them.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: AttentionConfig,
    pub groups: Vec<usize>,
    pub seq_in: usize,
    pub seq_out: usize,
    pub trials: usize,
    pub precision: Precision,
    pub hardware: HardwareSpec,
    pub noise_band: f64,
    pub flop_convention: String,
    pub sharding_note: String,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Whether median wall time never drops by more than the noise band as `G` grows.
    pub fn wall_time_ordered(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].wall_time_s_median >= w[0].wall_time_s_median * (1.0 - self.noise_band))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:e},{}",
                r.groups, r.kv_bytes, r.weight_bytes, r.flops, r.pred_time_s, r.wall_time_s_median, r.trials
            );
        }
        out
    }
}

/// Times greedy generation for each checkpoint, all trials of one model
/// before the next, on a single thread.
pub fn bench_generate<F: Scalar>(
    models: &[Checkpoint<F>],
    prompt: &[usize],
    seq_out: usize,
    trials: usize,
    hw: &HardwareSpec,
) -> Result<BenchReport> {
    if trials < MIN_TRIALS {
        return Err(Error::Argument(format!("trials must be >= {MIN_TRIALS}, got {trials}")));
    }
    let first = models.first().ok_or_else(|| Error::Argument("no models to benchmark".into()))?;
    let base = first.config;
    for m in models {
        let c = &m.config;
        if (c.n_heads, c.head_dim, c.n_layers, c.vocab, c.causal)
            != (base.n_heads, base.head_dim, base.n_layers, base.vocab, base.causal)
        {
            return Err(Error::Config(format!("mismatched configs across benchmark models: {base:?} vs {c:?}")));
        }
    }
    let precision = F::PRECISION;
    let capacity = prompt.len() + seq_out;

    let rows = par::single_threaded(|| {
        models
            .iter()
            .map(|m| {
                let mut times = Vec::with_capacity(trials);
                let mut tokens: Option<Vec<usize>> = None;
                for _ in 0..trials {
                    let tr = generate(m, prompt, seq_out, capacity)?;
                    match &tokens {
                        None => tokens = Some(tr.tokens.clone()),
                        Some(t) if *t != tr.tokens => {
                            return Err(Error::Argument("non-deterministic generation across trials".into()))
                        }
                        Some(_) => {}
                    }
                    times.push(tr.time_per_token_s());
                }
                let cfg = &m.config;
                let pred = (0..seq_out)
                    .map(|i| predict_step_time(cfg, hw, prompt.len() + i + 1, 1, precision).map(|r| r.predicted_time_s))
                    .collect::<Result<Vec<_>>>()?;
                let pred_time_s = if pred.is_empty() { 0.0 } else { pred.iter().sum::<f64>() / pred.len() as f64 };
                let last = predict_step_time(cfg, hw, capacity, 1, precision)?;
                Ok(BenchRow {
                    groups: cfg.n_kv_groups,
                    kv_bytes: kv_cache_bytes(cfg, capacity, 1, precision),
                    weight_bytes: last.weight_bytes_per_step,
                    flops: last.flops_per_step,
                    pred_time_s,
                    wall_time_s_median: median(&times),
                    trials,
                    wall_time_s_trials: times,
                    tokens: tokens.unwrap_or_default(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    Ok(BenchReport {
        config: base,
        groups: rows.iter().map(|r| r.groups).collect(),
        seq_in: prompt.len(),
        seq_out,
        trials,
        precision,
        hardware: *hw,
        noise_band: DEFAULT_NOISE_BAND,
        flop_convention: FLOP_CONVENTION.to_string(),
        sharding_note: SHARDING_NOTE.to_string(),
        rows,
    })
}
