//! Checkpoint surgery (group-count reduction of the key/value projections)
//! and the on-disk checkpoint container.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{model_forward, AttentionConfig, Checkpoint, LayerWeights};
use crate::error::{Error, Result};
use crate::tensor::{mean_over, Precision, Rng, Scalar, Tensor};

/// How the key/value head of each target group is built from its source heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ConversionMethod {
    /// Elementwise mean of the member heads.
    MeanPool,
    /// The first (lowest-index) member head.
    FirstHead,
    /// Fresh `N(0, 1/d_model)` values.
    RandomInit { seed: u64 },
}

impl ConversionMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ConversionMethod::MeanPool => "mean",
            ConversionMethod::FirstHead => "first",
            ConversionMethod::RandomInit { .. } => "random",
        }
    }

    /// Parses `mean`, `first` or `random`; `random` takes `seed`.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "mean" => Ok(ConversionMethod::MeanPool),
            "first" => Ok(ConversionMethod::FirstHead),
            "random" => Ok(ConversionMethod::RandomInit { seed }),
            other => Err(Error::Argument(format!("unknown conversion method {other:?} (mean|first|random)"))),
        }
    }
}

/// Summary of one conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub source_groups: usize,
    pub target_groups: usize,
    pub method: ConversionMethod,
    /// Per layer: largest |target block - replaced source block| over Wk and Wv.
    pub layer_max_abs_delta: Vec<f64>,
    /// Mean |logit delta| between source and converted model on the probe batch.
    pub drift: f64,
}

fn check_target(config: &AttentionConfig, target: usize) -> Result<AttentionConfig> {
    let src = config.n_kv_groups;
    if target == 0 {
        return Err(Error::Argument("target group count must be positive".into()));
    }
    if target > src {
        return Err(Error::Argument(format!("cannot up-group: target G ({target}) > source G ({src})")));
    }
    if !config.n_heads.is_multiple_of(target) {
        return Err(Error::Argument(format!("H mod G != 0 (H={}, G={target})", config.n_heads)));
    }
    if !src.is_multiple_of(target) {
        return Err(Error::Argument(format!("target G ({target}) does not divide source G ({src})")));
    }
    config.with_groups(target)
}

fn pool_projection<F: Scalar>(
    src: &Tensor<F>,
    head_dim: usize,
    src_groups: usize,
    target: usize,
    method: ConversionMethod,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let d = src.rows();
    if let ConversionMethod::RandomInit { .. } = method {
        return Ok(Tensor::randn(&[d, target * head_dim], 1.0 / (d as f64).sqrt(), rng));
    }
    let per = src_groups / target;
    let mut out = Tensor::zeros(&[d, target * head_dim]);
    for g in 0..target {
        let blocks = (g * per..(g + 1) * per)
            .map(|s| src.col_block(s * head_dim, head_dim))
            .collect::<Result<Vec<_>>>()?;
        let block = match method {
            ConversionMethod::MeanPool => mean_over(&blocks.iter().collect::<Vec<_>>())?,
            _ => blocks[0].clone(),
        };
        out.set_col_block(g * head_dim, &block)?;
    }
    Ok(out)
}

/// Reduces a `G_src`-group checkpoint to `target` groups. Only `Wk`/`Wv` change.
pub fn convert_checkpoint<F: Scalar>(
    ckpt: &Checkpoint<F>,
    target: usize,
    method: ConversionMethod,
) -> Result<Checkpoint<F>> {
    ckpt.validate()?;
    let config = check_target(&ckpt.config, target)?;
    let src_groups = ckpt.config.n_kv_groups;
    let hd = config.head_dim;
    let mut rng = Rng::new(match method {
        ConversionMethod::RandomInit { seed } => seed,
        _ => 0,
    });
    let layers = ckpt
        .layers
        .iter()
        .map(|l| {
            Ok(LayerWeights {
                wq: l.wq.clone(),
                wk: pool_projection(&l.wk, hd, src_groups, target, method, &mut rng)?,
                wv: pool_projection(&l.wv, hd, src_groups, target, method, &mut rng)?,
                wo: l.wo.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint { config, embedding: ckpt.embedding.clone(), layers, unembedding: ckpt.unembedding.clone() })
}

/// Converts and measures how far the converted model moved on `probe`.
pub fn convert_with_report<F: Scalar>(
    ckpt: &Checkpoint<F>,
    target: usize,
    method: ConversionMethod,
    probe: &[Vec<usize>],
) -> Result<(Checkpoint<F>, ConversionReport)> {
    let out = convert_checkpoint(ckpt, target, method)?;
    let hd = ckpt.config.head_dim;
    let per = ckpt.config.n_kv_groups / target;
    let mut layer_max_abs_delta = Vec::with_capacity(ckpt.layers.len());
    for (src, dst) in ckpt.layers.iter().zip(&out.layers) {
        let mut worst = 0.0f64;
        for (s, d) in [(&src.wk, &dst.wk), (&src.wv, &dst.wv)] {
            for g in 0..target {
                let new_block = d.col_block(g * hd, hd)?;
                for head in g * per..(g + 1) * per {
                    let delta = new_block.max_abs_diff(&s.col_block(head * hd, hd)?)?;
                    worst = worst.max(delta.to_f64());
                }
            }
        }
        layer_max_abs_delta.push(worst);
    }
    let drift = logit_drift(ckpt, &out, probe)?;
    let report = ConversionReport {
        source_groups: ckpt.config.n_kv_groups,
        target_groups: target,
        method,
        layer_max_abs_delta,
        drift,
    };
    Ok((out, report))
}

/// Mean absolute logit difference between two models over a probe batch.
pub fn logit_drift<F: Scalar>(a: &Checkpoint<F>, b: &Checkpoint<F>, probe: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in probe {
        let la = model_forward(a, seq)?;
        let lb = model_forward(b, seq)?;
        for (x, y) in la.data().iter().zip(lb.data()) {
            total += (x.to_f64() - y.to_f64()).abs();
        }
        count += la.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

// ---------------------------------------------------------------------------
// Container format

pub const MAGIC: &[u8; 4] = b"GQAC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_FIELDS: usize = 8;
const PREAMBLE_LEN: usize = 8 + HEADER_FIELDS * 4;

/// Reasons a checkpoint file is rejected.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected \"GQAC\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("inconsistent header: {0}")]
    InvalidHeader(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("precision mismatch: file holds {found}, requested {requested}")]
    PrecisionMismatch { found: Precision, requested: Precision },
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Serializes a checkpoint. The checksum covers every byte before it.
pub fn encode_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let c = &ckpt.config;
    let n_values = ckpt.n_params();
    let mut out = Vec::with_capacity(PREAMBLE_LEN + n_values * F::PRECISION.bytes() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = [
        c.d_model,
        c.n_heads,
        c.n_kv_groups,
        c.head_dim,
        c.n_layers,
        c.vocab,
        F::PRECISION.tag() as usize,
        c.causal as usize,
    ];
    for field in header {
        let v = u32::try_from(field).map_err(|_| Error::Argument(format!("header field {field} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in ckpt.tensors() {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Parsed, validated header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub config: AttentionConfig,
    pub precision: Precision,
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn checked_len(config: &AttentionConfig, precision: Precision) -> Option<usize> {
    let d = config.d_model;
    let per_layer = d.checked_mul(config.q_width())?.checked_mul(2)?.checked_add(d.checked_mul(config.kv_width())?.checked_mul(2)?)?;
    let values = config
        .vocab
        .checked_mul(d)?
        .checked_mul(2)?
        .checked_add(per_layer.checked_mul(config.n_layers)?)?;
    values.checked_mul(precision.bytes())?.checked_add(PREAMBLE_LEN + 8)
}

/// Validates magic, version and header, returning the declared shape.
pub fn decode_header(bytes: &[u8]) -> Result<Header, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { needed: PREAMBLE_LEN, available: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if &magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    if bytes.len() < 8 {
        return Err(FormatError::Truncated { needed: PREAMBLE_LEN, available: bytes.len() });
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(FormatError::Truncated { needed: PREAMBLE_LEN, available: bytes.len() });
    }
    let f: Vec<usize> = (0..HEADER_FIELDS).map(|i| read_u32(bytes, 8 + 4 * i) as usize).collect();
    let precision = Precision::from_tag(f[6] as u32)
        .ok_or_else(|| FormatError::InvalidHeader(format!("unknown precision tag {}", f[6])))?;
    let causal = match f[7] {
        0 => false,
        1 => true,
        other => return Err(FormatError::InvalidHeader(format!("causal flag {other} is not 0 or 1"))),
    };
    let config = AttentionConfig {
        d_model: f[0],
        n_heads: f[1],
        n_kv_groups: f[2],
        head_dim: f[3],
        n_layers: f[4],
        vocab: f[5],
        causal,
    };
    config.validate().map_err(|e| FormatError::InvalidHeader(e.to_string()))?;
    Ok(Header { config, precision })
}

/// Parses a full checkpoint of precision `F` from bytes.
pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>, FormatError> {
    let header = decode_header(bytes)?;
    if header.precision != F::PRECISION {
        return Err(FormatError::PrecisionMismatch { found: header.precision, requested: F::PRECISION });
    }
    let total = checked_len(&header.config, header.precision)
        .ok_or_else(|| FormatError::InvalidHeader("declared shape overflows".into()))?;
    if bytes.len() < total {
        return Err(FormatError::Truncated { needed: total, available: bytes.len() });
    }
    if bytes.len() > total {
        return Err(FormatError::TrailingBytes(bytes.len() - total));
    }
    let body_end = total - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8-byte slice"));
    let computed = fnv1a64(&bytes[..body_end]);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }

    let mut ckpt = Checkpoint::<F>::zeros(header.config);
    let width = F::PRECISION.bytes();
    let mut at = PREAMBLE_LEN;
    for t in ckpt.tensors_mut() {
        for v in t.data_mut() {
            *v = F::read_le(&bytes[at..at + width]);
            at += width;
        }
    }
    debug_assert_eq!(at, body_end);
    Ok(ckpt)
}

pub fn save_checkpoint<F: Scalar>(ckpt: &Checkpoint<F>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    let bytes = fs::read(path)?;
    Ok(decode_checkpoint(&bytes)?)
}

/// A checkpoint of either precision, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn config(&self) -> &AttentionConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyCheckpoint::F32(_) => Precision::F32,
            AnyCheckpoint::F64(_) => Precision::F64,
        }
    }
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyCheckpoint, FormatError> {
    match decode_header(bytes)?.precision {
        Precision::F32 => decode_checkpoint(bytes).map(AnyCheckpoint::F32),
        Precision::F64 => decode_checkpoint(bytes).map(AnyCheckpoint::F64),
    }
}

pub fn load_any(path: impl AsRef<Path>) -> Result<AnyCheckpoint> {
    let bytes = fs::read(path)?;
    Ok(decode_any(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(h: usize, g: usize) -> Checkpoint<f32> {
        Checkpoint::init(AttentionConfig::new(h, g, 2, 2, 8, true).unwrap(), 0).unwrap()
    }

    #[test]
    fn identity_mean_pool_is_bit_identical() {
        let ck = base(4, 4);
        assert_eq!(convert_checkpoint(&ck, 4, ConversionMethod::MeanPool).unwrap(), ck);
        let ck = base(4, 2);
        assert_eq!(convert_checkpoint(&ck, 2, ConversionMethod::MeanPool).unwrap(), ck);
    }

    #[test]
    fn mean_pool_block_matches_slice_average() {
        let ck = base(4, 4);
        let out = convert_checkpoint(&ck, 2, ConversionMethod::MeanPool).unwrap();
        let src = &ck.layers[0].wk;
        let got = &out.layers[0].wk;
        assert_eq!(got.shape(), &[8, 4]);
        for r in 0..8 {
            for c in 0..2 {
                let want = (src.get(r, c) as f64 + src.get(r, 2 + c) as f64) / 2.0;
                assert_eq!(got.get(r, c), want as f32);
            }
        }
    }

    #[test]
    fn first_head_picks_lowest_member() {
        let ck = base(4, 4);
        let out = convert_checkpoint(&ck, 2, ConversionMethod::FirstHead).unwrap();
        let l = &ck.layers[1];
        assert_eq!(out.layers[1].wv.col_block(2, 2).unwrap(), l.wv.col_block(4, 2).unwrap());
    }

    #[test]
    fn random_init_is_seeded() {
        let ck = base(4, 4);
        let a = convert_checkpoint(&ck, 1, ConversionMethod::RandomInit { seed: 3 }).unwrap();
        let b = convert_checkpoint(&ck, 1, ConversionMethod::RandomInit { seed: 3 }).unwrap();
        let c = convert_checkpoint(&ck, 1, ConversionMethod::RandomInit { seed: 4 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_up_grouping_and_non_divisors() {
        let ck = base(8, 4);
        assert!(convert_checkpoint(&ck, 8, ConversionMethod::MeanPool).is_err());
        assert!(convert_checkpoint(&ck, 3, ConversionMethod::MeanPool).is_err());
        assert!(convert_checkpoint(&ck, 0, ConversionMethod::MeanPool).is_err());
        let ck = base(4, 4);
        assert!(convert_checkpoint(&ck, 2, ConversionMethod::MeanPool).is_ok());
    }

    #[test]
    fn report_identity_has_zero_drift() {
        let ck = base(4, 4);
        let probe = vec![vec![1, 2, 3], vec![0, 7]];
        let (_, rep) = convert_with_report(&ck, 4, ConversionMethod::MeanPool, &probe).unwrap();
        assert_eq!(rep.drift, 0.0);
        assert!(rep.layer_max_abs_delta.iter().all(|&d| d == 0.0));
        let (_, rep) = convert_with_report(&ck, 1, ConversionMethod::MeanPool, &probe).unwrap();
        assert!(rep.drift > 0.0);
        assert_eq!(rep.layer_max_abs_delta.len(), 2);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn header_layout_is_fixed() {
        let ck = base(4, 2);
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(&bytes[..4], b"GQAC");
        assert_eq!(read_u32(&bytes, 4), 1);
        let fields: Vec<u32> = (0..8).map(|i| read_u32(&bytes, 8 + 4 * i)).collect();
        assert_eq!(fields, vec![8, 4, 2, 2, 2, 8, 32, 1]);
        let n = ck.n_params();
        assert_eq!(bytes.len(), 40 + 4 * n + 8);
        // first embedding value follows the header directly
        assert_eq!(f32::from_le_bytes(bytes[40..44].try_into().unwrap()), ck.embedding.data()[0]);
    }

    #[test]
    fn method_parse() {
        assert_eq!(ConversionMethod::parse("mean", 0).unwrap(), ConversionMethod::MeanPool);
        assert_eq!(ConversionMethod::parse("random", 9).unwrap(), ConversionMethod::RandomInit { seed: 9 });
        assert!(ConversionMethod::parse("median", 0).is_err());
    }
}
