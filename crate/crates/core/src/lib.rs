//! Grouped-query attention engine.
//!
//! One group-count parameter covers multi-head (`G = H`), grouped-query and
//! multi-query (`G = 1`) attention. Around it sit checkpoint conversion by
//! key/value head pooling, toy-scale uptraining with hand-written gradients,
//! greedy decoding over a KV cache, and a roofline cost model with a decode
//! benchmark.

pub mod attention;
pub mod cli;
pub mod convert;
pub mod costmodel;
pub mod decoder;
pub mod error;
pub mod par;
pub mod tensor;
pub mod train;

pub use attention::{attention_forward, group_of_head, model_forward, AttentionConfig, Checkpoint, LayerWeights};
pub use convert::{convert_checkpoint, load_checkpoint, save_checkpoint, ConversionMethod, ConversionReport, FormatError};
pub use costmodel::{kv_cache_bytes, predict_step_time, BenchReport, CostReport, HardwareSpec};
pub use decoder::{decode_step, generate, prefill, DecodeTrace, KVCache};
pub use error::{Error, Result};
pub use tensor::{Precision, Rng, Scalar, Tensor};
pub use train::{loss_and_grads, pretrain_base, sgd_step, uptrain, SyntheticTask, TrainRun, TrainSettings};
