use serde::{Deserialize, Serialize};

use super::{validate_config, HardwareSpec, ModelSpec, ParallelismConfig};
use crate::error::{Error, Result};

/// K and V bytes for one token across all layers.
pub fn kv_bytes_per_token(model: &ModelSpec) -> u64 {
    model.kv_bytes_per_token_head_layer() * model.num_kv_heads as u64 * model.num_layers as u64
}

/// KV room left after weights, and how many sequences of a given length fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvBudget {
    /// Per-GPU bytes left for KV once the weight shard is resident.
    pub per_gpu_bytes: f64,
    /// KV bytes of one replica (all its GPUs).
    pub per_replica_bytes: u64,
    pub max_batch: u64,
}

/// Largest global batch whose KV at `seq_len` tokens fits next to the weights.
pub fn max_batch_size(model: &ModelSpec, hw: &HardwareSpec, cfg: &ParallelismConfig, seq_len: u64) -> Result<KvBudget> {
    validate_config(model, hw, cfg).into_result()?;
    if seq_len == 0 {
        return Err(Error::InvalidArgument("seq_len must be at least 1".into()));
    }
    let weights = model.total_weight_bytes() as u128;
    let shards = cfg.gpus_per_replica() as u128;
    let per_replica = hw.gpu_memory as u128 * shards - weights;
    let per_seq = kv_bytes_per_token(model) as u128 * seq_len as u128;
    // Sequences never straddle replicas.
    let max_batch = cfg.dp as u128 * (per_replica / per_seq);
    Ok(KvBudget {
        per_gpu_bytes: hw.gpu_memory as f64 - weights as f64 / shards as f64,
        per_replica_bytes: per_replica.min(u64::MAX as u128) as u64,
        max_batch: max_batch.min(u64::MAX as u128) as u64,
    })
}
