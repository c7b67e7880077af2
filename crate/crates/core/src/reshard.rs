//! Shard placement for a parallelism config, weight reload plans between
//! configs, and KV routing through the host tier.
//!
//! Placement is canonical: GPU `replica * tp * pp + stage * tp + tp_rank`
//! holds the `stage`-th block of layers and the `tp_rank`-th block of KV
//! heads.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_divisibility, HardwareSpec, KvLayout, ModelSpec, ParallelismConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub gpu_id: u32,
    pub replica_id: u32,
    pub stage: u32,
    pub tp_rank: u32,
    pub layer_range: Range<u32>,
    pub kv_head_range: Range<u32>,
    /// This GPU's share of the weights. Shares within a replica sum to the
    /// total weight bytes exactly.
    pub weight_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardMap {
    pub cfg: ParallelismConfig,
    pub entries: Vec<ShardEntry>,
}

impl ShardMap {
    pub fn replica(&self, replica_id: u32) -> impl Iterator<Item = &ShardEntry> {
        self.entries.iter().filter(move |e| e.replica_id == replica_id)
    }
}

fn block(total: u32, parts: u32, index: u32) -> Range<u32> {
    let size = total / parts;
    index * size..(index + 1) * size
}

pub fn shard_map(model: &ModelSpec, cfg: &ParallelismConfig) -> Result<ShardMap> {
    check_divisibility(model, cfg)?;
    let per_replica = cfg.gpus_per_replica() as u64;
    let total = model.total_weight_bytes();
    let (base, extra) = (total / per_replica, total % per_replica);
    let mut entries = Vec::with_capacity(cfg.num_gpus() as usize);
    for replica_id in 0..cfg.dp {
        for stage in 0..cfg.pp {
            for tp_rank in 0..cfg.tp {
                let local = stage * cfg.tp + tp_rank;
                entries.push(ShardEntry {
                    gpu_id: replica_id * cfg.tp * cfg.pp + local,
                    replica_id,
                    stage,
                    tp_rank,
                    layer_range: block(model.num_layers, cfg.pp, stage),
                    kv_head_range: block(model.num_kv_heads, cfg.tp, tp_rank),
                    weight_bytes: base + u64::from((local as u64) < extra),
                });
            }
        }
    }
    Ok(ShardMap { cfg: *cfg, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuLoad {
    pub gpu_id: u32,
    pub bytes_to_load: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    pub from: ParallelismConfig,
    pub to: ParallelismConfig,
    pub per_gpu: Vec<GpuLoad>,
    /// Seconds until the slowest GPU holds its new shard.
    pub wall_time: f64,
    /// KV cache is re-partitioned while it passes through host memory, so its
    /// cost is charged by the simulator's swap pipeline and not here.
    pub kv_note: String,
}

const KV_NOTE: &str = "kv cache moves through the host tier; not charged here";

/// Every GPU reloads its complete new shard from host memory, all links in
/// parallel.
pub fn weight_reload_plan(
    model: &ModelSpec,
    hw: &HardwareSpec,
    from: &ParallelismConfig,
    to: &ParallelismConfig,
) -> Result<TransferPlan> {
    if from.dp != to.dp {
        return Err(Error::UnsupportedTransition(format!(
            "data parallelism cannot change between stages ({from} -> {to})"
        )));
    }
    check_divisibility(model, from)?;
    let map = shard_map(model, to)?;
    let same = from == to;
    let per_gpu: Vec<GpuLoad> = map
        .entries
        .iter()
        .map(|e| GpuLoad {
            gpu_id: e.gpu_id,
            bytes_to_load: if same { 0 } else { e.weight_bytes },
        })
        .collect();
    let wall_time = per_gpu
        .iter()
        .map(|g| g.bytes_to_load as f64 / hw.host_link_bandwidth)
        .fold(0.0, f64::max);
    Ok(TransferPlan {
        from: *from,
        to: *to,
        per_gpu,
        wall_time,
        kv_note: KV_NOTE.into(),
    })
}

/// Reload seconds for switching to `to`, without building the per-GPU plan.
pub fn reload_time(model: &ModelSpec, hw: &HardwareSpec, to: &ParallelismConfig) -> f64 {
    let shard = model.total_weight_bytes().div_ceil(to.gpus_per_replica() as u64);
    shard as f64 / hw.host_link_bandwidth
}

/// A rectangular block of one sequence's KV: layers x KV heads, all tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvShard {
    pub gpu_id: u32,
    pub layers: Range<u32>,
    pub heads: Range<u32>,
    pub bytes: u64,
}

impl KvShard {
    /// Overlapping block, if any.
    pub fn intersect(&self, other: &KvShard) -> Option<(Range<u32>, Range<u32>)> {
        let l = self.layers.start.max(other.layers.start)..self.layers.end.min(other.layers.end);
        let h = self.heads.start.max(other.heads.start)..self.heads.end.min(other.heads.end);
        (!l.is_empty() && !h.is_empty()).then_some((l, h))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvRoute {
    pub swap_out: Vec<KvShard>,
    pub swap_in: Vec<KvShard>,
}

fn kv_shards(model: &ModelSpec, cfg: &ParallelismConfig, kv_len: u64, replica: u32) -> Result<Vec<KvShard>> {
    let per_cell = model.kv_bytes_per_token_head_layer() * kv_len;
    Ok(shard_map(model, cfg)?
        .replica(replica)
        .map(|e| KvShard {
            gpu_id: e.gpu_id,
            bytes: per_cell * e.layer_range.len() as u64 * e.kv_head_range.len() as u64,
            layers: e.layer_range.clone(),
            heads: e.kv_head_range.clone(),
        })
        .collect())
}

/// Where each piece of a sequence's KV (`kv_len` materialized tokens) is
/// pushed from under `cfg_p` and pulled to under `cfg_d`, within `replica`.
pub fn kv_reshard_route(
    model: &ModelSpec,
    cfg_p: &ParallelismConfig,
    cfg_d: &ParallelismConfig,
    kv_len: u64,
    replica: u32,
) -> Result<KvRoute> {
    Ok(KvRoute {
        swap_out: kv_shards(model, cfg_p, kv_len, replica)?,
        swap_in: kv_shards(model, cfg_d, kv_len, replica)?,
    })
}

/// Contiguous memory runs in one (layer, sequence) KV shard of a TP rank.
pub fn contiguous_runs(layout: KvLayout, seq_len: u64, _num_kv_heads: u32, tp: u32) -> u64 {
    match layout {
        KvLayout::Hnd => 1,
        KvLayout::Nhd if tp > 1 => seq_len.max(1),
        KvLayout::Nhd => 1,
    }
}
