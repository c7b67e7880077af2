//! Calibrated model and hardware presets.
//!
//! The hardware numbers are public datasheet-class figures (dense fp16 peak,
//! HBM/GDDR bandwidth, PCIe 4.0 x8 host links); they are calibration points
//! for relative comparisons, not measurements.

use std::collections::BTreeMap;

use crate::types::{AllReduceModel, HardwareSpec, ModelSpec};

pub const GIB: u64 = 1 << 30;

/// Bytes/s of a PCIe 4.0 x8 host link and of a PCIe-only all-reduce ring.
pub const PCIE_BANDWIDTH: f64 = 1.6e10;

/// Bytes/s of an NVLink-class interconnect (600 GiB/s).
pub const NVLINK_BANDWIDTH: f64 = 600.0 * GIB as f64;

fn dense(layers: u32, hidden: u64, ffn: u64, q_heads: u32, kv_heads: u32, head_dim: u32) -> ModelSpec {
    let kv_width = kv_heads as u64 * head_dim as u64;
    let attention = 2 * hidden * hidden + 2 * hidden * kv_width;
    let mlp = 3 * hidden * ffn;
    ModelSpec::new(layers, attention + mlp, q_heads, kv_heads, head_dim).expect("preset model is valid")
}

/// Four-layer toy model used for hand-checked cost examples.
pub fn model_e() -> ModelSpec {
    ModelSpec::new(4, 16_777_216, 8, 4, 64).expect("preset model is valid")
}

/// CodeLlama-34B shaped model (48 layers, GQA with 8 KV heads).
pub fn model_34b() -> ModelSpec {
    dense(48, 8192, 22016, 64, 8, 128)
}

/// 70B-class model sized so that the fp16 weights take exactly 140 GiB.
pub fn model_70b() -> ModelSpec {
    let layers = 80;
    let params_per_layer = 140 * GIB / (2 * layers as u64);
    ModelSpec::new(layers, params_per_layer, 64, 8, 128).expect("preset model is valid")
}

pub fn model_e_hardware(num_gpus: u32) -> HardwareSpec {
    HardwareSpec {
        num_gpus,
        hbm_bandwidth: 1e12,
        peak_flops: 1e14,
        gpu_memory: GIB,
        host_memory_per_gpu: 4 * GIB,
        host_link_bandwidth: PCIE_BANDWIDTH,
        allreduce_model: AllReduceModel::Ring {
            interconnect_bandwidth: PCIE_BANDWIDTH,
        },
    }
}

/// A10-like: 24 GiB, 600 GB/s, 125 Tflop/s, PCIe-only interconnect.
pub fn a10(num_gpus: u32) -> HardwareSpec {
    HardwareSpec {
        num_gpus,
        hbm_bandwidth: 6e11,
        peak_flops: 1.25e14,
        gpu_memory: 24 * GIB,
        host_memory_per_gpu: 80 * GIB,
        host_link_bandwidth: PCIE_BANDWIDTH,
        allreduce_model: AllReduceModel::Ring {
            interconnect_bandwidth: PCIE_BANDWIDTH,
        },
    }
}

/// A100-40GB-like with NVLink.
pub fn a100_40gib(num_gpus: u32) -> HardwareSpec {
    HardwareSpec {
        num_gpus,
        hbm_bandwidth: 1.555e12,
        peak_flops: 3.12e14,
        gpu_memory: 40 * GIB,
        host_memory_per_gpu: 80 * GIB,
        host_link_bandwidth: PCIE_BANDWIDTH,
        allreduce_model: AllReduceModel::Ring {
            interconnect_bandwidth: NVLINK_BANDWIDTH,
        },
    }
}

/// A100-80GB-like with NVLink.
pub fn a100_80gib(num_gpus: u32) -> HardwareSpec {
    HardwareSpec {
        gpu_memory: 80 * GIB,
        hbm_bandwidth: 2.0e12,
        ..a100_40gib(num_gpus)
    }
}

/// Same fleet with a measured (explicit) all-reduce table instead of the ring
/// model, for exercising that code path.
pub fn with_explicit_allreduce(hw: &HardwareSpec, table: &[(u32, f64)]) -> HardwareSpec {
    HardwareSpec {
        allreduce_model: AllReduceModel::Explicit(table.iter().copied().collect::<BTreeMap<_, _>>()),
        ..hw.clone()
    }
}

/// Model E fleet whose replicas (of `gpus_per_replica` GPUs) hold exactly
/// `gpu_kv` bytes of KV next to the weights and `host_kv` bytes in host
/// memory. Both must be multiples of `gpus_per_replica`.
pub fn model_e_sized(num_gpus: u32, gpus_per_replica: u32, gpu_kv: u64, host_kv: u64) -> HardwareSpec {
    let n = gpus_per_replica as u64;
    assert!(
        gpu_kv.is_multiple_of(n) && host_kv.is_multiple_of(n),
        "capacities must split evenly"
    );
    let weights = model_e().total_weight_bytes();
    HardwareSpec {
        gpu_memory: (weights + gpu_kv) / n,
        host_memory_per_gpu: host_kv / n,
        ..model_e_hardware(num_gpus)
    }
}
