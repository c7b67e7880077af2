//! Analytical per-layer runtime model.
//!
//! Every decoder layer costs weight movement, attention (KV/QKV) movement,
//! linear and attention compute, and the tensor-parallel all-reduce. The
//! components are composed either as a roofline
//! (`max(dm_linear, comp_linear) + max(dm_attn, comp_attn) + comm`) or
//! additively. All component times here are already divided by the
//! tensor-parallel degree and are evaluated at the micro-batch that one
//! device processes per forward pass.
//!
//! The attention FLOP counts (`b h_q s^2 d^2` for prefill, `2 b h_q s d^2` for
//! decode) are kept exactly as the reference model states them, even though
//! a textbook count scales with `d` rather than `d^2`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{HardwareSpec, ModelSpec, ParallelismConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    #[default]
    Roofline,
    Additive,
}

/// Per-layer time components in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub t_dm_linear: f64,
    pub t_dm_attn: f64,
    pub t_comp_linear: f64,
    pub t_comp_attn: f64,
    pub t_comm: f64,
    pub layer_time: f64,
    pub mode: CostMode,
}

impl CostBreakdown {
    fn compose(mut self) -> Self {
        self.layer_time = match self.mode {
            CostMode::Roofline => {
                self.t_dm_linear.max(self.t_comp_linear) + self.t_dm_attn.max(self.t_comp_attn) + self.t_comm
            }
            CostMode::Additive => {
                self.t_dm_linear + self.t_dm_attn + self.t_comp_linear + self.t_comp_attn + self.t_comm
            }
        };
        self
    }
}

/// Weight bytes of one layer streamed from HBM, split across TP ranks.
pub fn linear_dm_time(model: &ModelSpec, hw: &HardwareSpec, cfg: &ParallelismConfig) -> f64 {
    model.layer_weight_bytes() as f64 / (hw.hbm_bandwidth * cfg.tp as f64)
}

pub fn attn_dm_time(
    model: &ModelSpec,
    hw: &HardwareSpec,
    cfg: &ParallelismConfig,
    batch: f64,
    seq_len: f64,
    phase: Phase,
) -> f64 {
    let bpp = model.bytes_per_param as f64;
    let d = model.head_dim as f64;
    let hq = model.num_query_heads as f64;
    let hkv = model.num_kv_heads as f64;
    let bytes = match phase {
        Phase::Prefill => bpp * batch * seq_len * (hq + 2.0 * hkv) * d,
        Phase::Decode => 2.0 * bpp * batch * seq_len * hkv * d,
    };
    bytes / (hw.hbm_bandwidth * cfg.tp as f64)
}

/// Returns `(linear, attention)` compute seconds.
pub fn compute_time(
    model: &ModelSpec,
    hw: &HardwareSpec,
    cfg: &ParallelismConfig,
    batch: f64,
    seq_len: f64,
    phase: Phase,
) -> (f64, f64) {
    let w = model.params_per_layer as f64;
    let hq = model.num_query_heads as f64;
    let d = model.head_dim as f64;
    let rate = hw.peak_flops * cfg.tp as f64;
    let (linear, attn) = match phase {
        Phase::Prefill => (2.0 * w * batch * seq_len, batch * hq * seq_len * seq_len * d * d),
        Phase::Decode => (2.0 * w * batch, 2.0 * batch * hq * seq_len * d * d),
    };
    (linear / rate, attn / rate)
}

/// All-reduce seconds for `tokens` activations on one device. Zero at tp=1.
pub fn allreduce_time(model: &ModelSpec, hw: &HardwareSpec, cfg: &ParallelismConfig, tokens: f64) -> Result<f64> {
    if cfg.tp <= 1 {
        return Ok(0.0);
    }
    let bw = hw.allreduce_bandwidth(cfg.tp)?;
    Ok(tokens * model.activation_bytes() as f64 * model.allreduces_per_layer as f64 / bw)
}

/// Tokens one device pushes through a layer for a micro-batch.
pub fn tokens_in_pass(batch: f64, seq_len: f64, phase: Phase) -> f64 {
    match phase {
        Phase::Prefill => batch * seq_len,
        Phase::Decode => batch,
    }
}

/// Per-layer breakdown at micro-batch `batch`.
#[allow(clippy::too_many_arguments)]
pub fn layer_time(
    model: &ModelSpec,
    hw: &HardwareSpec,
    cfg: &ParallelismConfig,
    batch: f64,
    seq_len: f64,
    phase: Phase,
    mode: CostMode,
) -> Result<CostBreakdown> {
    let (t_comp_linear, t_comp_attn) = compute_time(model, hw, cfg, batch, seq_len, phase);
    Ok(CostBreakdown {
        t_dm_linear: linear_dm_time(model, hw, cfg),
        t_dm_attn: attn_dm_time(model, hw, cfg, batch, seq_len, phase),
        t_comp_linear,
        t_comp_attn,
        t_comm: allreduce_time(model, hw, cfg, tokens_in_pass(batch, seq_len, phase))?,
        layer_time: 0.0,
        mode,
    }
    .compose())
}

/// Time for one pipeline stage (`L / PP` layers) to process one micro-batch.
#[allow(clippy::too_many_arguments)]
pub fn stage_pass_time(
    model: &ModelSpec,
    hw: &HardwareSpec,
    cfg: &ParallelismConfig,
    micro_batch: f64,
    seq_len: f64,
    phase: Phase,
    mode: CostMode,
) -> Result<f64> {
    let layers = model.num_layers as f64 / cfg.pp as f64;
    Ok(layers * layer_time(model, hw, cfg, micro_batch, seq_len, phase, mode)?.layer_time)
}

/// Steady-state time between micro-batch completions of the last stage when
/// a replica pipelines `global_batch / (PP * DP)` sequences per pass.
/// Stage-to-stage activation transfers are not charged.
#[allow(clippy::too_many_arguments)]
pub fn stage_time(
    model: &ModelSpec,
    hw: &HardwareSpec,
    cfg: &ParallelismConfig,
    global_batch: f64,
    seq_len: f64,
    phase: Phase,
    mode: CostMode,
) -> Result<f64> {
    let micro = global_batch / (cfg.pp as f64 * cfg.dp as f64);
    stage_pass_time(model, hw, cfg, micro, seq_len, phase, mode)
}

/// Seconds per request: one stage time retires `global_batch / PP` requests
/// across the cluster.
#[allow(clippy::too_many_arguments)]
pub fn throughput_inverse(
    model: &ModelSpec,
    hw: &HardwareSpec,
    cfg: &ParallelismConfig,
    global_batch: f64,
    seq_len: f64,
    phase: Phase,
    mode: CostMode,
) -> Result<f64> {
    let t = stage_time(model, hw, cfg, global_batch, seq_len, phase, mode)?;
    Ok(t / (global_batch / cfg.pp as f64))
}
