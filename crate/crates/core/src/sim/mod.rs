//! Deterministic discrete-event simulation of an offline generation run.
//!
//! Each data-parallel replica is simulated independently on its share of the
//! trace (round-robin by trace order). Within a replica a pipeline of `pp`
//! stages executes prefill micro-batches and decode groups; stage 0 decides
//! what to issue next according to the [`SchedulingPolicy`].
//!
//! KV accounting reserves a sequence's full-length footprint
//! (`(input_len + output_len) * kv_bytes_per_token`) on whichever tier holds
//! it. Host-link transfers move the materialized prefix only
//! (`input_len * kv_bytes_per_token`).

mod engine;
mod event;
mod replay;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::perf::CostMode;
use crate::types::{validate_config, HardwareSpec, KvLayout, ModelSpec, ParallelismConfig, Request};

pub use event::{events_to_csv, Event, EventKind, Stage};
pub use replay::{replay_check, ReplayVerdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulingPolicy {
    /// Admit prefills whenever GPU KV has room; KV never leaves the GPU.
    PrefillPrioritized,
    /// Prefill a GPU-sized wave, decode it to completion, repeat.
    DecodePrioritized,
    /// Buffer prefilled KV in host memory and switch stage only when the host
    /// tier is full (prefill to decode) or empty (decode to prefill).
    TransitionMinimizing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    /// Overlap swap-out transfers with prefill compute.
    pub overlap: bool,
    pub mode: CostMode,
    /// Charge stage-to-stage activation transfers.
    pub p2p: bool,
    /// Echoed in the report; the engine itself draws no random numbers.
    pub seed: u64,
    pub layout: KvLayout,
    /// Host-link efficiency for layouts that split a shard into many runs.
    pub nhd_penalty: f64,
    /// When false, swap-ins cannot start before outstanding swap-outs end.
    pub full_duplex: bool,
    /// Allow `cfg_p != cfg_d` under the non-tiered policies.
    pub force_mixed: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            overlap: true,
            mode: CostMode::Roofline,
            p2p: false,
            seed: 0,
            layout: KvLayout::Hnd,
            nhd_penalty: 0.5,
            full_duplex: true,
            force_mixed: false,
            exec: Exec::default(),
        }
    }
}

/// Per-replica measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaReport {
    pub replica: u32,
    pub requests: usize,
    pub gpu_capacity: u64,
    pub cpu_capacity: u64,
    pub makespan: f64,
    pub prefill_time: f64,
    pub decode_time: f64,
    pub reshard_time: f64,
    pub transitions: u32,
    pub stalled_transfer_time: f64,
    pub decode_passes: u64,
    pub decode_seq_steps: u64,
    pub peak_decode_batch: usize,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub makespan: f64,
    pub requests_per_second: f64,
    /// Generated (output) tokens per second.
    pub tokens_per_second: f64,
    /// Stage-time totals, transition count and stalls of the replica that
    /// finishes last.
    pub prefill_time: f64,
    pub decode_time: f64,
    pub reshard_time: f64,
    pub transitions: u32,
    pub stalled_transfer_time: f64,
    /// Mean and peak sequences per decode pass, over all replicas.
    pub mean_decode_batch: f64,
    pub peak_decode_batch: usize,
    pub policy: SchedulingPolicy,
    pub cfg_p: ParallelismConfig,
    pub cfg_d: ParallelismConfig,
    pub options: SimOptions,
    pub replicas: Vec<ReplicaReport>,
    pub event_log: Vec<Event>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check_inputs(
    model: &ModelSpec,
    hw: &HardwareSpec,
    workload: &[Request],
    policy: SchedulingPolicy,
    cfg_p: &ParallelismConfig,
    cfg_d: &ParallelismConfig,
    opts: &SimOptions,
) -> Result<()> {
    model.validate()?;
    hw.validate()?;
    if workload.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    validate_config(model, hw, cfg_p).into_result()?;
    validate_config(model, hw, cfg_d).into_result()?;
    if cfg_p.dp != cfg_d.dp {
        return Err(Error::UnsupportedTransition(format!(
            "data parallelism cannot change between stages ({cfg_p} -> {cfg_d})"
        )));
    }
    if cfg_p != cfg_d && policy != SchedulingPolicy::TransitionMinimizing && !opts.force_mixed {
        return Err(Error::InvalidSimulation(format!(
            "{policy:?} needs cfg_p == cfg_d unless force_mixed is set"
        )));
    }
    if !(opts.nhd_penalty > 0.0 && opts.nhd_penalty <= 1.0) {
        return Err(Error::InvalidSimulation("nhd_penalty must be in (0, 1]".into()));
    }
    let mut seen = HashSet::with_capacity(workload.len());
    for r in workload {
        if r.input_len == 0 || r.output_len == 0 {
            return Err(Error::InvalidSimulation(format!("request {} has a zero length", r.id)));
        }
        if !seen.insert(r.id) {
            return Err(Error::InvalidSimulation(format!("duplicate request id {}", r.id)));
        }
    }
    Ok(())
}

/// Runs the workload to completion and reports timings and the event log.
pub fn simulate(
    model: &ModelSpec,
    hw: &HardwareSpec,
    workload: &[Request],
    policy: SchedulingPolicy,
    cfg_p: &ParallelismConfig,
    cfg_d: &ParallelismConfig,
    opts: &SimOptions,
) -> Result<SimReport> {
    check_inputs(model, hw, workload, policy, cfg_p, cfg_d, opts)?;
    let shared = engine::Shared::new(model, hw, policy, *cfg_p, *cfg_d, opts);
    for r in workload {
        shared.admissible(r)?;
    }

    let dp = cfg_p.dp as usize;
    let shares: Vec<(u32, Vec<Request>)> = (0..dp)
        .map(|k| {
            let reqs = workload.iter().skip(k).step_by(dp).cloned().collect();
            (k as u32, reqs)
        })
        .collect();
    let runs = opts
        .exec
        .map(&shares, |(k, reqs)| engine::run_replica(&shared, *k, reqs));
    let runs: Vec<engine::ReplicaRun> = runs.into_iter().collect::<Result<_>>()?;

    let critical = runs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.report.makespan.total_cmp(&b.1.report.makespan).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("at least one replica");
    let crit = &runs[critical].report;
    let makespan = crit.makespan;
    let output_tokens: u64 = runs.iter().map(|r| r.report.output_tokens).sum();
    let passes: u64 = runs.iter().map(|r| r.report.decode_passes).sum();
    let seq_steps: u64 = runs.iter().map(|r| r.report.decode_seq_steps).sum();

    let mut event_log: Vec<Event> = runs.iter().flat_map(|r| r.events.iter().cloned()).collect();
    event_log.sort_by(|a, b| a.t.total_cmp(&b.t));

    Ok(SimReport {
        makespan,
        requests_per_second: workload.len() as f64 / makespan,
        tokens_per_second: output_tokens as f64 / makespan,
        prefill_time: crit.prefill_time,
        decode_time: crit.decode_time,
        reshard_time: crit.reshard_time,
        transitions: crit.transitions,
        stalled_transfer_time: crit.stalled_transfer_time,
        mean_decode_batch: if passes == 0 {
            0.0
        } else {
            seq_steps as f64 / passes as f64
        },
        peak_decode_batch: runs.iter().map(|r| r.report.peak_decode_batch).max().unwrap_or(0),
        policy,
        cfg_p: *cfg_p,
        cfg_d: *cfg_d,
        options: opts.clone(),
        replicas: runs.into_iter().map(|r| r.report).collect(),
        event_log,
    })
}
