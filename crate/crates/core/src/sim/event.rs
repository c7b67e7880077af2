use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::types::ParallelismConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    PhaseChange {
        from: Option<Stage>,
        to: Stage,
    },
    Reshard {
        from: ParallelismConfig,
        to: ParallelismConfig,
        wall_s: f64,
        /// KV re-partition round trip for sequences that stay resident.
        reroute_s: f64,
    },
    /// A prefill micro-batch entering stage 0. `wall_s` is its per-stage
    /// occupancy given `compute_s` and the overlapped or serialized
    /// `transfer_s`.
    PrefillStep {
        seqs: Vec<u64>,
        compute_s: f64,
        transfer_s: f64,
        wall_s: f64,
    },
    PrefillStart {
        seq: u64,
        bytes: u64,
        output_len: u32,
    },
    PrefillDone {
        seq: u64,
    },
    SwapOutStart {
        seq: u64,
        bytes: u64,
    },
    SwapOutDone {
        seq: u64,
        bytes: u64,
    },
    SwapInStart {
        seq: u64,
        bytes: u64,
    },
    SwapInDone {
        seq: u64,
        bytes: u64,
    },
    /// A decode group entering stage 0; every member gains one token.
    DecodeStep {
        seqs: Vec<u64>,
        wall_s: f64,
    },
    Release {
        seq: u64,
        bytes: u64,
    },
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::PhaseChange { .. } => "phase_change",
            EventKind::Reshard { .. } => "reshard",
            EventKind::PrefillStep { .. } => "prefill_step",
            EventKind::PrefillStart { .. } => "prefill_start",
            EventKind::PrefillDone { .. } => "prefill_done",
            EventKind::SwapOutStart { .. } => "swap_out_start",
            EventKind::SwapOutDone { .. } => "swap_out_done",
            EventKind::SwapInStart { .. } => "swap_in_start",
            EventKind::SwapInDone { .. } => "swap_in_done",
            EventKind::DecodeStep { .. } => "decode_step",
            EventKind::Release { .. } => "release",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub replica: u32,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// CSV rows `timestamp_s,event,seq_id,gpu_id,bytes`. `gpu_id` is the first GPU
/// of the event's replica. Step events expand to one row per sequence.
pub fn events_to_csv(events: &[Event], gpus_per_replica: u32) -> String {
    let mut out = String::from("timestamp_s,event,seq_id,gpu_id,bytes\n");
    for e in events {
        let gpu = e.replica * gpus_per_replica;
        let name = e.kind.name();
        let mut row = |seq: Option<u64>, bytes: Option<u64>| {
            let seq = seq.map(|s| s.to_string()).unwrap_or_default();
            let bytes = bytes.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{name},{seq},{gpu},{bytes}", e.t);
        };
        match &e.kind {
            EventKind::PhaseChange { .. } | EventKind::Reshard { .. } => row(None, None),
            EventKind::PrefillStep { seqs, .. } | EventKind::DecodeStep { seqs, .. } => {
                for &s in seqs {
                    row(Some(s), None);
                }
            }
            EventKind::PrefillDone { seq } => row(Some(*seq), None),
            EventKind::PrefillStart { seq, bytes, .. }
            | EventKind::SwapOutStart { seq, bytes }
            | EventKind::SwapOutDone { seq, bytes }
            | EventKind::SwapInStart { seq, bytes }
            | EventKind::SwapInDone { seq, bytes }
            | EventKind::Release { seq, bytes } => row(Some(*seq), Some(*bytes)),
        }
    }
    out
}
