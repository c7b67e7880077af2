use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::event::EventKind;
use super::SimReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ReplayVerdict {
    Ok,
    Violation { t: f64, rule: String, detail: String },
}

impl ReplayVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, ReplayVerdict::Ok)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Where {
    Gpu,
    OutTransit,
    Cpu,
    InTransit,
    Released,
}

struct SeqState {
    at: Where,
    replica: u32,
    bytes: u64,
    output_len: u32,
    decoded: u32,
    prefilled: bool,
}

#[derive(Default, Clone, Copy)]
struct Tier {
    gpu: u64,
    cpu: u64,
}

type Broken = (&'static str, String);

fn transit(
    seqs: &mut BTreeMap<u64, SeqState>,
    replica: u32,
    seq: u64,
    from: &[Where],
    to: Where,
) -> std::result::Result<u64, Broken> {
    let s = seqs
        .get_mut(&seq)
        .ok_or(("unknown sequence", format!("seq {seq} used before prefill")))?;
    if s.replica != replica {
        return Err(("replica mismatch", format!("seq {seq} moved between replicas")));
    }
    if !from.contains(&s.at) {
        return Err((
            "illegal transition",
            format!("seq {seq} is {:?}, wanted {from:?}", s.at),
        ));
    }
    s.at = to;
    Ok(s.bytes)
}

/// Rebuilds per-sequence residency and per-tier usage from the event log
/// alone and returns the first conservation or capacity violation.
pub fn replay_check(report: &SimReport) -> Result<ReplayVerdict> {
    let nrep = report.replicas.len();
    let mut tiers = vec![Tier::default(); nrep];
    let mut seqs: BTreeMap<u64, SeqState> = BTreeMap::new();
    let (mut created, mut released) = (0u128, 0u128);

    macro_rules! fail {
        ($t:expr, $rule:expr, $($arg:tt)*) => {
            return Ok(ReplayVerdict::Violation { t: $t, rule: $rule.into(), detail: format!($($arg)*) })
        };
    }

    let log = &report.event_log;
    for (k, e) in log.iter().enumerate() {
        if !e.t.is_finite() || e.t < 0.0 {
            return Err(Error::MalformedLog(format!("event {k} has timestamp {}", e.t)));
        }
        if k > 0 && e.t < log[k - 1].t {
            return Err(Error::MalformedLog(format!("event {k} goes back in time")));
        }
        if e.replica as usize >= nrep {
            return Err(Error::MalformedLog(format!(
                "event {k} names unknown replica {}",
                e.replica
            )));
        }
    }
    for (k, e) in log.iter().enumerate() {
        let t = e.t;
        let r = e.replica as usize;
        let replica = e.replica;
        let step = |seqs: &mut BTreeMap<u64, SeqState>, seq: u64, from: &[Where], to: Where| {
            transit(seqs, replica, seq, from, to)
        };

        let outcome = match &e.kind {
            EventKind::PrefillStart { seq, bytes, output_len } => {
                if seqs.contains_key(seq) {
                    fail!(t, "prefill more than once", "seq {seq} prefilled again");
                }
                seqs.insert(
                    *seq,
                    SeqState {
                        at: Where::Gpu,
                        replica: e.replica,
                        bytes: *bytes,
                        output_len: *output_len,
                        decoded: 0,
                        prefilled: false,
                    },
                );
                tiers[r].gpu += bytes;
                created += *bytes as u128;
                Ok(())
            }
            EventKind::PrefillDone { seq } => match seqs.get_mut(seq) {
                None => fail!(t, "unknown sequence", "seq {seq} finished prefill without starting"),
                Some(s) if s.prefilled => fail!(t, "prefill more than once", "seq {seq} prefilled again"),
                Some(s) => {
                    s.prefilled = true;
                    Ok(())
                }
            },
            EventKind::SwapOutStart { seq, bytes } => {
                step(&mut seqs, *seq, &[Where::Gpu], Where::OutTransit).and_then(|b| {
                    tiers[r].cpu += b;
                    if b == *bytes {
                        Ok(())
                    } else {
                        Err(("byte mismatch", format!("seq {seq} swap-out carries {bytes} of {b} B")))
                    }
                })
            }
            EventKind::SwapOutDone { seq, .. } => {
                step(&mut seqs, *seq, &[Where::OutTransit], Where::Cpu).map(|b| tiers[r].gpu -= b)
            }
            EventKind::SwapInStart { seq, .. } => {
                step(&mut seqs, *seq, &[Where::Cpu], Where::InTransit).map(|b| tiers[r].gpu += b)
            }
            EventKind::SwapInDone { seq, .. } => {
                step(&mut seqs, *seq, &[Where::InTransit], Where::Gpu).map(|b| tiers[r].cpu -= b)
            }
            EventKind::DecodeStep { seqs: ids, .. } => {
                for id in ids {
                    match seqs.get_mut(id) {
                        Some(s) if s.at == Where::Gpu && s.prefilled && s.replica == e.replica => {
                            s.decoded += 1;
                            if s.decoded > s.output_len {
                                fail!(
                                    t,
                                    "decode beyond output",
                                    "seq {id} decoded {} > {}",
                                    s.decoded,
                                    s.output_len
                                );
                            }
                        }
                        _ => fail!(t, "decode before residency", "seq {id} is not resident on the GPU"),
                    }
                }
                Ok(())
            }
            EventKind::Release { seq, bytes } => match seqs.get(seq).map(|s| (s.decoded, s.output_len, s.bytes)) {
                Some((decoded, output_len, _)) if decoded != output_len => fail!(
                    t,
                    "release before completion",
                    "seq {seq} released after {decoded} of {output_len} tokens"
                ),
                Some((_, _, held)) if held != *bytes => {
                    fail!(t, "byte mismatch", "seq {seq} releases {bytes} B of {held}")
                }
                _ => step(&mut seqs, *seq, &[Where::Gpu], Where::Released).map(|b| {
                    tiers[r].gpu -= b;
                    released += b as u128;
                }),
            },
            EventKind::PhaseChange { .. } | EventKind::Reshard { .. } | EventKind::PrefillStep { .. } => Ok(()),
        };
        if let Err((rule, detail)) = outcome {
            fail!(t, rule, "{detail}");
        }

        let last_at_t = log.get(k + 1).is_none_or(|n| n.t != t);
        if last_at_t {
            for (i, tier) in tiers.iter().enumerate() {
                let cap = &report.replicas[i];
                if tier.gpu > cap.gpu_capacity {
                    fail!(
                        t,
                        "tier overflow",
                        "replica {i} gpu holds {} of {} B",
                        tier.gpu,
                        cap.gpu_capacity
                    );
                }
                if tier.cpu > cap.cpu_capacity {
                    fail!(
                        t,
                        "tier overflow",
                        "replica {i} cpu holds {} of {} B",
                        tier.cpu,
                        cap.cpu_capacity
                    );
                }
            }
        }
    }

    let end = report.makespan;
    let expected: usize = report.replicas.iter().map(|r| r.requests).sum();
    if seqs.len() != expected {
        fail!(
            end,
            "missing prefill",
            "{} of {expected} sequences prefilled",
            seqs.len()
        );
    }
    if let Some((id, s)) = seqs.iter().find(|(_, s)| s.at != Where::Released || !s.prefilled) {
        fail!(end, "unreleased sequence", "seq {id} ends as {:?}", s.at);
    }
    if created != released {
        fail!(end, "byte conservation", "created {created} B, released {released} B");
    }
    let busy = report.prefill_time + report.decode_time + report.reshard_time;
    if busy > report.makespan * (1.0 + 1e-9) {
        fail!(
            end,
            "time accounting",
            "stage time {busy} exceeds makespan {}",
            report.makespan
        );
    }
    Ok(ReplayVerdict::Ok)
}
