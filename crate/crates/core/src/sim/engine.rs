use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use super::event::{Event, EventKind, Stage};
use super::{ReplicaReport, SchedulingPolicy, SimOptions};
use crate::error::{Error, Result};
use crate::perf::{stage_pass_time, Phase};
use crate::reshard::{contiguous_runs, reload_time};
use crate::types::{kv_bytes_per_token, HardwareSpec, ModelSpec, ParallelismConfig, Request};

/// Run-wide constants shared by every replica.
pub(super) struct Shared<'a> {
    model: &'a ModelSpec,
    hw: &'a HardwareSpec,
    policy: SchedulingPolicy,
    cfg_p: ParallelismConfig,
    cfg_d: ParallelismConfig,
    opts: &'a SimOptions,
    kv_per_token: u64,
    gpu_capacity: u64,
    cpu_capacity: u64,
    gpus_per_replica: u64,
}

impl<'a> Shared<'a> {
    pub(super) fn new(
        model: &'a ModelSpec,
        hw: &'a HardwareSpec,
        policy: SchedulingPolicy,
        cfg_p: ParallelismConfig,
        cfg_d: ParallelismConfig,
        opts: &'a SimOptions,
    ) -> Self {
        // tp * pp is equal for both configs because dp and the fleet are.
        let gpus_per_replica = cfg_p.gpus_per_replica() as u64;
        Shared {
            model,
            hw,
            policy,
            cfg_p,
            cfg_d,
            opts,
            kv_per_token: kv_bytes_per_token(model),
            gpu_capacity: hw.gpu_memory * gpus_per_replica - model.total_weight_bytes(),
            cpu_capacity: hw.host_memory_per_gpu * gpus_per_replica,
            gpus_per_replica,
        }
    }

    fn footprint(&self, r: &Request) -> u64 {
        r.total_len() * self.kv_per_token
    }

    fn tiered(&self) -> bool {
        self.policy == SchedulingPolicy::TransitionMinimizing
    }

    pub(super) fn admissible(&self, r: &Request) -> Result<()> {
        let bytes = self.footprint(r);
        if bytes > self.gpu_capacity {
            return Err(Error::RequestTooLarge {
                id: r.id,
                bytes,
                tier: "gpu",
                capacity: self.gpu_capacity,
            });
        }
        if self.tiered() && bytes > self.cpu_capacity {
            return Err(Error::RequestTooLarge {
                id: r.id,
                bytes,
                tier: "cpu",
                capacity: self.cpu_capacity,
            });
        }
        Ok(())
    }

    fn cfg(&self, stage: Stage) -> &ParallelismConfig {
        match stage {
            Stage::Prefill => &self.cfg_p,
            Stage::Decode => &self.cfg_d,
        }
    }

    /// Seconds to move `bytes` of one sequence's KV over the host links of a
    /// replica laid out as `cfg`.
    fn host_transfer(&self, bytes: u64, seq_len: u64, cfg: &ParallelismConfig) -> f64 {
        let runs = contiguous_runs(self.opts.layout, seq_len, self.model.num_kv_heads, cfg.tp);
        let eff = if runs > 1 { self.opts.nhd_penalty } else { 1.0 };
        bytes as f64 / self.gpus_per_replica as f64 / (self.hw.host_link_bandwidth * eff)
    }

    fn hop(&self, tokens: f64) -> f64 {
        if !self.opts.p2p {
            return 0.0;
        }
        tokens * self.model.activation_bytes() as f64 / self.hw.p2p_bandwidth()
    }
}

struct Seq {
    id: u64,
    input: u32,
    output: u32,
    footprint: u64,
    generated: u32,
}

enum Happening {
    PassDone {
        prefilled: Vec<usize>,
        to_cpu: bool,
        finished: Vec<usize>,
    },
    SwapInDone(usize),
}

struct Scheduled {
    t: f64,
    n: u64,
    what: Happening,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (t, n) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.n.cmp(&self.n))
    }
}

enum Action {
    Prefill { seqs: Vec<usize>, from_wave: bool },
    Decode(usize),
    Switch(Stage),
    FormWave,
}

pub(super) struct ReplicaRun {
    pub report: ReplicaReport,
    pub events: Vec<Event>,
}

struct Engine<'s, 'a> {
    sh: &'s Shared<'a>,
    replica: u32,
    seqs: Vec<Seq>,
    now: f64,
    stage_free: Vec<f64>,
    phase: Option<Stage>,
    pending: VecDeque<usize>,
    wave: VecDeque<Vec<usize>>,
    cpu_queue: VecDeque<usize>,
    gpu_used: u64,
    cpu_used: u64,
    groups: Vec<Vec<usize>>,
    group_ready: Vec<f64>,
    rr: usize,
    inflight_passes: usize,
    swapins: usize,
    link_in_free: f64,
    out_link_free: f64,
    prefetch_from: f64,
    last_stall_end: f64,
    heap: BinaryHeap<Scheduled>,
    counter: u64,
    events: Vec<Event>,
    report: ReplicaReport,
}

pub(super) fn run_replica(sh: &Shared<'_>, replica: u32, requests: &[Request]) -> Result<ReplicaRun> {
    let decode_pp = sh.cfg_d.pp as usize;
    let mut e = Engine {
        sh,
        replica,
        seqs: requests
            .iter()
            .map(|r| Seq {
                id: r.id,
                input: r.input_len,
                output: r.output_len,
                footprint: sh.footprint(r),
                generated: 0,
            })
            .collect(),
        now: 0.0,
        stage_free: vec![0.0; sh.cfg_p.pp as usize],
        phase: None,
        pending: (0..requests.len()).collect(),
        wave: VecDeque::new(),
        cpu_queue: VecDeque::new(),
        gpu_used: 0,
        cpu_used: 0,
        groups: vec![Vec::new(); decode_pp],
        group_ready: vec![0.0; decode_pp],
        rr: 0,
        inflight_passes: 0,
        swapins: 0,
        link_in_free: 0.0,
        out_link_free: 0.0,
        prefetch_from: 0.0,
        last_stall_end: 0.0,
        heap: BinaryHeap::new(),
        counter: 0,
        events: Vec::new(),
        report: ReplicaReport {
            replica,
            requests: requests.len(),
            gpu_capacity: sh.gpu_capacity,
            cpu_capacity: sh.cpu_capacity,
            makespan: 0.0,
            prefill_time: 0.0,
            decode_time: 0.0,
            reshard_time: 0.0,
            transitions: 0,
            stalled_transfer_time: 0.0,
            decode_passes: 0,
            decode_seq_steps: 0,
            peak_decode_batch: 0,
            output_tokens: 0,
        },
    };
    e.run()?;
    e.events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(ReplicaRun {
        report: e.report,
        events: e.events,
    })
}

impl Engine<'_, '_> {
    fn run(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        loop {
            let cand = self.candidate()?;
            let next = self.heap.peek().map(|s| s.t);
            match (cand, next) {
                (Some((t, _)), Some(th)) if th <= t => self.apply_next(),
                (Some((t, action)), _) => self.perform(t, action)?,
                (None, Some(_)) => self.apply_next(),
                (None, None) => break,
            }
        }
        let unfinished = !self.pending.is_empty()
            || !self.wave.is_empty()
            || !self.cpu_queue.is_empty()
            || self.groups.iter().any(|g| !g.is_empty());
        if unfinished {
            return Err(Error::InvalidSimulation(format!(
                "replica {} stalled at t={} with work outstanding",
                self.replica, self.now
            )));
        }
        self.report.makespan = self.stage_free.iter().copied().fold(self.now, f64::max);
        Ok(())
    }

    fn log(&mut self, t: f64, kind: EventKind) {
        self.events.push(Event {
            t,
            replica: self.replica,
            kind,
        });
    }

    fn schedule(&mut self, t: f64, what: Happening) {
        self.counter += 1;
        self.heap.push(Scheduled {
            t,
            n: self.counter,
            what,
        });
    }

    fn drained_at(&self) -> f64 {
        self.stage_free.iter().copied().fold(self.now, f64::max)
    }

    fn needs_drain(&self) -> bool {
        self.sh.tiered() || self.sh.cfg_p != self.sh.cfg_d
    }

    /// Requests from the front of the pending queue forming the next prefill
    /// micro-batch, limited by the per-micro-batch budget and free room.
    fn prefill_batch(&self) -> Vec<usize> {
        let g = self.sh.gpu_capacity;
        let budget = g / self.sh.cfg_p.pp as u64;
        let mut out = Vec::new();
        let mut sum = 0;
        for &i in &self.pending {
            let fp = self.seqs[i].footprint;
            let within_budget = out.is_empty() || sum + fp <= budget;
            let gpu_ok = self.gpu_used + sum + fp <= g;
            let cpu_ok = !self.sh.tiered() || self.cpu_used + sum + fp <= self.sh.cpu_capacity;
            if !(within_budget && gpu_ok && cpu_ok) {
                break;
            }
            sum += fp;
            out.push(i);
        }
        out
    }

    fn next_group(&self) -> Option<usize> {
        let n = self.groups.len();
        (0..n).map(|k| (self.rr + k) % n).find(|&g| !self.groups[g].is_empty())
    }

    fn prefill_candidate(&self, seqs: Vec<usize>, from_wave: bool) -> (f64, Action) {
        if self.phase == Some(Stage::Decode) && self.needs_drain() {
            return (self.drained_at(), Action::Switch(Stage::Prefill));
        }
        (self.now.max(self.stage_free[0]), Action::Prefill { seqs, from_wave })
    }

    fn decode_candidate(&self) -> Option<(f64, Action)> {
        let g = self.next_group()?;
        if self.phase != Some(Stage::Decode) && self.needs_drain() {
            return Some((self.drained_at(), Action::Switch(Stage::Decode)));
        }
        let t = self.now.max(self.stage_free[0]).max(self.group_ready[g]);
        Some((t, Action::Decode(g)))
    }

    fn candidate(&self) -> Result<Option<(f64, Action)>> {
        Ok(match self.sh.policy {
            SchedulingPolicy::TransitionMinimizing => self.tiered_candidate(),
            SchedulingPolicy::PrefillPrioritized => {
                let batch = self.prefill_batch();
                if batch.is_empty() {
                    self.decode_candidate()
                } else {
                    Some(self.prefill_candidate(batch, false))
                }
            }
            SchedulingPolicy::DecodePrioritized => {
                if let Some(mb) = self.wave.front() {
                    Some(self.prefill_candidate(mb.clone(), true))
                } else if let Some(c) = self.decode_candidate() {
                    Some(c)
                } else if !self.pending.is_empty() && self.inflight_passes == 0 {
                    Some((self.now, Action::FormWave))
                } else {
                    None
                }
            }
        })
    }

    fn tiered_candidate(&self) -> Option<(f64, Action)> {
        let idle = self.inflight_passes == 0;
        if self.phase != Some(Stage::Decode) {
            match self.pending.front() {
                Some(&i) if self.cpu_used + self.seqs[i].footprint > self.sh.cpu_capacity => {
                    idle.then(|| (self.drained_at(), Action::Switch(Stage::Decode)))
                }
                Some(_) => {
                    let batch = self.prefill_batch();
                    (!batch.is_empty()).then(|| self.prefill_candidate(batch, false))
                }
                None if idle && !self.cpu_queue.is_empty() => Some((self.drained_at(), Action::Switch(Stage::Decode))),
                None => None,
            }
        } else if let Some(c) = self.decode_candidate() {
            Some(c)
        } else if idle && self.swapins == 0 && self.cpu_queue.is_empty() && !self.pending.is_empty() {
            Some((self.drained_at(), Action::Switch(Stage::Prefill)))
        } else {
            None
        }
    }

    fn perform(&mut self, t: f64, action: Action) -> Result<()> {
        self.now = t;
        match action {
            Action::Prefill { seqs, from_wave } => self.issue_prefill(t, seqs, from_wave),
            Action::Decode(g) => self.issue_decode(t, g),
            Action::Switch(to) => {
                self.switch(t, to);
                Ok(())
            }
            Action::FormWave => {
                self.form_wave();
                Ok(())
            }
        }
    }

    /// Records a stage change. Without a drain the pipeline keeps running.
    fn enter(&mut self, t: f64, to: Stage) {
        if self.phase == Some(to) {
            return;
        }
        if self.phase.is_some() {
            self.report.transitions += 1;
        }
        let from = self.phase;
        self.log(t, EventKind::PhaseChange { from, to });
        self.phase = Some(to);
    }

    fn switch(&mut self, t: f64, to: Stage) {
        let reloading = self.phase.is_some() && self.sh.cfg_p != self.sh.cfg_d;
        self.enter(t, to);
        let mut end = t;
        if reloading {
            let (from_cfg, to_cfg) = match to {
                Stage::Prefill => (self.sh.cfg_d, self.sh.cfg_p),
                Stage::Decode => (self.sh.cfg_p, self.sh.cfg_d),
            };
            let wall = reload_time(self.sh.model, self.sh.hw, &to_cfg);
            let reroute_s = if self.sh.tiered() {
                0.0
            } else {
                // Resident KV goes out under the old layout and back under the new.
                let resident: Vec<(u64, u64)> = self
                    .groups
                    .iter()
                    .flatten()
                    .map(|&i| {
                        let s = &self.seqs[i];
                        let len = (s.input + s.generated) as u64;
                        (len * self.sh.kv_per_token, len)
                    })
                    .collect();
                resident
                    .iter()
                    .map(|&(bytes, len)| {
                        self.sh.host_transfer(bytes, len, &from_cfg) + self.sh.host_transfer(bytes, len, &to_cfg)
                    })
                    .sum()
            };
            self.log(
                t,
                EventKind::Reshard {
                    from: from_cfg,
                    to: to_cfg,
                    wall_s: wall,
                    reroute_s,
                },
            );
            self.report.reshard_time += wall + reroute_s;
            end = t + wall + reroute_s;
        }
        self.stage_free = vec![end; self.sh.cfg(to).pp as usize];
        self.prefetch_from = end;
        if to == Stage::Decode {
            self.prefetch();
        }
    }

    fn form_wave(&mut self) {
        let mut take = Vec::new();
        let mut sum = 0;
        while let Some(&i) = self.pending.front() {
            let fp = self.seqs[i].footprint;
            if self.gpu_used + sum + fp > self.sh.gpu_capacity {
                break;
            }
            sum += fp;
            take.push(i);
            self.pending.pop_front();
        }
        let parts = (self.sh.cfg_p.pp as usize).min(take.len());
        let (base, extra) = (take.len() / parts, take.len() % parts);
        let mut rest = take.as_slice();
        for k in 0..parts {
            let (head, tail) = rest.split_at(base + usize::from(k < extra));
            self.wave.push_back(head.to_vec());
            rest = tail;
        }
    }

    /// Runs one pass through all stages starting at stage 0 at `t0`.
    /// Returns the completion time at the last stage.
    fn run_pass(&mut self, t0: f64, dur: f64, hop: f64) -> f64 {
        let mut finish = t0 + dur;
        self.stage_free[0] = finish;
        for j in 1..self.stage_free.len() {
            let start = (finish + hop).max(self.stage_free[j]);
            finish = start + dur;
            self.stage_free[j] = finish;
        }
        finish
    }

    fn issue_prefill(&mut self, t: f64, seqs: Vec<usize>, from_wave: bool) -> Result<()> {
        self.enter(t, Stage::Prefill);
        if from_wave {
            self.wave.pop_front();
        } else {
            for _ in 0..seqs.len() {
                self.pending.pop_front();
            }
        }
        let sh = self.sh;
        let m = seqs.len() as f64;
        let s = seqs.iter().map(|&i| self.seqs[i].input).max().unwrap_or(1) as f64;
        let compute = stage_pass_time(sh.model, sh.hw, &sh.cfg_p, m, s, Phase::Prefill, sh.opts.mode)?;
        let to_cpu = sh.tiered();
        let transfer = if to_cpu {
            let bytes: u64 = seqs.iter().map(|&i| self.seqs[i].input as u64 * sh.kv_per_token).sum();
            sh.host_transfer(bytes, s as u64, &sh.cfg_p)
        } else {
            0.0
        };
        let wall = if sh.opts.overlap {
            compute.max(transfer)
        } else {
            compute + transfer
        };
        let done = self.run_pass(t, wall, sh.hop(m * s));

        let ids = seqs.iter().map(|&i| self.seqs[i].id).collect();
        self.log(
            t,
            EventKind::PrefillStep {
                seqs: ids,
                compute_s: compute,
                transfer_s: transfer,
                wall_s: wall,
            },
        );
        for &i in &seqs {
            let (seq, bytes, output_len) = (self.seqs[i].id, self.seqs[i].footprint, self.seqs[i].output);
            self.gpu_used += bytes;
            self.log(t, EventKind::PrefillStart { seq, bytes, output_len });
            if to_cpu {
                self.cpu_used += bytes;
                self.log(t, EventKind::SwapOutStart { seq, bytes });
            }
        }
        if to_cpu {
            self.out_link_free = self.out_link_free.max(done);
        }
        self.report.prefill_time += wall;
        self.report.stalled_transfer_time += wall - compute;
        self.inflight_passes += 1;
        self.schedule(
            done,
            Happening::PassDone {
                prefilled: seqs,
                to_cpu,
                finished: Vec::new(),
            },
        );
        Ok(())
    }

    fn issue_decode(&mut self, t: f64, g: usize) -> Result<()> {
        self.enter(t, Stage::Decode);
        let sh = self.sh;
        let members = std::mem::take(&mut self.groups[g]);
        let m = members.len();
        let ctx = members
            .iter()
            .map(|&i| self.seqs[i].input + self.seqs[i].generated)
            .max()
            .unwrap_or(1) as f64;
        let wall = stage_pass_time(sh.model, sh.hw, &sh.cfg_d, m as f64, ctx, Phase::Decode, sh.opts.mode)?;
        let done = self.run_pass(t, wall, sh.hop(m as f64));

        let ids = members.iter().map(|&i| self.seqs[i].id).collect();
        self.log(
            t,
            EventKind::DecodeStep {
                seqs: ids,
                wall_s: wall,
            },
        );
        let mut finished = Vec::new();
        for &i in &members {
            let s = &mut self.seqs[i];
            s.generated += 1;
            if s.generated == s.output {
                finished.push(i);
            } else {
                self.groups[g].push(i);
            }
        }
        self.group_ready[g] = done;
        self.rr = (g + 1) % self.groups.len();
        self.report.decode_time += wall;
        self.report.decode_passes += 1;
        self.report.decode_seq_steps += m as u64;
        self.report.output_tokens += m as u64;
        self.report.peak_decode_batch = self.report.peak_decode_batch.max(m);
        self.inflight_passes += 1;
        self.schedule(
            done,
            Happening::PassDone {
                prefilled: Vec::new(),
                to_cpu: false,
                finished,
            },
        );
        Ok(())
    }

    /// Smallest decode group, lowest index on ties.
    fn smallest_group(&self) -> usize {
        (0..self.groups.len())
            .min_by_key(|&g| (self.groups[g].len(), g))
            .expect("at least one group")
    }

    fn apply_next(&mut self) {
        let Scheduled { t, what, .. } = self.heap.pop().expect("caller checked");
        self.now = t;
        match what {
            Happening::PassDone {
                prefilled,
                to_cpu,
                finished,
            } => {
                self.inflight_passes -= 1;
                for &i in &prefilled {
                    let (seq, bytes) = (self.seqs[i].id, self.seqs[i].footprint);
                    self.log(t, EventKind::PrefillDone { seq });
                    if to_cpu {
                        self.gpu_used -= bytes;
                        self.log(t, EventKind::SwapOutDone { seq, bytes });
                        self.cpu_queue.push_back(i);
                    }
                }
                if !to_cpu && !prefilled.is_empty() {
                    let g = self.smallest_group();
                    self.groups[g].extend(prefilled);
                }
                for i in finished {
                    let (seq, bytes) = (self.seqs[i].id, self.seqs[i].footprint);
                    self.gpu_used -= bytes;
                    self.log(t, EventKind::Release { seq, bytes });
                }
            }
            Happening::SwapInDone(i) => {
                self.swapins -= 1;
                let (seq, bytes) = (self.seqs[i].id, self.seqs[i].footprint);
                self.cpu_used -= bytes;
                self.log(t, EventKind::SwapInDone { seq, bytes });
                if self.inflight_passes == 0 && self.groups.iter().all(|g| g.is_empty()) {
                    let idle_from = self.stage_free[0].max(self.prefetch_from).max(self.last_stall_end);
                    self.report.stalled_transfer_time += (t - idle_from).max(0.0);
                    self.last_stall_end = t;
                }
                let g = self.smallest_group();
                self.groups[g].push(i);
            }
        }
        if self.sh.tiered() && self.phase == Some(Stage::Decode) {
            self.prefetch();
        }
    }

    /// Starts swap-ins, in host-queue order, for every sequence that fits in
    /// free GPU KV.
    fn prefetch(&mut self) {
        let sh = self.sh;
        while let Some(&i) = self.cpu_queue.front() {
            let fp = self.seqs[i].footprint;
            if self.gpu_used + fp > sh.gpu_capacity {
                break;
            }
            self.cpu_queue.pop_front();
            self.gpu_used += fp;
            let mut start = self.now.max(self.link_in_free).max(self.prefetch_from);
            if !sh.opts.full_duplex {
                start = start.max(self.out_link_free);
            }
            let len = self.seqs[i].input as u64;
            let end = start + sh.host_transfer(len * sh.kv_per_token, len, &sh.cfg_d);
            self.link_in_free = end;
            self.swapins += 1;
            let seq = self.seqs[i].id;
            self.log(start, EventKind::SwapInStart { seq, bytes: fp });
            self.schedule(end, Happening::SwapInDone(i));
        }
    }
}
