//! Acceptance suite. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::cell::RefCell;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shardsim::exec::Exec;
use shardsim::fixtures::{self, GIB};
use shardsim::optimizer::{Optimizer, SweepAxis, WorkloadSummary};
use shardsim::perf::{stage_time, throughput_inverse};
use shardsim::sim::{events_to_csv, replay_check, simulate, EventKind, SchedulingPolicy, SimOptions, SimReport};
use shardsim::types::{kv_bytes_per_token, max_batch_size};
use shardsim::{CostMode, HardwareSpec, ModelSpec, ParallelismConfig, Phase, Request};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn(&Suite) -> Outcome);

fn cfg(tp: u32, pp: u32, dp: u32) -> ParallelismConfig {
    ParallelismConfig::new(tp, pp, dp)
}

fn homogeneous(n: u64, s_in: u32, s_out: u32) -> Vec<Request> {
    (0..n).map(|i| Request::new(i, s_in, s_out)).collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Every simulation in the suite goes through here so that criterion 9 can
/// vouch for all of them.
#[derive(Default)]
struct Ledger {
    reports: usize,
    replay_failures: Vec<String>,
}

struct Suite {
    ledger: RefCell<Ledger>,
    rng: RefCell<ChaCha8Rng>,
}

impl Suite {
    #[allow(clippy::too_many_arguments)]
    fn sim(
        &self,
        model: &ModelSpec,
        hw: &HardwareSpec,
        reqs: &[Request],
        policy: SchedulingPolicy,
        p: ParallelismConfig,
        d: ParallelismConfig,
        opts: &SimOptions,
    ) -> Result<SimReport, String> {
        let r = simulate(model, hw, reqs, policy, &p, &d, opts).map_err(|e| format!("simulate {p}->{d}: {e}"))?;
        self.check(&r);
        Ok(r)
    }

    fn check(&self, r: &SimReport) {
        let mut l = self.ledger.borrow_mut();
        l.reports += 1;
        match replay_check(r) {
            Ok(v) if v.is_ok() => {}
            other => l
                .replay_failures
                .push(format!("{}->{} {:?}: {other:?}", r.cfg_p, r.cfg_d, r.policy)),
        }
    }

    fn rng(&self) -> std::cell::RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }
}

fn c1_stage_preference(_: &Suite) -> Outcome {
    let m = fixtures::model_34b();
    let hw = fixtures::a10(4);
    let (b, s) = (16.0, 1024.0);
    let mode = CostMode::Roofline;
    let (pp4, tp4) = (cfg(1, 4, 1), cfg(4, 1, 1));
    let st = |c| stage_time(&m, &hw, &c, b, s, Phase::Prefill, mode).map_err(|e| e.to_string());
    let tps = |c| {
        throughput_inverse(&m, &hw, &c, b, s, Phase::Decode, mode)
            .map(|x| 1.0 / x)
            .map_err(|e| e.to_string())
    };
    let prefill = st(tp4)? / st(pp4)?;
    let decode = tps(tp4)? / tps(pp4)?;
    ensure(prefill >= 1.2 && decode >= 1.2, || {
        format!("prefill tp4/pp4 {prefill:.3}, decode tp4/pp4 {decode:.3}")
    })?;
    Ok(format!(
        "prefill stage_time tp4/pp4 = {prefill:.2}x, decode tokens/s tp4/pp4 = {decode:.2}x"
    ))
}

fn c2_max_batch(s: &Suite) -> Outcome {
    let m70 = fixtures::model_70b();
    let b = max_batch_size(&m70, &fixtures::a100_40gib(4), &cfg(4, 1, 1), 4096)
        .map_err(|e| e.to_string())?
        .max_batch;
    ensure(b == 16, || format!("70B/40GiB b_max = {b}"))?;

    let mut rng = s.rng();
    let cases = 256;
    for case in 0..cases {
        let kv_heads = [1u32, 2, 4, 8, 16][rng.random_range(0..5)];
        let layers = rng.random_range(1u32..=64) * 2;
        let model = ModelSpec::new(
            layers,
            rng.random_range(1_000_000u64..400_000_000),
            kv_heads * 2,
            kv_heads * 2,
            128,
        )
        .map_err(|e| e.to_string())?;
        let divs = |n: u32| (1..=n).filter(|d| n.is_multiple_of(*d)).collect::<Vec<_>>();
        let tps = divs(kv_heads);
        let pps = divs(layers / 2);
        let (tp, pp) = (tps[rng.random_range(0..tps.len())], pps[rng.random_range(0..pps.len())]);
        let seq = rng.random_range(1u64..8192);
        let spare = rng.random_range(0u64..8 * GIB);
        let base = cfg(tp, pp, 1);
        let per_gpu = model.total_weight_bytes().div_ceil(base.gpus_per_replica() as u64) + spare;
        let hw_for = |c: &ParallelismConfig| HardwareSpec {
            num_gpus: c.num_gpus(),
            gpu_memory: per_gpu,
            ..fixtures::a10(1)
        };
        let bm = |c: ParallelismConfig| {
            max_batch_size(&model, &hw_for(&c), &c, seq)
                .map(|k| k.max_batch)
                .map_err(|e| e.to_string())
        };

        let b1 = bm(base)?;
        let dp = rng.random_range(2u32..=8);
        let bd = bm(cfg(tp, pp, dp))?;
        ensure(bd == dp as u64 * b1, || {
            format!("case {case}: dp={dp} gives {bd}, expected {}", dp as u64 * b1)
        })?;

        let per_replica = per_gpu * base.gpus_per_replica() as u64 - model.total_weight_bytes();
        ensure(b1 * seq * kv_bytes_per_token(&model) <= per_replica, || {
            format!("case {case}: overcommit")
        })?;

        // The layer count is even, so doubling either degree stays divisible.
        if model.total_weight_bytes() >= seq * kv_bytes_per_token(&model) {
            let doubled = if rng.random_bool(0.5) && kv_heads.is_multiple_of(2 * tp) {
                cfg(2 * tp, pp, 1)
            } else {
                cfg(tp, 2 * pp, 1)
            };
            let b2 = bm(doubled)?;
            ensure(b2 > 2 * b1, || {
                format!("case {case}: {doubled} gives {b2}, not > 2 x {b1}")
            })?;
        }
    }
    Ok(format!(
        "70B/40GiB b_max = 16; {cases} randomized linearity/super-linearity cases"
    ))
}

fn c3_disaggregation(_: &Suite) -> Outcome {
    let m = fixtures::model_70b();
    let w = WorkloadSummary::new(1000, 2048.0, 2048.0);
    let best = |gpus: u32| -> Result<(f64, f64), String> {
        let hw = fixtures::a100_40gib(gpus);
        let evals = Optimizer::new(&m, &hw).evaluate_all(&w).map_err(|e| e.to_string())?;
        let prefill = evals.iter().map(|e| 1.0 / e.prefill).fold(0.0, f64::max);
        let decode = evals.iter().map(|e| 1.0 / e.decode).fold(0.0, f64::max);
        Ok((prefill, decode))
    };
    let (p4, d4) = best(4)?;
    let (_, d8) = best(8)?;
    let mismatch = p4 / d4;
    let share = d4 / d8;
    ensure(mismatch > 3.0 && share < 0.35, || {
        format!("prefill4/decode4 {mismatch:.2}, decode4/decode8 {share:.3}")
    })?;
    Ok(format!(
        "prefill/decode on 4 GPUs = {mismatch:.2}x, decode 4 vs 8 GPUs = {:.1}%",
        share * 100.0
    ))
}

fn c4_closed_form(s: &Suite) -> Outcome {
    let m = fixtures::model_e();
    let kvpt = kv_bytes_per_token(&m);
    let shapes = [(1, 1), (2, 1), (1, 2), (2, 2), (4, 1), (1, 4)];
    let fixtures_run = 24;
    let mut worst = 0.0f64;
    for i in 0..fixtures_run {
        let (tp, pp, b, s_in, s_out, waves, mode) = {
            let mut rng = s.rng();
            let (tp, pp) = shapes[rng.random_range(0..shapes.len())];
            let b = pp as u64 * rng.random_range(2u64..=16);
            let s_in = rng.random_range(16u32..=128);
            let s_out = rng.random_range(4 * s_in..=8 * s_in);
            let mode = if rng.random_bool(0.5) {
                CostMode::Roofline
            } else {
                CostMode::Additive
            };
            (tp, pp, b, s_in, s_out, rng.random_range(2u64..=4), mode)
        };
        let c = cfg(tp, pp, 1);
        let n = c.gpus_per_replica() as u64;
        // GPU KV holds exactly b full-length sequences; transfers are free.
        let mut hw = fixtures::model_e_sized(
            n as u32,
            n as u32,
            b * (s_in + s_out) as u64 * kvpt,
            4 * b * (s_in + s_out) as u64 * kvpt,
        );
        hw.host_link_bandwidth = f64::INFINITY;
        let opts = SimOptions {
            mode,
            ..SimOptions::default()
        };
        let r = s.sim(
            &m,
            &hw,
            &homogeneous(b * waves, s_in, s_out),
            SchedulingPolicy::DecodePrioritized,
            c,
            c,
            &opts,
        )?;
        let inv = |phase, len| throughput_inverse(&m, &hw, &c, b as f64, len, phase, mode).map_err(|e| e.to_string());
        let per_req =
            inv(Phase::Prefill, s_in as f64)? + s_out as f64 * inv(Phase::Decode, s_in as f64 + s_out as f64 / 2.0)?;
        let analytic = s_out as f64 / per_req;
        let err = (r.tokens_per_second - analytic).abs() / analytic;
        worst = worst.max(err);
        ensure(err <= 0.05, || {
            format!(
                "fixture {i} {c} b={b} s_in={s_in} s_out={s_out} {mode:?}: sim {:.2} vs {analytic:.2} ({:.1}%)",
                r.tokens_per_second,
                err * 100.0
            )
        })?;
    }
    Ok(format!(
        "{fixtures_run} randomized fixtures, worst deviation {:.2}%",
        worst * 100.0
    ))
}

fn c5_transition_law(s: &Suite) -> Outcome {
    let m = fixtures::model_e();
    let kvpt = kv_bytes_per_token(&m);
    let tm = SchedulingPolicy::TransitionMinimizing;
    let opts = SimOptions::default();

    let k = 128 * kvpt;
    let hw = fixtures::model_e_sized(1, 1, 2 * k, 4 * k);
    let r = s.sim(&m, &hw, &homogeneous(8, 96, 32), tm, cfg(1, 1, 1), cfg(1, 1, 1), &opts)?;
    ensure(r.transitions == 3, || {
        format!("8-request oracle gave {} transitions", r.transitions)
    })?;

    let shapes = [(1, 1), (2, 1), (1, 2), (2, 2), (4, 1), (1, 4)];
    let cases = 40;
    for i in 0..cases {
        let (n, c_seqs, g_seqs, s_in, s_out, p, d) = {
            let mut rng = s.rng();
            let gpr = [1u32, 2, 4][rng.random_range(0..3)];
            let fit: Vec<_> = shapes.iter().filter(|(t, p)| t * p == gpr).collect();
            let &&(tp_p, pp_p) = &fit[rng.random_range(0..fit.len())];
            let &&(tp_d, pp_d) = &fit[rng.random_range(0..fit.len())];
            (
                rng.random_range(1u64..=40),
                rng.random_range(1u64..=8),
                rng.random_range(1u64..=4),
                rng.random_range(8u32..=128),
                rng.random_range(1u32..=64),
                cfg(tp_p, pp_p, 1),
                cfg(tp_d, pp_d, 1),
            )
        };
        let gpr = p.gpus_per_replica();
        let k = (s_in + s_out) as u64 * kvpt;
        let hw = fixtures::model_e_sized(gpr, gpr, g_seqs * k, c_seqs * k);
        let r = s.sim(&m, &hw, &homogeneous(n, s_in, s_out), tm, p, d, &opts)?;
        let want = 2 * n.div_ceil(c_seqs) as u32 - 1;
        ensure(r.transitions == want, || {
            format!(
                "case {i}: n={n} C={c_seqs}k G={g_seqs}k {p}->{d}: {} transitions, law says {want}",
                r.transitions
            )
        })?;
    }
    Ok(format!(
        "8/4/2 oracle = 3 transitions; law holds on {cases} randomized fixtures"
    ))
}

fn c6_overlap(s: &Suite) -> Outcome {
    let m = fixtures::model_e();
    let kvpt = kv_bytes_per_token(&m);
    let cases = 24;
    let mut steps = 0usize;
    for i in 0..cases {
        let (n, s_in, s_out, g, c_seqs, p, d, nhd) = {
            let mut rng = s.rng();
            let pairs = [
                (cfg(1, 2, 1), cfg(2, 1, 1)),
                (cfg(2, 1, 1), cfg(2, 1, 1)),
                (cfg(1, 2, 1), cfg(1, 2, 1)),
                (cfg(4, 1, 1), cfg(1, 4, 1)),
            ];
            let (p, d) = pairs[rng.random_range(0..pairs.len())];
            (
                rng.random_range(4u64..=60),
                rng.random_range(16u32..=512),
                rng.random_range(1u32..=128),
                rng.random_range(2u64..=12),
                rng.random_range(2u64..=24),
                p,
                d,
                rng.random_bool(0.3),
            )
        };
        let gpr = p.gpus_per_replica();
        let k = (s_in + s_out) as u64 * kvpt;
        let hw = fixtures::model_e_sized(gpr, gpr, g * k, c_seqs * k);
        let reqs = homogeneous(n, s_in, s_out);
        let base = SimOptions {
            layout: if nhd {
                shardsim::KvLayout::Nhd
            } else {
                shardsim::KvLayout::Hnd
            },
            ..SimOptions::default()
        };
        let off_opts = SimOptions {
            overlap: false,
            ..base.clone()
        };
        let on = s.sim(&m, &hw, &reqs, SchedulingPolicy::TransitionMinimizing, p, d, &base)?;
        let off = s.sim(&m, &hw, &reqs, SchedulingPolicy::TransitionMinimizing, p, d, &off_opts)?;
        ensure(on.makespan <= off.makespan, || {
            format!("case {i}: on {} > off {}", on.makespan, off.makespan)
        })?;
        for e in &on.event_log {
            if let EventKind::PrefillStep {
                compute_s,
                transfer_s,
                wall_s,
                ..
            } = e.kind
            {
                steps += 1;
                ensure(wall_s == compute_s.max(transfer_s), || {
                    format!("case {i}: wall {wall_s} != max({compute_s}, {transfer_s})")
                })?;
            }
        }
    }
    Ok(format!(
        "{cases} fixtures, ON <= OFF everywhere; {steps} prefill steps with wall == max(compute, transfer)"
    ))
}

fn c7_mixed_dominance(s: &Suite) -> Outcome {
    let models = [fixtures::model_e(), fixtures::model_34b(), fixtures::model_70b()];
    let mut checked = 0;
    for i in 0..120 {
        let (m, hw, w) = {
            let mut rng = s.rng();
            let m = &models[rng.random_range(0..models.len())];
            let gpus = [1u32, 2, 4, 8][rng.random_range(0..4)];
            let hw = match rng.random_range(0..3) {
                0 => fixtures::a10(gpus),
                1 => fixtures::a100_40gib(gpus),
                _ => fixtures::a100_80gib(gpus),
            };
            let w = WorkloadSummary::new(
                rng.random_range(1u64..=20_000),
                rng.random_range(1u32..=4096) as f64,
                rng.random_range(1u32..=2048) as f64,
            );
            (m, hw, w)
        };
        match Optimizer::new(m, &hw).best_plans(&w) {
            Ok((st, mx)) => {
                checked += 1;
                ensure(
                    mx.predicted_inverse_throughput <= st.predicted_inverse_throughput,
                    || {
                        format!(
                            "fixture {i}: mixed {} > static {}",
                            mx.predicted_inverse_throughput, st.predicted_inverse_throughput
                        )
                    },
                )?;
            }
            Err(shardsim::Error::NoFeasibleConfig) => {}
            Err(e) => return Err(format!("fixture {i}: {e}")),
        }
    }

    let m = fixtures::model_34b();
    let hw = fixtures::a10(8);
    let reqs = homogeneous(1024, 1024, 1024);
    let w = WorkloadSummary::from_requests(&reqs).map_err(|e| e.to_string())?;
    let opt = Optimizer::new(&m, &hw);
    let (st, mx) = opt.best_plans(&w).map_err(|e| e.to_string())?;
    ensure(mx.cfg_p.tp < mx.cfg_d.tp, || {
        format!("best mixed {} -> {}", mx.cfg_p, mx.cfg_d)
    })?;
    let opts = SimOptions::default();
    let (st_sim, st_rep) = opt.confirm(&st, &reqs, &opts).map_err(|e| e.to_string())?;
    let (mx_sim, mx_rep) = opt.confirm(&mx, &reqs, &opts).map_err(|e| e.to_string())?;
    s.check(&st_rep);
    s.check(&mx_rep);
    let speedup = mx_sim.simulated_tokens_per_second.unwrap() / st_sim.simulated_tokens_per_second.unwrap();
    ensure(speedup >= 1.05, || format!("simulated mixed/static = {speedup:.3}"))?;
    Ok(format!(
        "mixed <= static on {checked} feasible fixtures; A10x8 balanced: {}->{} vs static {} ({:?}), simulated speedup {speedup:.3}x",
        mx.cfg_p, mx.cfg_d, st.cfg_p, st_rep.policy
    ))
}

fn c8_sweeps(_: &Suite) -> Outcome {
    let m = fixtures::model_34b();
    let hw = fixtures::a10(8);
    let opt = Optimizer::new(&m, &hw);
    let w = WorkloadSummary::new(1024, 1024.0, 1024.0);
    let grid = [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0];
    let rows = opt
        .sweep(&w, SweepAxis::AllreduceScale, &grid)
        .map_err(|e| e.to_string())?;
    let tps: Vec<u32> = rows.iter().map(|r| r.best_static.cfg_p.tp).collect();
    ensure(tps.windows(2).all(|p| p[0] <= p[1]), || {
        format!("static tp along grid: {tps:?}")
    })?;
    ensure(tps.first() < tps.last(), || format!("no crossover: {tps:?}"))?;
    for r in &rows {
        ensure(
            r.best_mixed.predicted_inverse_throughput <= r.best_static.predicted_inverse_throughput,
            || format!("scale {}: mixed above static", r.axis_value),
        )?;
    }

    let w = WorkloadSummary::new(1000, 3000.0, 1.0);
    let pd = opt
        .sweep(&w, SweepAxis::PdRatio, &[0.0, 0.01, 0.05, 0.1, 0.5, 1.0])
        .map_err(|e| e.to_string())?;
    let first = &pd[0];
    let gap = (first.best_static.predicted_inverse_throughput - first.best_mixed.predicted_inverse_throughput)
        / first.best_static.predicted_inverse_throughput;
    ensure(gap <= 0.10, || {
        format!("s_out=1: mixed {:.1}% away from static", gap * 100.0)
    })?;
    ensure(first.best_static.cfg_p.tp == 1, || {
        format!("s_out=1 best static {}", first.best_static.cfg_p)
    })?;
    for r in &pd {
        ensure(
            r.best_mixed.predicted_inverse_throughput <= r.best_static.predicted_inverse_throughput,
            || format!("pd {}: mixed above static", r.axis_value),
        )?;
    }
    Ok(format!(
        "static tp over scale 0.1..50: {tps:?}; s_out=1 at s_in=3000: mixed within {:.2}% of static {}",
        gap * 100.0,
        first.best_static.cfg_p
    ))
}

fn c9_determinism(s: &Suite) -> Outcome {
    let m = fixtures::model_e();
    let kvpt = kv_bytes_per_token(&m);
    let k = 160 * kvpt;
    let hw = fixtures::model_e_sized(4, 2, 6 * k, 20 * k);
    let reqs: Vec<Request> = (0..50)
        .map(|i| Request::new(i, 64 + (i as u32 * 37) % 96, 1 + (i as u32 * 13) % 64))
        .collect();
    let (p, d) = (cfg(1, 2, 2), cfg(2, 1, 2));
    let par = SimOptions {
        seed: 7,
        exec: Exec::Parallel,
        ..SimOptions::default()
    };
    let seq = SimOptions {
        exec: Exec::Sequential,
        ..par.clone()
    };
    let a = s.sim(&m, &hw, &reqs, SchedulingPolicy::TransitionMinimizing, p, d, &par)?;
    let b = s.sim(&m, &hw, &reqs, SchedulingPolicy::TransitionMinimizing, p, d, &par)?;
    let c = s.sim(&m, &hw, &reqs, SchedulingPolicy::TransitionMinimizing, p, d, &seq)?;
    let csv = |r: &SimReport| events_to_csv(&r.event_log, p.gpus_per_replica());
    let json = |r: &SimReport| serde_json::to_string(&r.event_log).unwrap();
    ensure(csv(&a) == csv(&b) && json(&a) == json(&b), || {
        "repeated runs differ".into()
    })?;
    ensure(json(&a) == json(&c), || "sequential and parallel runs differ".into())?;

    let l = s.ledger.borrow();
    ensure(l.replay_failures.is_empty(), || {
        format!(
            "{} replay failures, first: {}",
            l.replay_failures.len(),
            l.replay_failures[0]
        )
    })?;
    Ok(format!(
        "identical logs across runs and executors; replay OK for all {} reports in the suite",
        l.reports
    ))
}

fn main() -> ExitCode {
    let seed = std::env::var("ACCEPTANCE_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0x5eed);
    let suite = Suite {
        ledger: RefCell::default(),
        rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
    };
    let criteria: [Criterion; 9] = [
        ("stage-preference ordering", c1_stage_preference),
        ("max-batch exactness", c2_max_batch),
        ("disaggregation mismatch", c3_disaggregation),
        ("simulator vs closed form", c4_closed_form),
        ("transition-count law", c5_transition_law),
        ("overlap property", c6_overlap),
        ("mixed dominance", c7_mixed_dominance),
        ("sensitivity sweeps", c8_sweeps),
        ("determinism and conservation", c9_determinism),
    ];
    let start = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f(&suite);
        let ms = t.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS [{ms} ms] {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL [{ms} ms] {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.1} s (seed {seed})",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
