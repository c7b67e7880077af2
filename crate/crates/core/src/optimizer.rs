//! Static and mixed (prefill/decode) parallelization search.
//!
//! The per-request objective of a config pair is
//! `inv_p(b_p, s_in) + s_out * inv_d(b_d, s_in + s_out / 2) + amortization`
//! where `inv` is [`throughput_inverse`] at the config's maximum batch for
//! full-length sequences, and the amortization spreads the weight reloads of
//! every prefill/decode round trip over the requests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::perf::{throughput_inverse, CostMode, Phase};
use crate::reshard::reload_time;
use crate::sim::{simulate, SchedulingPolicy, SimOptions, SimReport};
use crate::types::{
    kv_bytes_per_token, max_batch_size, validate_config, HardwareSpec, ModelSpec, ParallelismConfig, Request,
};

/// Representative workload shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSummary {
    pub n: u64,
    pub s_in: f64,
    pub s_out: f64,
}

impl WorkloadSummary {
    pub fn new(n: u64, s_in: f64, s_out: f64) -> Self {
        WorkloadSummary { n, s_in, s_out }
    }

    /// Means of the request lengths.
    pub fn from_requests(reqs: &[Request]) -> Result<Self> {
        if reqs.is_empty() {
            return Err(Error::EmptyWorkload);
        }
        let n = reqs.len() as f64;
        Ok(WorkloadSummary {
            n: reqs.len() as u64,
            s_in: reqs.iter().map(|r| r.input_len as f64).sum::<f64>() / n,
            s_out: reqs.iter().map(|r| r.output_len as f64).sum::<f64>() / n,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.s_in.is_nan() || self.s_in < 1.0 || self.s_out.is_nan() || self.s_out < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "workload summary needs n >= 1 and lengths >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    fn decode_context(&self) -> f64 {
        self.s_in + self.s_out / 2.0
    }

    fn full_len(&self) -> u64 {
        (self.s_in + self.s_out).ceil() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub cfg_p: ParallelismConfig,
    pub cfg_d: ParallelismConfig,
    /// Objective: predicted seconds per request, amortization included.
    pub predicted_inverse_throughput: f64,
    pub reshard_amortization: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated_tokens_per_second: Option<f64>,
}

impl StrategyPlan {
    pub fn is_mixed(&self) -> bool {
        self.cfg_p != self.cfg_d
    }
}

/// Per-request prefill and decode seconds of one config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfigEval {
    pub cfg: ParallelismConfig,
    pub max_batch: u64,
    pub prefill: f64,
    pub decode: f64,
}

impl ConfigEval {
    pub fn objective(&self) -> f64 {
        self.prefill + self.decode
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    AllreduceScale,
    PdRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub best_static: StrategyPlan,
    pub best_mixed: StrategyPlan,
}

pub const SWEEP_CSV_HEADER: &str =
    "axis_value,static_tp,static_pp,static_dp,static_obj_s,mixed_tp_p,mixed_pp_p,mixed_tp_d,mixed_pp_d,mixed_obj_s";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let (s, m) = (&r.best_static, &r.best_mixed);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.axis_value,
            s.cfg_p.tp,
            s.cfg_p.pp,
            s.cfg_p.dp,
            s.predicted_inverse_throughput,
            m.cfg_p.tp,
            m.cfg_p.pp,
            m.cfg_d.tp,
            m.cfg_d.pp,
            m.predicted_inverse_throughput
        ));
    }
    out
}

/// Every `(tp, pp, dp)` that uses the whole fleet and is feasible, in
/// lexicographic order.
pub fn enumerate_configs(model: &ModelSpec, hw: &HardwareSpec) -> Vec<ParallelismConfig> {
    let n = hw.num_gpus;
    let divisors = |x: u32| (1..=x).filter(move |d| x.is_multiple_of(*d));
    divisors(n)
        .flat_map(|tp| divisors(n / tp).map(move |pp| ParallelismConfig::new(tp, pp, n / (tp * pp))))
        .filter(|cfg| validate_config(model, hw, cfg).is_feasible())
        .collect()
}

/// Static preference: larger tp, then smaller dp.
fn static_key(cfg: &ParallelismConfig) -> (std::cmp::Reverse<u32>, u32) {
    (std::cmp::Reverse(cfg.tp), cfg.dp)
}

#[derive(Debug, Clone)]
pub struct Optimizer<'a> {
    pub model: &'a ModelSpec,
    pub hw: &'a HardwareSpec,
    pub mode: CostMode,
    pub exec: Exec,
}

impl<'a> Optimizer<'a> {
    pub fn new(model: &'a ModelSpec, hw: &'a HardwareSpec) -> Self {
        Optimizer {
            model,
            hw,
            mode: CostMode::Roofline,
            exec: Exec::default(),
        }
    }

    pub fn with_mode(self, mode: CostMode) -> Self {
        Optimizer { mode, ..self }
    }

    pub fn with_exec(self, exec: Exec) -> Self {
        Optimizer { exec, ..self }
    }

    pub fn enumerate_configs(&self) -> Vec<ParallelismConfig> {
        enumerate_configs(self.model, self.hw)
    }

    /// `None` when the config leaves no room for a single full-length
    /// sequence.
    pub fn evaluate(&self, cfg: &ParallelismConfig, w: &WorkloadSummary) -> Result<Option<ConfigEval>> {
        let b = max_batch_size(self.model, self.hw, cfg, w.full_len())?.max_batch;
        if b == 0 {
            return Ok(None);
        }
        let bf = b as f64;
        let inv = |phase, s| throughput_inverse(self.model, self.hw, cfg, bf, s, phase, self.mode);
        Ok(Some(ConfigEval {
            cfg: *cfg,
            max_batch: b,
            prefill: inv(Phase::Prefill, w.s_in)?,
            decode: w.s_out * inv(Phase::Decode, w.decode_context())?,
        }))
    }

    pub fn evaluate_all(&self, w: &WorkloadSummary) -> Result<Vec<ConfigEval>> {
        w.validate()?;
        let configs = self.enumerate_configs();
        let evals = self.exec.map(&configs, |c| self.evaluate(c, w));
        let mut out = Vec::with_capacity(evals.len());
        for e in evals {
            if let Some(e) = e? {
                out.push(e);
            }
        }
        Ok(out)
    }

    /// Reload seconds per request for switching between `p` and `d` as often
    /// as the host tier forces it.
    pub fn amortization(&self, p: &ParallelismConfig, d: &ParallelismConfig, w: &WorkloadSummary) -> f64 {
        if p == d {
            return 0.0;
        }
        let demand = w.n as f64 * kv_bytes_per_token(self.model) as f64 * (w.s_in + w.s_out);
        let rounds = (demand / self.hw.host_capacity() as f64).ceil().max(1.0);
        rounds * (reload_time(self.model, self.hw, p) + reload_time(self.model, self.hw, d)) / w.n as f64
    }

    pub fn best_static(&self, w: &WorkloadSummary) -> Result<StrategyPlan> {
        let evals = self.evaluate_all(w)?;
        best_static_of(&evals).ok_or(Error::NoFeasibleConfig)
    }

    pub fn best_mixed(&self, w: &WorkloadSummary) -> Result<StrategyPlan> {
        let evals = self.evaluate_all(w)?;
        self.best_mixed_of(&evals, w).ok_or(Error::NoFeasibleConfig)
    }

    /// Both plans from a single evaluation pass.
    pub fn best_plans(&self, w: &WorkloadSummary) -> Result<(StrategyPlan, StrategyPlan)> {
        let evals = self.evaluate_all(w)?;
        let s = best_static_of(&evals).ok_or(Error::NoFeasibleConfig)?;
        let m = self.best_mixed_of(&evals, w).ok_or(Error::NoFeasibleConfig)?;
        Ok((s, m))
    }

    fn best_mixed_of(&self, evals: &[ConfigEval], w: &WorkloadSummary) -> Option<StrategyPlan> {
        let mut best: Option<(StrategyPlan, MixedKey)> = None;
        for p in evals {
            for d in evals.iter().filter(|d| d.cfg.dp == p.cfg.dp) {
                let amort = self.amortization(&p.cfg, &d.cfg, w);
                let obj = p.prefill + d.decode + amort;
                // Prefer static pairs, then larger decode tp, smaller dp, larger prefill tp.
                let key = (
                    p.cfg != d.cfg,
                    std::cmp::Reverse(d.cfg.tp),
                    d.cfg.dp,
                    std::cmp::Reverse(p.cfg.tp),
                );
                let better = match &best {
                    None => true,
                    Some((b, k)) => {
                        obj < b.predicted_inverse_throughput || (obj == b.predicted_inverse_throughput && key < *k)
                    }
                };
                if better {
                    best = Some((
                        StrategyPlan {
                            cfg_p: p.cfg,
                            cfg_d: d.cfg,
                            predicted_inverse_throughput: obj,
                            reshard_amortization: amort,
                            simulated_tokens_per_second: None,
                        },
                        key,
                    ));
                }
            }
        }
        best.map(|(plan, _)| plan)
    }

    pub fn sweep(&self, w: &WorkloadSummary, axis: SweepAxis, grid: &[f64]) -> Result<Vec<SweepRow>> {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            if !(axis == SweepAxis::PdRatio && *v == 0.0) {
                return Err(Error::InvalidArgument(format!("grid value {v} must be positive")));
            }
        }
        let rows = self.exec.map(grid, |&v| {
            let (hw, w) = match axis {
                SweepAxis::AllreduceScale => (self.hw.with_allreduce_scale(v), *w),
                SweepAxis::PdRatio => {
                    let s_out = (v * w.s_in).round().max(1.0);
                    (self.hw.clone(), WorkloadSummary { s_out, ..*w })
                }
            };
            let opt = Optimizer {
                hw: &hw,
                exec: Exec::Sequential,
                ..self.clone()
            };
            let (best_static, best_mixed) = opt.best_plans(&w)?;
            Ok(SweepRow {
                axis_value: v,
                best_static,
                best_mixed,
            })
        });
        rows.into_iter().collect()
    }

    /// Simulates `plan` on `trace`. A mixed plan runs under the
    /// transition-minimizing policy; a static plan reports the best of the
    /// three policies.
    pub fn confirm(
        &self,
        plan: &StrategyPlan,
        trace: &[Request],
        opts: &SimOptions,
    ) -> Result<(StrategyPlan, SimReport)> {
        let opts = SimOptions {
            mode: self.mode,
            ..opts.clone()
        };
        let policies: &[SchedulingPolicy] = if plan.is_mixed() {
            &[SchedulingPolicy::TransitionMinimizing]
        } else {
            &[
                SchedulingPolicy::PrefillPrioritized,
                SchedulingPolicy::DecodePrioritized,
                SchedulingPolicy::TransitionMinimizing,
            ]
        };
        let mut best: Option<SimReport> = None;
        for &policy in policies {
            let r = match simulate(self.model, self.hw, trace, policy, &plan.cfg_p, &plan.cfg_d, &opts) {
                Ok(r) => r,
                // A static plan may not fit the host tier; the other policies still apply.
                Err(Error::RequestTooLarge { tier: "cpu", .. }) if policies.len() > 1 => continue,
                Err(e) => return Err(e),
            };
            if best.as_ref().is_none_or(|b| r.tokens_per_second > b.tokens_per_second) {
                best = Some(r);
            }
        }
        let report = best.expect("at least one policy ran");
        let mut plan = plan.clone();
        plan.simulated_tokens_per_second = Some(report.tokens_per_second);
        Ok((plan, report))
    }
}

/// Tie-break order for equal mixed objectives; smaller wins.
type MixedKey = (bool, std::cmp::Reverse<u32>, u32, std::cmp::Reverse<u32>);

fn best_static_of(evals: &[ConfigEval]) -> Option<StrategyPlan> {
    let best = evals.iter().min_by(|a, b| {
        a.objective()
            .total_cmp(&b.objective())
            .then_with(|| static_key(&a.cfg).cmp(&static_key(&b.cfg)))
    })?;
    Some(StrategyPlan {
        cfg_p: best.cfg,
        cfg_d: best.cfg,
        predicted_inverse_throughput: best.objective(),
        reshard_amortization: 0.0,
        simulated_tokens_per_second: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn enumeration_examples() {
        let m = fixtures::model_e();
        let got = enumerate_configs(&m, &fixtures::model_e_hardware(4));
        let want: Vec<_> = [(1, 1, 4), (1, 2, 2), (1, 4, 1), (2, 1, 2), (2, 2, 1), (4, 1, 1)]
            .iter()
            .map(|&(t, p, d)| ParallelismConfig::new(t, p, d))
            .collect();
        assert_eq!(got, want);
        assert_eq!(
            enumerate_configs(&m, &fixtures::model_e_hardware(1)),
            vec![ParallelismConfig::new(1, 1, 1)]
        );
        let big = enumerate_configs(&fixtures::model_70b(), &fixtures::a100_40gib(8));
        assert!(!big.is_empty());
        assert!(big.iter().all(|c| c.tp * c.pp >= 4));
    }

    #[test]
    fn mixed_never_worse_and_static_pairs_match() {
        let m = fixtures::model_34b();
        let hw = fixtures::a10(8);
        let opt = Optimizer::new(&m, &hw);
        for (s_in, s_out) in [(1024.0, 1.0), (512.0, 512.0), (128.0, 2048.0)] {
            let w = WorkloadSummary::new(500, s_in, s_out);
            let s = opt.best_static(&w).unwrap();
            let mx = opt.best_mixed(&w).unwrap();
            assert!(mx.predicted_inverse_throughput <= s.predicted_inverse_throughput);
            if !mx.is_mixed() {
                assert_eq!(mx.predicted_inverse_throughput, s.predicted_inverse_throughput);
            }
        }
    }

    #[test]
    fn unbounded_host_tier_amortizes_one_round_trip() {
        let m = fixtures::model_34b();
        let mut hw = fixtures::a10(8);
        hw.host_memory_per_gpu = u64::MAX / 16;
        let opt = Optimizer::new(&m, &hw);
        let (p, d) = (ParallelismConfig::new(1, 8, 1), ParallelismConfig::new(8, 1, 1));
        let w = WorkloadSummary::new(1000, 1000.0, 1000.0);
        let want = (reload_time(&m, &hw, &p) + reload_time(&m, &hw, &d)) / 1000.0;
        assert_eq!(opt.amortization(&p, &d, &w), want);
        assert_eq!(opt.amortization(&p, &p, &w), 0.0);
    }

    #[test]
    fn nvlink_four_gpus_prefers_pure_tp() {
        // Memory-tight NVLink fleets keep decode weight-bound, where TP wins.
        let cases = [
            (
                fixtures::model_70b(),
                fixtures::a100_40gib(4),
                ParallelismConfig::new(4, 1, 1),
            ),
            (
                fixtures::model_34b(),
                fixtures::a100_40gib(2),
                ParallelismConfig::new(2, 1, 1),
            ),
        ];
        for (m, hw, want) in cases {
            let opt = Optimizer::new(&m, &hw);
            for (s_in, s_out) in [(512.0, 512.0), (1024.0, 128.0), (128.0, 1024.0)] {
                let plan = opt.best_static(&WorkloadSummary::new(1000, s_in, s_out)).unwrap();
                assert_eq!(plan.cfg_p, want, "{s_in}/{s_out}");
            }
        }
    }

    #[test]
    fn single_point_sweep_matches_direct_calls() {
        let m = fixtures::model_34b();
        let hw = fixtures::a10(8);
        let opt = Optimizer::new(&m, &hw);
        let w = WorkloadSummary::new(300, 700.0, 300.0);
        let rows = opt.sweep(&w, SweepAxis::AllreduceScale, &[1.0]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].best_static, opt.best_static(&w).unwrap());
        assert_eq!(rows[0].best_mixed, opt.best_mixed(&w).unwrap());
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
        assert!(opt.sweep(&w, SweepAxis::AllreduceScale, &[]).is_err());
        assert!(opt.sweep(&w, SweepAxis::AllreduceScale, &[-1.0]).is_err());
    }

    #[test]
    fn infeasible_fleet_reports_no_config() {
        let m = fixtures::model_70b();
        let hw = fixtures::a10(2);
        let err = Optimizer::new(&m, &hw)
            .best_static(&WorkloadSummary::new(10, 100.0, 100.0))
            .unwrap_err();
        assert_eq!(err.kind(), "no_feasible_config");
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let m = fixtures::model_34b();
        let hw = fixtures::a10(8);
        let w = WorkloadSummary::new(2000, 1024.0, 512.0);
        let grid = [0.1, 0.5, 1.0, 5.0, 50.0];
        let a = Optimizer::new(&m, &hw)
            .with_exec(Exec::Sequential)
            .sweep(&w, SweepAxis::AllreduceScale, &grid)
            .unwrap();
        let b = Optimizer::new(&m, &hw)
            .with_exec(Exec::Parallel)
            .sweep(&w, SweepAxis::AllreduceScale, &grid)
            .unwrap();
        assert_eq!(a, b);
    }
}
