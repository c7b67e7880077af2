use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use shardsim::optimizer::{sweep_csv, Optimizer, SweepAxis, WorkloadSummary};
use shardsim::perf::{layer_time, stage_pass_time, stage_time, throughput_inverse};
use shardsim::reshard::{kv_reshard_route, reload_time, weight_reload_plan};
use shardsim::sim::{events_to_csv, replay_check, simulate, SchedulingPolicy, SimOptions};
use shardsim::types::{kv_bytes_per_token, max_batch_size};
use shardsim::workload::{gen_trace, load_document, parse_trace, write_trace, TraceGen, TraceKind};
use shardsim::{CostMode, HardwareSpec, KvLayout, ModelSpec, ParallelismConfig, Phase};

#[derive(Parser)]
#[command(
    name = "shardsim",
    version,
    about = "Cost model, simulator and parallelism optimizer for offline LLM inference"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer cost breakdown and stage timings for one config.
    Analyze(AnalyzeArgs),
    /// Run the discrete-event simulator on a trace.
    Simulate(SimulateArgs),
    /// Pick the best static and best mixed parallelism plans.
    Optimize(OptimizeArgs),
    /// Re-run the optimizer over a parameter grid and write CSV.
    Sweep(SweepArgs),
    /// Write a synthetic trace.
    GenTrace(GenTraceArgs),
    /// Weight and KV movement needed to switch between two configs.
    Plan(PlanArgs),
}

#[derive(Args)]
struct Specs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    hw: PathBuf,
}

impl Specs {
    fn load(&self) -> Result<(ModelSpec, HardwareSpec)> {
        let model: ModelSpec = load_document(&self.model)?;
        let hw: HardwareSpec = load_document(&self.hw)?;
        model.validate()?;
        hw.validate()?;
        Ok((model, hw))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Roofline,
    Additive,
}

impl From<ModeArg> for CostMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Roofline => CostMode::Roofline,
            ModeArg::Additive => CostMode::Additive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Prefill,
    Decode,
    TransitionMin,
}

impl From<PolicyArg> for SchedulingPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Prefill => SchedulingPolicy::PrefillPrioritized,
            PolicyArg::Decode => SchedulingPolicy::DecodePrioritized,
            PolicyArg::TransitionMin => SchedulingPolicy::TransitionMinimizing,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    AllreduceScale,
    PdRatio,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Constant,
    Ratio,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    specs: Specs,
    #[arg(long, default_value_t = 1)]
    tp: u32,
    #[arg(long, default_value_t = 1)]
    pp: u32,
    #[arg(long, default_value_t = 1)]
    dp: u32,
    #[arg(long, value_enum)]
    phase: PhaseArg,
    /// Global batch size.
    #[arg(long)]
    batch: u64,
    #[arg(long)]
    seqlen: u64,
    #[arg(long, value_enum, default_value = "roofline")]
    mode: ModeArg,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    specs: Specs,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum)]
    policy: PolicyArg,
    #[arg(long)]
    prefill_cfg: ParallelismConfig,
    /// Defaults to the prefill config.
    #[arg(long)]
    decode_cfg: Option<ParallelismConfig>,
    #[arg(long)]
    no_overlap: bool,
    /// Store KV as (seq, heads, dim).
    #[arg(long)]
    nhd: bool,
    #[arg(long, default_value_t = 0.5)]
    nhd_penalty: f64,
    #[arg(long)]
    p2p: bool,
    /// Allow different prefill and decode configs under the non-tiered policies.
    #[arg(long)]
    force_mixed: bool,
    /// Serialize swap-ins behind outstanding swap-outs.
    #[arg(long)]
    half_duplex: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "roofline")]
    mode: ModeArg,
    #[arg(long)]
    events_csv: Option<PathBuf>,
    /// Drop the event log from the printed report.
    #[arg(long)]
    no_events: bool,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    specs: Specs,
    #[arg(long)]
    trace: PathBuf,
    /// Also simulate both plans on the trace.
    #[arg(long)]
    confirm_sim: bool,
    #[arg(long, value_enum, default_value = "roofline")]
    mode: ModeArg,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    specs: Specs,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum)]
    axis: AxisArg,
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "roofline")]
    mode: ModeArg,
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    input_len: u32,
    #[arg(long, required_if_eq("kind", "constant"), conflicts_with = "ratio")]
    output_len: Option<u32>,
    #[arg(long, required_if_eq("kind", "ratio"))]
    ratio: Option<f64>,
    /// Relative length jitter in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    specs: Specs,
    #[arg(long)]
    from: ParallelismConfig,
    #[arg(long)]
    to: ParallelismConfig,
    /// Context length of the KV route example.
    #[arg(long, default_value_t = 1024)]
    kv_len: u64,
}

fn read_trace(path: &Path) -> Result<Vec<shardsim::Request>> {
    Ok(parse_trace(path)?.requests)
}

fn analyze(a: AnalyzeArgs) -> Result<Value> {
    let (model, hw) = a.specs.load()?;
    let cfg = ParallelismConfig::new(a.tp, a.pp, a.dp);
    let phase = match a.phase {
        PhaseArg::Prefill => Phase::Prefill,
        PhaseArg::Decode => Phase::Decode,
    };
    let mode = a.mode.into();
    let (b, s) = (a.batch as f64, a.seqlen as f64);
    let micro = b / (cfg.pp as f64 * cfg.dp as f64);
    let budget = max_batch_size(&model, &hw, &cfg, a.seqlen)?;
    Ok(json!({
        "config": cfg,
        "phase": phase,
        "global_batch": a.batch,
        "micro_batch": micro,
        "seq_len": a.seqlen,
        "layer": layer_time(&model, &hw, &cfg, micro, s, phase, mode)?,
        "stage_pass_time": stage_pass_time(&model, &hw, &cfg, micro, s, phase, mode)?,
        "stage_time": stage_time(&model, &hw, &cfg, b, s, phase, mode)?,
        "throughput_inverse": throughput_inverse(&model, &hw, &cfg, b, s, phase, mode)?,
        "kv_bytes_per_token": kv_bytes_per_token(&model),
        "kv_budget": budget,
    }))
}

fn run_simulate(a: SimulateArgs) -> Result<Value> {
    let (model, hw) = a.specs.load()?;
    let trace = read_trace(&a.trace)?;
    let opts = SimOptions {
        overlap: !a.no_overlap,
        mode: a.mode.into(),
        p2p: a.p2p,
        seed: a.seed,
        layout: if a.nhd { KvLayout::Nhd } else { KvLayout::Hnd },
        nhd_penalty: a.nhd_penalty,
        full_duplex: !a.half_duplex,
        force_mixed: a.force_mixed,
        ..SimOptions::default()
    };
    let cfg_d = a.decode_cfg.unwrap_or(a.prefill_cfg);
    let mut report = simulate(&model, &hw, &trace, a.policy.into(), &a.prefill_cfg, &cfg_d, &opts)?;
    let verdict = replay_check(&report)?;
    if let Some(p) = &a.events_csv {
        fs::write(p, events_to_csv(&report.event_log, a.prefill_cfg.gpus_per_replica()))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if a.no_events {
        report.event_log.clear();
    }
    let mut doc = serde_json::to_value(&report)?;
    doc["replay"] = serde_json::to_value(&verdict)?;
    Ok(doc)
}

fn optimize(a: OptimizeArgs) -> Result<Value> {
    let (model, hw) = a.specs.load()?;
    let trace = read_trace(&a.trace)?;
    let w = WorkloadSummary::from_requests(&trace)?;
    let opt = Optimizer::new(&model, &hw).with_mode(a.mode.into());
    let (mut best_static, mut best_mixed) = opt.best_plans(&w)?;
    if a.confirm_sim {
        let opts = SimOptions::default();
        best_static = opt.confirm(&best_static, &trace, &opts)?.0;
        best_mixed = opt.confirm(&best_mixed, &trace, &opts)?.0;
    }
    Ok(json!({
        "workload": w,
        "best_static": best_static,
        "best_mixed": best_mixed,
        "predicted_speedup": best_static.predicted_inverse_throughput / best_mixed.predicted_inverse_throughput,
    }))
}

fn sweep(a: SweepArgs) -> Result<Value> {
    let (model, hw) = a.specs.load()?;
    let trace = read_trace(&a.trace)?;
    let w = WorkloadSummary::from_requests(&trace)?;
    let axis = match a.axis {
        AxisArg::AllreduceScale => SweepAxis::AllreduceScale,
        AxisArg::PdRatio => SweepAxis::PdRatio,
    };
    let rows = Optimizer::new(&model, &hw)
        .with_mode(a.mode.into())
        .sweep(&w, axis, &a.grid)?;
    fs::write(&a.out, sweep_csv(&rows)).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(json!({ "out": a.out, "rows": rows.len() }))
}

fn gen(a: GenTraceArgs) -> Result<Value> {
    let kind = match a.kind {
        KindArg::Constant => TraceKind::Constant {
            output_len: a.output_len.context("--output-len is required for constant traces")?,
        },
        KindArg::Ratio => TraceKind::Ratio {
            ratio: a.ratio.context("--ratio is required for ratio traces")?,
        },
    };
    let trace = gen_trace(&TraceGen {
        kind,
        n: a.n,
        input_len: a.input_len,
        jitter: a.jitter,
        seed: a.seed,
    })?;
    write_trace(&trace, &a.out)?;
    Ok(json!({ "out": a.out, "summary": trace.summary() }))
}

fn plan(a: PlanArgs) -> Result<Value> {
    let (model, hw) = a.specs.load()?;
    let weights = weight_reload_plan(&model, &hw, &a.from, &a.to)?;
    let route = kv_reshard_route(&model, &a.from, &a.to, a.kv_len, 0)?;
    Ok(json!({
        "weights": weights,
        "reload_time_s": reload_time(&model, &hw, &a.to),
        "kv_route_replica0": route,
    }))
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(e) = e.downcast_ref::<shardsim::Error>() {
        e.kind()
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io_error"
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::Analyze(a) => analyze(a),
        Cmd::Simulate(a) => run_simulate(a),
        Cmd::Optimize(a) => optimize(a),
        Cmd::Sweep(a) => sweep(a),
        Cmd::GenTrace(a) => gen(a),
        Cmd::Plan(a) => plan(a),
    };
    match out {
        Ok(v) => {
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(
                std::io::stdout().lock(),
                "{}",
                serde_json::to_string_pretty(&v).expect("json value prints")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            let doc = json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{doc}");
            ExitCode::from(1)
        }
    }
}
