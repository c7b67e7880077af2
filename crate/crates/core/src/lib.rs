//! Analytical cost model, re-shard planner, discrete-event simulator and
//! strategy optimizer for throughput-oriented multi-GPU LLM inference.
//!
//! The crate is organized bottom-up:
//!
//! * [`types`]: model/hardware/parallelism descriptions and KV capacity math.
//! * [`perf`]: per-layer roofline/additive runtime model.
//! * [`reshard`]: shard maps, weight reload plans and KV routing.
//! * [`sim`]: the event-driven simulator and its log replayer.
//! * [`optimizer`]: static and mixed (prefill/decode) strategy search.
//! * [`workload`]: trace parsing and synthesis.
//!
//! With the default `parallel` feature, independent evaluations (optimizer
//! candidates, sweep rows, simulation replicas) run on the rayon pool; the
//! results are identical to the sequential path.

pub mod error;
pub mod exec;
pub mod fixtures;
pub mod optimizer;
pub mod perf;
pub mod reshard;
pub mod sim;
pub mod types;
pub mod workload;

pub use error::{Error, Result};
pub use exec::Exec;
pub use perf::{CostBreakdown, CostMode, Phase};
pub use types::{
    kv_bytes_per_token, max_batch_size, validate_config, AllReduceModel, HardwareSpec, KvLayout, ModelSpec,
    ParallelismConfig, Request, Verdict, Violation,
};
