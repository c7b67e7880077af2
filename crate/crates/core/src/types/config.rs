use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{HardwareSpec, ModelSpec};
use crate::error::{Error, Result};

/// Degrees of tensor, pipeline and data parallelism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelismConfig {
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
}

impl ParallelismConfig {
    pub const fn new(tp: u32, pp: u32, dp: u32) -> Self {
        ParallelismConfig { tp, pp, dp }
    }

    pub fn num_gpus(&self) -> u32 {
        self.tp * self.pp * self.dp
    }

    /// GPUs in one data-parallel replica.
    pub fn gpus_per_replica(&self) -> u32 {
        self.tp * self.pp
    }
}

impl fmt::Display for ParallelismConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tp{}.pp{}.dp{}", self.tp, self.pp, self.dp)
    }
}

impl FromStr for ParallelismConfig {
    type Err = Error;

    /// Parses `tpX.ppY.dpZ`; omitted components default to 1.
    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = ParallelismConfig::new(1, 1, 1);
        for part in s.split('.').filter(|p| !p.is_empty()) {
            let (slot, digits) = if let Some(d) = part.strip_prefix("tp") {
                (&mut cfg.tp, d)
            } else if let Some(d) = part.strip_prefix("pp") {
                (&mut cfg.pp, d)
            } else if let Some(d) = part.strip_prefix("dp") {
                (&mut cfg.dp, d)
            } else {
                return Err(Error::InvalidArgument(format!(
                    "bad parallelism component {part:?} in {s:?} (expected tpX.ppY.dpZ)"
                )));
            };
            *slot = digits
                .parse()
                .ok()
                .filter(|&v: &u32| v > 0)
                .ok_or_else(|| Error::InvalidArgument(format!("bad degree in {part:?}")))?;
        }
        Ok(cfg)
    }
}

/// The first constraint a config violates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    ZeroDegree,
    FleetMismatch { gpus_used: u32, num_gpus: u32 },
    KvHeadsNotDivisible { tp: u32, num_kv_heads: u32 },
    LayersNotDivisible { pp: u32, num_layers: u32 },
    WeightsDoNotFit { weight_bytes: u64, replica_memory: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDegree => write!(f, "parallel degrees must be positive"),
            Violation::FleetMismatch { gpus_used, num_gpus } => {
                write!(f, "fleet mismatch: config uses {gpus_used} GPUs, fleet has {num_gpus}")
            }
            Violation::KvHeadsNotDivisible { tp, num_kv_heads } => {
                write!(f, "tp={tp} does not divide num_kv_heads={num_kv_heads}")
            }
            Violation::LayersNotDivisible { pp, num_layers } => {
                write!(f, "pp={pp} does not divide num_layers={num_layers}")
            }
            Violation::WeightsDoNotFit {
                weight_bytes,
                replica_memory,
            } => write!(
                f,
                "weights ({weight_bytes} B) exceed one replica's memory ({replica_memory} B)"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Feasible,
    Infeasible(Violation),
}

impl Verdict {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Verdict::Feasible)
    }

    pub fn into_result(self) -> Result<()> {
        match self {
            Verdict::Feasible => Ok(()),
            Verdict::Infeasible(v) => Err(Error::Infeasible(v)),
        }
    }
}

/// Divisibility constraints only; independent of the fleet.
pub(crate) fn check_divisibility(model: &ModelSpec, cfg: &ParallelismConfig) -> Result<()> {
    if cfg.tp == 0 || cfg.pp == 0 || cfg.dp == 0 {
        return Err(Error::Infeasible(Violation::ZeroDegree));
    }
    if !model.num_kv_heads.is_multiple_of(cfg.tp) {
        return Err(Error::Infeasible(Violation::KvHeadsNotDivisible {
            tp: cfg.tp,
            num_kv_heads: model.num_kv_heads,
        }));
    }
    if !model.num_layers.is_multiple_of(cfg.pp) {
        return Err(Error::Infeasible(Violation::LayersNotDivisible {
            pp: cfg.pp,
            num_layers: model.num_layers,
        }));
    }
    Ok(())
}

/// Checks that `cfg` uses the whole fleet, shards evenly, and that one
/// replica's combined memory holds the model weights.
pub fn validate_config(model: &ModelSpec, hw: &HardwareSpec, cfg: &ParallelismConfig) -> Verdict {
    if cfg.tp == 0 || cfg.pp == 0 || cfg.dp == 0 {
        return Verdict::Infeasible(Violation::ZeroDegree);
    }
    if cfg.num_gpus() != hw.num_gpus {
        return Verdict::Infeasible(Violation::FleetMismatch {
            gpus_used: cfg.num_gpus(),
            num_gpus: hw.num_gpus,
        });
    }
    if let Err(Error::Infeasible(v)) = check_divisibility(model, cfg) {
        return Verdict::Infeasible(v);
    }
    let replica_memory = hw.gpu_memory as u128 * cfg.gpus_per_replica() as u128;
    let weights = model.total_weight_bytes();
    if replica_memory < weights as u128 {
        return Verdict::Infeasible(Violation::WeightsDoNotFit {
            weight_bytes: weights,
            replica_memory: replica_memory.min(u64::MAX as u128) as u64,
        });
    }
    Verdict::Feasible
}
