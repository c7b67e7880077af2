use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the effective all-reduce bandwidth depends on the tensor-parallel degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllReduceModel {
    /// Ring all-reduce over links of `interconnect_bandwidth` bytes/s. Each
    /// rank moves `2 (tp - 1) / tp` of the buffer, so the effective bandwidth
    /// is `interconnect_bandwidth * tp / (2 (tp - 1))`.
    Ring { interconnect_bandwidth: f64 },
    /// Measured effective bandwidth (bytes/s) per tensor-parallel degree.
    Explicit(BTreeMap<u32, f64>),
}

/// Per-GPU capabilities of a homogeneous fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub num_gpus: u32,
    /// bytes/s
    pub hbm_bandwidth: f64,
    /// flop/s at the model datatype
    pub peak_flops: f64,
    /// bytes
    pub gpu_memory: u64,
    /// bytes of host KV storage contributed by each GPU
    pub host_memory_per_gpu: u64,
    /// bytes/s, per GPU, host <-> device
    pub host_link_bandwidth: f64,
    pub allreduce_model: AllReduceModel,
}

fn positive(name: &str, v: f64) -> Result<()> {
    // NaN fails this comparison as well.
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidHardware(format!("{name} must be positive, got {v}")))
    }
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_gpus == 0 {
            return Err(Error::InvalidHardware("num_gpus must be positive".into()));
        }
        positive("hbm_bandwidth", self.hbm_bandwidth)?;
        positive("peak_flops", self.peak_flops)?;
        positive("host_link_bandwidth", self.host_link_bandwidth)?;
        if self.gpu_memory == 0 {
            return Err(Error::InvalidHardware("gpu_memory must be positive".into()));
        }
        if self.host_memory_per_gpu == 0 {
            return Err(Error::InvalidHardware("host_memory_per_gpu must be positive".into()));
        }
        match &self.allreduce_model {
            AllReduceModel::Ring { interconnect_bandwidth } => {
                positive("interconnect_bandwidth", *interconnect_bandwidth)?
            }
            AllReduceModel::Explicit(map) => {
                let mut prev: Option<(u32, f64)> = None;
                for (&tp, &bw) in map {
                    if tp == 0 {
                        return Err(Error::InvalidHardware("all-reduce map keys must be positive".into()));
                    }
                    positive(&format!("all-reduce bandwidth at tp={tp}"), bw)?;
                    if let Some((ptp, pbw)) = prev {
                        if bw > pbw {
                            return Err(Error::InvalidHardware(format!(
                                "all-reduce bandwidth increases from tp={ptp} ({pbw}) to tp={tp} ({bw})"
                            )));
                        }
                    }
                    prev = Some((tp, bw));
                }
            }
        }
        Ok(())
    }

    /// Effective all-reduce bandwidth at `tp`. Infinite at `tp == 1`, where no
    /// collective runs.
    pub fn allreduce_bandwidth(&self, tp: u32) -> Result<f64> {
        if tp <= 1 {
            return Ok(f64::INFINITY);
        }
        match &self.allreduce_model {
            AllReduceModel::Ring { interconnect_bandwidth } => {
                Ok(interconnect_bandwidth * tp as f64 / (2.0 * (tp - 1) as f64))
            }
            AllReduceModel::Explicit(map) => map.get(&tp).copied().ok_or(Error::MissingAllReduceEntry(tp)),
        }
    }

    /// Bandwidth used for pipeline stage-to-stage activation transfers.
    pub fn p2p_bandwidth(&self) -> f64 {
        match &self.allreduce_model {
            AllReduceModel::Ring { interconnect_bandwidth } => *interconnect_bandwidth,
            AllReduceModel::Explicit(map) => map.values().next().copied().unwrap_or(self.host_link_bandwidth),
        }
    }

    /// Copy with every all-reduce bandwidth multiplied by `scale`. Host links
    /// are left untouched.
    pub fn with_allreduce_scale(&self, scale: f64) -> HardwareSpec {
        let mut hw = self.clone();
        hw.allreduce_model = match &self.allreduce_model {
            AllReduceModel::Ring { interconnect_bandwidth } => AllReduceModel::Ring {
                interconnect_bandwidth: interconnect_bandwidth * scale,
            },
            AllReduceModel::Explicit(map) => {
                AllReduceModel::Explicit(map.iter().map(|(&k, &v)| (k, v * scale)).collect())
            }
        };
        hw
    }

    pub fn with_num_gpus(&self, num_gpus: u32) -> HardwareSpec {
        HardwareSpec {
            num_gpus,
            ..self.clone()
        }
    }

    /// Total host KV capacity of the fleet.
    pub fn host_capacity(&self) -> u64 {
        self.host_memory_per_gpu * self.num_gpus as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw(model: AllReduceModel) -> HardwareSpec {
        HardwareSpec {
            num_gpus: 4,
            hbm_bandwidth: 1e12,
            peak_flops: 1e14,
            gpu_memory: 1 << 30,
            host_memory_per_gpu: 1 << 30,
            host_link_bandwidth: 1.6e10,
            allreduce_model: model,
        }
    }

    #[test]
    fn ring_bandwidth_is_non_increasing() {
        let h = hw(AllReduceModel::Ring {
            interconnect_bandwidth: 1.6e10,
        });
        assert_eq!(h.allreduce_bandwidth(2).unwrap(), 1.6e10);
        let mut prev = f64::INFINITY;
        for tp in 1..=64 {
            let bw = h.allreduce_bandwidth(tp).unwrap();
            assert!(bw <= prev);
            prev = bw;
        }
    }

    #[test]
    fn explicit_map_must_not_increase() {
        let h = hw(AllReduceModel::Explicit(BTreeMap::from([(2, 1e10), (4, 2e10)])));
        assert_eq!(h.validate().unwrap_err().kind(), "invalid_hardware");
        let h = hw(AllReduceModel::Explicit(BTreeMap::from([(2, 2e10), (4, 1e10)])));
        h.validate().unwrap();
        assert!(matches!(h.allreduce_bandwidth(8), Err(Error::MissingAllReduceEntry(8))));
    }

    #[test]
    fn scale_leaves_host_link_alone() {
        let h = hw(AllReduceModel::Ring {
            interconnect_bandwidth: 1e10,
        })
        .with_allreduce_scale(0.5);
        assert_eq!(h.allreduce_bandwidth(2).unwrap(), 5e9);
        assert_eq!(h.host_link_bandwidth, 1.6e10);
    }

    #[test]
    fn rejects_non_positive_rates() {
        let mut h = hw(AllReduceModel::Ring {
            interconnect_bandwidth: 1e10,
        });
        h.peak_flops = 0.0;
        assert!(h.validate().is_err());
        h.peak_flops = f64::NAN;
        assert!(h.validate().is_err());
    }

    #[test]
    fn explicit_map_round_trips_through_json() {
        let h = hw(AllReduceModel::Explicit(BTreeMap::from([(2, 2e10), (4, 1e10)])));
        let text = serde_json::to_string(&h).unwrap();
        let back: HardwareSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, h);
    }
}
