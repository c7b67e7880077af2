//! Domain types shared by the cost model, planner, simulator and optimizer.

mod capacity;
mod config;
mod hardware;
mod model;

use serde::{Deserialize, Serialize};

pub use capacity::{kv_bytes_per_token, max_batch_size, KvBudget};
pub(crate) use config::check_divisibility;
pub use config::{validate_config, ParallelismConfig, Verdict, Violation};
pub use hardware::{AllReduceModel, HardwareSpec};
pub use model::ModelSpec;

/// One offline generation request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub input_len: u32,
    pub output_len: u32,
}

impl Request {
    pub fn new(id: u64, input_len: u32, output_len: u32) -> Self {
        Request {
            id,
            input_len,
            output_len,
        }
    }

    pub fn total_len(&self) -> u64 {
        self.input_len as u64 + self.output_len as u64
    }
}

/// Axis order of a stored KV tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum KvLayout {
    /// (seq_len, heads, head_dim)
    Nhd,
    /// (heads, seq_len, head_dim)
    #[default]
    Hnd,
}
