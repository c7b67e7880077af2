use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_bytes_per_param() -> u32 {
    2
}

fn default_allreduces_per_layer() -> u32 {
    1
}

/// Transformer architecture constants that parameterize every cost formula.
///
/// Only decoder-layer quantities are modelled; embeddings and the LM head are
/// folded into `params_per_layer` by callers that care about them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: u32,
    /// Scalar parameter count of one decoder layer.
    pub params_per_layer: u64,
    #[serde(default = "default_bytes_per_param")]
    pub bytes_per_param: u32,
    pub num_query_heads: u32,
    pub num_kv_heads: u32,
    pub head_dim: u32,
    /// Bytes all-reduced per token per layer. `None` means one hidden-state
    /// vector, `bytes_per_param * num_query_heads * head_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_bytes_per_token: Option<u64>,
    #[serde(default = "default_allreduces_per_layer")]
    pub allreduces_per_layer: u32,
}

impl ModelSpec {
    /// Builds a model with fp16 weights, default activation size and a single
    /// all-reduce per layer.
    pub fn new(
        num_layers: u32,
        params_per_layer: u64,
        num_query_heads: u32,
        num_kv_heads: u32,
        head_dim: u32,
    ) -> Result<Self> {
        let model = ModelSpec {
            num_layers,
            params_per_layer,
            bytes_per_param: default_bytes_per_param(),
            num_query_heads,
            num_kv_heads,
            head_dim,
            activation_bytes_per_token: None,
            allreduces_per_layer: default_allreduces_per_layer(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers as u64),
            ("params_per_layer", self.params_per_layer),
            ("bytes_per_param", self.bytes_per_param as u64),
            ("num_query_heads", self.num_query_heads as u64),
            ("num_kv_heads", self.num_kv_heads as u64),
            ("head_dim", self.head_dim as u64),
            ("allreduces_per_layer", self.allreduces_per_layer as u64),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(Error::InvalidModel(format!("{name} must be positive")));
            }
        }
        if self.activation_bytes_per_token == Some(0) {
            return Err(Error::InvalidModel(
                "activation_bytes_per_token must be positive".into(),
            ));
        }
        if !self.num_query_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::InvalidModel(format!(
                "num_query_heads ({}) is not a multiple of num_kv_heads ({})",
                self.num_query_heads, self.num_kv_heads
            )));
        }
        Ok(())
    }

    pub fn activation_bytes(&self) -> u64 {
        self.activation_bytes_per_token
            .unwrap_or(self.bytes_per_param as u64 * self.num_query_heads as u64 * self.head_dim as u64)
    }

    pub fn layer_weight_bytes(&self) -> u64 {
        self.bytes_per_param as u64 * self.params_per_layer
    }

    /// Weight bytes of the whole model (all decoder layers).
    pub fn total_weight_bytes(&self) -> u64 {
        self.layer_weight_bytes() * self.num_layers as u64
    }

    /// K and V bytes for one token, one layer, one KV head.
    pub(crate) fn kv_bytes_per_token_head_layer(&self) -> u64 {
        2 * self.bytes_per_param as u64 * self.head_dim as u64
    }
}
