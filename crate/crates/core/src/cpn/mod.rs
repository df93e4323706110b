//! The causal-enhanced prediction network.
//!
//! Data flow for one window:
//!
//! ```text
//! x ──GRU──▶ h ──+PE──▶ z ─┐
//! neighbours ──GRU──▶ detach ──graph attention (prior ln w)──▶ g
//!                           └─ fusion attention over [z; g] ──▶ z_st
//! E ──MLP──▶ c̃ ;  LN(z_st + c̃) ──causal attention × L (β·m bias)──▶ z̃_T
//! z̃_T ──▶ y_base ,  a_causal ;   y_hat = y_base + σ(g_raw)·a_causal
//! ```
//!
//! All values inside the network are on the normalized speed scale.

mod checkpoint;
mod forward;
mod layers;
mod state;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    base_counterfactual, decode, encode, encode_neighbors, encode_with_states, forward, graph_prior_attention, predict, spatiotemporal_fuse, Decoded, Forward,
    Prediction,
};
pub use layers::{gru_encode, gru_step, positional_encoding, Bound};
pub use state::{is_causal_param, ModelState, ParamInfo, GATE_INIT, GATE_PHASE3};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::D_T;
use crate::features::D_C;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum CpnError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("batch does not fit the model: {0}")]
    Batch(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub top_k: usize,
    pub input_dim: usize,
    pub causal_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lookback: 15,
            horizon: 3,
            hidden: 64,
            layers: 2,
            heads: 4,
            top_k: 5,
            input_dim: D_T,
            causal_dim: D_C,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CpnError> {
        let bad = |m: &str| Err(CpnError::Config(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden must be a positive multiple of heads");
        }
        if !self.hidden.is_multiple_of(2) {
            return bad("hidden must be even for the positional encoding");
        }
        if self.horizon == 0 || self.lookback < self.horizon {
            return bad("need lookback >= horizon >= 1");
        }
        if self.layers == 0 || self.input_dim == 0 || self.causal_dim == 0 {
            return bad("layers, input_dim and causal_dim must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}
