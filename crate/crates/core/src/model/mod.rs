//! The path-locked decoder: shared attention backbone, per-layer expert
//! pairs, route-locked forward pass and generation.

mod checkpoint;
mod forward;
mod generate;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, checkpoint_from_bytes, checkpoint_to_bytes, FORMAT_VERSION, MAGIC};
pub use forward::{
    forward, forward_audited, forward_token_routed, last_layer_split, mlp_expert, route_logit_gap,
    ExpertAudit, ExpertCall, LastLayerSplit,
};
pub(crate) use forward::{build_forward, Routing};
pub use generate::{generate, GenerateOptions, Generation, Generator, Sampler};
pub use params::{Architecture, Block, ExpertMlp, ModelParams};
pub(crate) use params::{flat_of, Layout};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Backbone hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PleConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub rope_base: f64,
}

impl PleConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config("rotary embedding needs an even head dimension".into()));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::Config("rope_base must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameters in one expert: gate, up and down projections.
    pub fn expert_size(&self) -> usize {
        3 * self.d_model * self.d_ff
    }

    /// A 2-layer, width-16 configuration used across tests and examples.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 64,
            rope_base: 10_000.0,
        }
    }
}
