//! Networks: conditional velocity fields with LoRA adapters, cross-attention
//! class conditioning, and small source/victim classifiers.
//!
//! Model structs are descriptors (names + dimensions); values live in a
//! [`ParamStore`](crate::tensor::ParamStore) so freezing, checkpointing and
//! optimizer updates stay uniform.

mod classifier;
mod embedding;
mod linear;
mod velocity;

pub use classifier::{Classifier, ClassifierArch, ClassifierCfg};
pub use embedding::{BatchCond, ClassEmbeddingTable};
pub use linear::{cross_attention_single, LinearLayer, LoRAAdapter};
pub use velocity::{VelocityModel, VelocityModelCfg};

use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Var};

/// Activation kind. Velocity fields must stay smooth; classifiers may use relu.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Tanh,
    Silu,
    Relu,
}

impl Act {
    pub fn apply(self, tape: &mut Tape, v: Var) -> Result<Var> {
        match self {
            Act::Tanh => tape.tanh(v),
            Act::Silu => tape.silu(v),
            Act::Relu => tape.relu(v),
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Act::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Act::Tanh => "tanh",
            Act::Silu => "silu",
            Act::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Act::Tanh),
            "silu" => Ok(Act::Silu),
            "relu" => Ok(Act::Relu),
            other => Err(CoreError::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}
