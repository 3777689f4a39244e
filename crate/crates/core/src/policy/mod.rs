//! Differentiable building blocks and the recurrent actor-critic.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{build_variant, CrossAttention, GruCell, Linear, PathEncoder, PathEncoderDims, PathEncoderKind, SelfAttention};
pub use network::{
    gaussian_entropy, gaussian_log_prob, ActOutput, ForwardVars, IoSpec, ObsBatch, Observation, PathConditioning,
    PolicyConfig, PolicyNetwork, ACTION_DIM, PRIVILEGED_FEATURES,
};
pub use params::{Adam, AdamConfig, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Graph, Var};
pub use tensor::Tensor;
