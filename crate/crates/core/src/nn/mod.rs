//! Minimal transformer-encoder stack with reverse-mode gradients.

mod checkpoint;
mod encoder;
mod graph;
mod loss;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, MAGIC, VERSION};
pub(crate) use encoder::{bind_norm, init_norm};
pub use encoder::{
    encoder_forward, mlm_logits, sinusoidal_positions, Encoder, EncoderOutput, ModelConfig, ModelShape, NormIds,
};
pub use graph::{Gradients, Graph, Var};
pub use loss::{argmax, masked_cross_entropy, MaskedLoss};
pub use optim::{adamw_step, AdamW, AdamWConfig, Moments};
pub use params::{check_bias_free, Bound, ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
