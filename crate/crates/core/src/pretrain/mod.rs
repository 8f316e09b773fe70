//! Masked-language-model pretraining of the agreement submodels.

mod masking;
mod schedule;
mod stage1;
mod trainer;

pub use masking::{mask_tokens, MaskedSequence};
pub use schedule::{cosine_lr, triangular_lr};
pub use stage1::{
    encode_chunk, mlm_eval, train_stage1, MaxLengths, Stage1Config, Stage1Outcome, SubmodelCheckpoint, TrainingMeta,
    DEFAULT_MASK_RATE,
};
pub use trainer::{
    mlm_item_output, run_mlm_loop, write_trace, ItemOutput, LoopConfig, LoopOutcome, MlmTask, NumericFault, TraceRow,
};
