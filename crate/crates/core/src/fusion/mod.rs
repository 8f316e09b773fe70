//! Agreement-embedding fusion and stage-2 training of the combined model.

mod input;
mod model;
mod train;

pub use input::{align_chunk, encode_input, encode_segments, ChunkInput, EncodedInput, Segment};
pub use model::{
    sub_prefix, FusedForward, FusedInput, Fusion, FusionOptions, ScoreMode, Stage2Model, FUSION_LN, FUSION_SCORES,
    MAIN_PREFIX,
};
pub use train::{encode_corpus, mlm_eval_stage2, train_stage2, train_stage2_model, Stage2Config, Stage2Outcome};
