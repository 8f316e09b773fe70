//! Dependency-agreement chunking and two-stage MLM pretraining at desk scale.
//!
//! Parsed sentences are split into four kinds of dependency-agreement chunks
//! (subject/verb, verb/direct object, preposition/object, complements). A
//! small encoder is pretrained on each chunk kind; their outputs are then
//! scattered back onto sentence positions, layer-normalized and added to the
//! input embeddings of a main encoder trained with masked language modeling.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the storage type used by the command-line tool.

pub mod chunker;
pub mod conllu;
pub mod error;
pub mod fusion;
pub mod interpret;
pub mod nn;
pub mod pretrain;
pub mod rng;
mod scalar;
pub mod synth;
pub mod tokenizer;

pub use chunker::{AgreementChunk, AgreementType, ChunkDataset, SpanMode};
pub use conllu::{ChildMap, ParsedSentence, ParsedToken};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tokenizer::{TokenIdSequence, Vocabulary};

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Stage2Model32 = fusion::Stage2Model<f32>;
pub type Stage2Model64 = fusion::Stage2Model<f64>;
pub type SubmodelCheckpoint32 = pretrain::SubmodelCheckpoint<f32>;
pub type SubmodelCheckpoint64 = pretrain::SubmodelCheckpoint<f64>;
pub type Classifier32 = interpret::Classifier<f32>;
pub type Classifier64 = interpret::Classifier<f64>;
