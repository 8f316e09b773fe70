use serde::{Deserialize, Serialize};

use super::input::{EncodedInput, Segment};
use super::model::{FusionOptions, Stage2Model};
use crate::conllu::ParsedSentence;
use crate::error::{Error, Result};
use crate::nn::{AdamWConfig, Bound, Graph, MaskedLoss, ModelShape};
use crate::pretrain::{
    mask_tokens, mlm_item_output, run_mlm_loop, ItemOutput, LoopConfig, MaskedSequence, MlmTask, SubmodelCheckpoint,
    TraceRow, TrainingMeta, DEFAULT_MASK_RATE,
};
use crate::rng::{stream, Rng};
use crate::tokenizer::Vocabulary;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub micro_batch: usize,
    pub accumulation_target: usize,
    pub peak_lr: f64,
    pub peak_fraction: f64,
    pub total_steps: usize,
    pub mask_rate: f64,
    pub seed: u64,
    pub threads: usize,
    pub main: ModelShape,
    pub max_seq_len: usize,
    /// `false` removes the fusion path entirely.
    pub use_fusion: bool,
    pub fusion: FusionOptions,
    pub optimizer: AdamWConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            micro_batch: 128,
            accumulation_target: 4096,
            peak_lr: 25e-5,
            peak_fraction: 0.5,
            total_steps: 1000,
            mask_rate: DEFAULT_MASK_RATE,
            seed: 0,
            threads: 1,
            main: ModelShape {
                layers: 14,
                ..ModelShape::default()
            },
            max_seq_len: 128,
            use_fusion: true,
            fusion: FusionOptions::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Invalid(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Invalid(format!("max_seq_len {} below 3", self.max_seq_len)));
        }
        self.loop_config().validate()
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            micro_batch: self.micro_batch,
            accumulation_target: self.accumulation_target,
            total_steps: self.total_steps,
            peak_lr: self.peak_lr,
            peak_fraction: self.peak_fraction,
            seed: self.seed,
            threads: self.threads,
            optimizer: self.optimizer,
        }
    }

    /// Builds the untrained model this configuration describes.
    pub fn build<T: Scalar>(&self, vocab: &Vocabulary, submodels: &[SubmodelCheckpoint<T>]) -> Result<Stage2Model<T>> {
        self.validate()?;
        let main_cfg = self.main.to_config(vocab.len(), self.max_seq_len);
        let fusion = self.use_fusion.then(|| (submodels, self.fusion.clone()));
        Stage2Model::new(&main_cfg, fusion, self.seed)
    }
}

pub struct Stage2Outcome<T> {
    pub model: Stage2Model<T>,
    pub trace: Vec<TraceRow>,
    pub meta: TrainingMeta,
}

struct SentenceTask<'a, T> {
    model: &'a Stage2Model<T>,
    inputs: Vec<EncodedInput>,
    vocab_size: usize,
    mask_rate: f64,
}

/// Chunk ids with every piece aligned to a corrupted main position replaced
/// by the corrupted id.
fn masked_chunk_ids(input: &EncodedInput, masked: &MaskedSequence) -> Vec<Vec<usize>> {
    input
        .chunks
        .iter()
        .map(|ch| {
            ch.ids
                .iter()
                .zip(&ch.targets)
                .map(|(&id, t)| match t {
                    Some(q) if masked.labels[*q].is_some() => masked.ids[*q],
                    _ => id,
                })
                .collect()
        })
        .collect()
}

impl<T: Scalar> MlmTask<T> for SentenceTask<'_, T> {
    type Item = (usize, MaskedSequence, Option<Vec<Vec<usize>>>);

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn prepare(&self, index: usize, mask_rng: &mut Rng) -> Result<Option<Self::Item>> {
        let input = &self.inputs[index];
        if input.len() <= 2 {
            return Ok(None);
        }
        let masked = mask_tokens(&input.tokens.ids, self.vocab_size, self.mask_rate, true, mask_rng)?;
        let chunk_ids = self
            .model
            .fusion()
            .filter(|f| f.options.mask_chunk_inputs)
            .map(|_| masked_chunk_ids(input, &masked));
        Ok(Some((index, masked, chunk_ids)))
    }

    fn forward(&self, g: &mut Graph<T>, bound: &Bound, item: &Self::Item, dropout: &mut Rng) -> Result<ItemOutput> {
        let (index, masked, chunk_ids) = item;
        let out = self.model.forward(
            g,
            bound,
            &self.inputs[*index],
            &masked.ids,
            chunk_ids.as_deref(),
            Some(dropout),
        )?;
        let logits = self.model.mlm_logits(g, bound, out.hidden);
        Ok(mlm_item_output(g, logits, &masked.labels))
    }
}

/// Tokenizes and chunks a corpus for `model`.
pub fn encode_corpus<T: Scalar>(
    model: &Stage2Model<T>,
    corpus: &[ParsedSentence],
    vocab: &Vocabulary,
) -> Result<Vec<EncodedInput>> {
    let mode = model.fusion().map(|f| f.options.span_mode).unwrap_or_default();
    corpus
        .iter()
        .map(|s| model.encode(vocab, &[Segment::from_sentence(s, mode)]))
        .collect()
}

/// MLM training of an already built model on a parsed corpus.
pub fn train_stage2_model<T: Scalar>(
    mut model: Stage2Model<T>,
    corpus: &[ParsedSentence],
    vocab: &Vocabulary,
    cfg: &Stage2Config,
) -> Result<Stage2Outcome<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("stage-2 corpus is empty".into()));
    }
    let inputs = encode_corpus(&model, corpus, vocab)?;
    let mut store = model.store.clone();
    let outcome = {
        let task = SentenceTask {
            model: &model,
            inputs,
            vocab_size: vocab.len(),
            mask_rate: cfg.mask_rate,
        };
        run_mlm_loop(&mut store, &task, &cfg.loop_config())?
    };
    model.store = store;
    let meta = TrainingMeta::from_trace(
        &outcome.trace,
        outcome.skipped_items,
        outcome.skipped_steps,
        outcome.fault,
    );
    Ok(Stage2Outcome {
        model,
        trace: outcome.trace,
        meta,
    })
}

/// Builds the model from `cfg` and trains it. Fusion needs one submodel
/// per agreement.
pub fn train_stage2<T: Scalar>(
    corpus: &[ParsedSentence],
    submodels: &[SubmodelCheckpoint<T>],
    vocab: &Vocabulary,
    cfg: &Stage2Config,
) -> Result<Stage2Outcome<T>> {
    let model = cfg.build(vocab, submodels)?;
    train_stage2_model(model, corpus, vocab, cfg)
}

/// Masked-token accuracy and mean loss over a corpus with seeded masking.
pub fn mlm_eval_stage2<T: Scalar>(
    model: &Stage2Model<T>,
    corpus: &[ParsedSentence],
    vocab: &Vocabulary,
    mask_seed: u64,
) -> Result<MaskedLoss> {
    let inputs = encode_corpus(model, corpus, vocab)?;
    let mut rng = stream(mask_seed, "eval/mask");
    let (mut total, mut correct, mut count) = (0.0, 0, 0);
    for input in &inputs {
        if input.len() <= 2 {
            continue;
        }
        let masked = mask_tokens(&input.tokens.ids, vocab.len(), DEFAULT_MASK_RATE, true, &mut rng)?;
        let chunk_ids = model
            .fusion()
            .filter(|f| f.options.mask_chunk_inputs)
            .map(|_| masked_chunk_ids(input, &masked));
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        let out = model.forward(&mut g, &bound, input, &masked.ids, chunk_ids.as_deref(), None)?;
        let logits = model.mlm_logits(&mut g, &bound, out.hidden);
        g.check_finite(0)?;
        let item = mlm_item_output(&mut g, logits, &masked.labels);
        total += g.value(item.loss).data()[0].as_f64();
        correct += item.correct;
        count += item.count;
    }
    if count == 0 {
        return Err(Error::Invalid("no maskable token in evaluation corpus".into()));
    }
    Ok(MaskedLoss {
        loss: total / count as f64,
        correct,
        count,
    })
}
