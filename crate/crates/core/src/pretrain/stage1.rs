use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::masking::{mask_tokens, MaskedSequence};
use super::trainer::{mlm_item_output, run_mlm_loop, ItemOutput, LoopConfig, MlmTask, NumericFault, TraceRow};
use crate::chunker::{AgreementType, ChunkDataset};
use crate::error::{Error, Result};
use crate::nn::{
    read_checkpoint, write_checkpoint, AdamWConfig, Bound, Encoder, Graph, MaskedLoss, ModelConfig, ModelShape,
    ParamStore,
};
use crate::rng::{stream, Rng};
use crate::tokenizer::{TokenIdSequence, Vocabulary};
use crate::Scalar;

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Input length limit per agreement, counted in subword pieces including
/// `[CLS]` and `[SEP]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaxLengths {
    pub sv: usize,
    pub dobj: usize,
    pub pobj: usize,
    pub comp: usize,
}

impl Default for MaxLengths {
    fn default() -> Self {
        MaxLengths {
            sv: 19,
            dobj: 21,
            pobj: 10,
            comp: 23,
        }
    }
}

impl MaxLengths {
    pub fn get(&self, a: AgreementType) -> usize {
        match a {
            AgreementType::Sv => self.sv,
            AgreementType::Dobj => self.dobj,
            AgreementType::Pobj => self.pobj,
            AgreementType::Comp => self.comp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub max_input_length: MaxLengths,
    pub micro_batch: usize,
    pub accumulation_target: usize,
    pub peak_lr: f64,
    pub peak_fraction: f64,
    pub total_steps: usize,
    pub mask_rate: f64,
    pub seed: u64,
    pub threads: usize,
    pub model: ModelShape,
    pub optimizer: AdamWConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            max_input_length: MaxLengths::default(),
            micro_batch: 128,
            accumulation_target: 4096,
            peak_lr: 25e-5,
            peak_fraction: 0.5,
            total_steps: 1000,
            mask_rate: DEFAULT_MASK_RATE,
            seed: 0,
            threads: 1,
            model: ModelShape::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        for a in AgreementType::ALL {
            if self.max_input_length.get(a) < 2 {
                return Err(Error::Invalid(format!("max input length for {a} must be at least 2")));
            }
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Invalid(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
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
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub steps: usize,
    pub skipped_items: usize,
    pub skipped_steps: usize,
    pub final_mlm_accuracy: Option<f64>,
    pub final_mlm_loss: Option<f64>,
    #[serde(default)]
    pub fault: Option<NumericFault>,
}

impl TrainingMeta {
    pub(crate) fn from_trace(
        trace: &[TraceRow],
        skipped_items: usize,
        skipped_steps: usize,
        fault: Option<NumericFault>,
    ) -> Self {
        let last = trace.last();
        TrainingMeta {
            steps: trace.len(),
            skipped_items,
            skipped_steps,
            final_mlm_accuracy: last.map(|r| r.acc),
            final_mlm_loss: last.map(|r| r.loss),
            fault,
        }
    }
}

/// A trained agreement submodel. Its parameters are stored without prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct SubmodelCheckpoint<T> {
    pub agreement: AgreementType,
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub meta: TrainingMeta,
}

const SUBMODEL_KIND: &str = "submodel";

impl<T: Scalar> SubmodelCheckpoint<T> {
    /// Untrained submodel with weights drawn from `seed`.
    pub fn fresh(agreement: AgreementType, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = stream(seed, &format!("init/submodel/{agreement}"));
        Encoder::init(&mut store, "", &config, &mut init)?;
        Ok(SubmodelCheckpoint {
            agreement,
            config,
            store,
            meta: TrainingMeta::from_trace(&[], 0, 0, None),
        })
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::bind(&self.store, "", &self.config)
    }

    /// Longest accepted input, in pieces.
    pub fn max_len(&self) -> usize {
        self.config.max_seq_len
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": SUBMODEL_KIND,
            "agreement": self.agreement,
            "config": self.config,
            "training": self.meta,
        });
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(BufWriter::new(f), &meta, &self.store).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let (meta, store) = read_checkpoint::<T, _>(BufReader::new(f))?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(SUBMODEL_KIND) {
            return Err(Error::Format(format!(
                "{} is not a submodel checkpoint",
                path.display()
            )));
        }
        let agreement = serde_json::from_value(meta["agreement"].clone())?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let meta: TrainingMeta = serde_json::from_value(meta["training"].clone())?;
        let ckpt = SubmodelCheckpoint {
            agreement,
            config,
            store,
            meta,
        };
        ckpt.encoder()?;
        Ok(ckpt)
    }
}

pub struct Stage1Outcome<T> {
    pub checkpoint: SubmodelCheckpoint<T>,
    pub trace: Vec<TraceRow>,
}

/// Chunks of one agreement, tokenized for a submodel.
struct ChunkTask<'a> {
    encoder: &'a Encoder,
    inputs: Vec<TokenIdSequence>,
    vocab_size: usize,
    mask_rate: f64,
}

impl<T: Scalar> MlmTask<T> for ChunkTask<'_> {
    type Item = MaskedSequence;

    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn prepare(&self, index: usize, mask_rng: &mut Rng) -> Result<Option<MaskedSequence>> {
        let ids = &self.inputs[index].ids;
        if ids.len() <= 2 {
            return Ok(None);
        }
        mask_tokens(ids, self.vocab_size, self.mask_rate, true, mask_rng).map(Some)
    }

    fn forward(&self, g: &mut Graph<T>, bound: &Bound, item: &MaskedSequence, dropout: &mut Rng) -> Result<ItemOutput> {
        let out = self.encoder.forward(g, bound, &item.ids, None, None, Some(dropout))?;
        let logits = self.encoder.mlm_logits(g, bound, out.hidden);
        Ok(mlm_item_output(g, logits, &item.labels))
    }
}

/// Encodes a chunk's words with `[CLS]`/`[SEP]` under the agreement limit.
pub fn encode_chunk(vocab: &Vocabulary, text: &str, max_len: usize) -> TokenIdSequence {
    vocab.encode(text, max_len, true)
}

/// Trains one agreement submodel on its chunk dataset.
pub fn train_stage1<T: Scalar>(
    dataset: &ChunkDataset,
    vocab: &Vocabulary,
    cfg: &Stage1Config,
) -> Result<Stage1Outcome<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid(format!("{} chunk dataset is empty", dataset.agreement)));
    }
    let agreement = dataset.agreement;
    let max_len = cfg.max_input_length.get(agreement);
    let config = cfg.model.to_config(vocab.len(), max_len);
    config.validate()?;
    let SubmodelCheckpoint { mut store, .. } = SubmodelCheckpoint::<T>::fresh(agreement, config.clone(), cfg.seed)?;
    let encoder = Encoder::bind(&store, "", &config)?;
    let task = ChunkTask {
        encoder: &encoder,
        inputs: dataset
            .chunks()
            .iter()
            .map(|c| encode_chunk(vocab, &c.text, max_len))
            .collect(),
        vocab_size: vocab.len(),
        mask_rate: cfg.mask_rate,
    };
    let outcome = run_mlm_loop(&mut store, &task, &cfg.loop_config())?;
    let meta = TrainingMeta::from_trace(
        &outcome.trace,
        outcome.skipped_items,
        outcome.skipped_steps,
        outcome.fault,
    );
    Ok(Stage1Outcome {
        checkpoint: SubmodelCheckpoint {
            agreement,
            config,
            store,
            meta,
        },
        trace: outcome.trace,
    })
}

/// Masked-token accuracy and mean loss of a submodel over a chunk dataset,
/// with masking drawn from a fixed seed.
pub fn mlm_eval<T: Scalar>(
    checkpoint: &SubmodelCheckpoint<T>,
    dataset: &ChunkDataset,
    vocab: &Vocabulary,
    mask_seed: u64,
) -> Result<MaskedLoss> {
    let encoder = checkpoint.encoder()?;
    let mut rng = stream(mask_seed, "eval/mask");
    let (mut total, mut correct, mut count) = (0.0, 0, 0);
    for chunk in dataset.chunks() {
        let input = encode_chunk(vocab, &chunk.text, checkpoint.max_len());
        if input.ids.len() <= 2 {
            continue;
        }
        let masked = mask_tokens(&input.ids, vocab.len(), DEFAULT_MASK_RATE, true, &mut rng)?;
        let mut g = Graph::new();
        let bound = checkpoint.store.bind(&mut g);
        let out = encoder.forward(&mut g, &bound, &masked.ids, None, None, None)?;
        let logits = encoder.mlm_logits(&mut g, &bound, out.hidden);
        g.check_finite(0)?;
        let item = mlm_item_output(&mut g, logits, &masked.labels);
        total += g.value(item.loss).data()[0].as_f64();
        correct += item.correct;
        count += item.count;
    }
    if count == 0 {
        return Err(Error::Invalid("no maskable token in evaluation set".into()));
    }
    Ok(MaskedLoss {
        loss: total / count as f64,
        correct,
        count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::chunk_toy_dataset;

    fn toy_cfg(steps: usize) -> Stage1Config {
        Stage1Config {
            micro_batch: 8,
            accumulation_target: 16,
            peak_lr: 5e-3,
            total_steps: steps,
            seed: 3,
            model: ModelShape::new(2, 32, 2),
            ..Stage1Config::default()
        }
    }

    fn vocab_for(d: &ChunkDataset) -> Vocabulary {
        Vocabulary::build(d.chunks().iter().map(|c| c.text.as_str()), 400).unwrap()
    }

    #[test]
    fn defaults_follow_reference_settings() {
        let c = Stage1Config::default();
        assert_eq!(
            c.max_input_length,
            MaxLengths {
                sv: 19,
                dobj: 21,
                pobj: 10,
                comp: 23
            }
        );
        assert_eq!((c.micro_batch, c.accumulation_target), (128, 4096));
        assert_eq!(c.peak_lr, 25e-5);
        assert_eq!(c.model.layers, 2);
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = toy_cfg(1);
        c.accumulation_target = 12;
        assert!(c.validate().is_err());
        let mut c = toy_cfg(1);
        c.mask_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = toy_cfg(1);
        c.max_input_length.pobj = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_is_seeded_and_logs_schedule() {
        let d = chunk_toy_dataset(AgreementType::Pobj, 16, 0);
        let v = vocab_for(&d);
        let a = train_stage1::<f32>(&d, &v, &toy_cfg(6)).unwrap();
        let b = train_stage1::<f32>(&d, &v, &toy_cfg(6)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint.store, b.checkpoint.store);
        for r in &a.trace {
            assert_eq!(r.lr, crate::pretrain::triangular_lr(r.step, 6, 5e-3, 0.5));
        }
        assert_eq!(a.checkpoint.meta.steps, 6);
    }

    #[test]
    fn empty_dataset_rejected() {
        let d = ChunkDataset::new(AgreementType::Sv);
        let v = Vocabulary::with_words(&["a"]).unwrap();
        assert!(train_stage1::<f32>(&d, &v, &toy_cfg(1)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = chunk_toy_dataset(AgreementType::Sv, 8, 0);
        let v = vocab_for(&d);
        let out = train_stage1::<f64>(&d, &v, &toy_cfg(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sv.ckpt");
        out.checkpoint.save(&path).unwrap();
        let back = SubmodelCheckpoint::<f64>::load(&path).unwrap();
        assert_eq!(back, out.checkpoint);
        let e1 = mlm_eval(&out.checkpoint, &d, &v, 1).unwrap();
        let e2 = mlm_eval(&back, &d, &v, 1).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn random_init_is_near_uniform() {
        // With 0.02-scale weights the logits are nearly flat, so the loss is
        // close to ln V.
        let d = chunk_toy_dataset(AgreementType::Sv, 32, 5);
        let v = vocab_for(&d);
        let out = train_stage1::<f64>(&d, &v, &toy_cfg(0)).unwrap();
        let e = mlm_eval(&out.checkpoint, &d, &v, 2).unwrap();
        let ln_v = (v.len() as f64).ln();
        assert!((e.loss - ln_v).abs() < 0.05 * ln_v, "{} vs {ln_v}", e.loss);
    }
}
