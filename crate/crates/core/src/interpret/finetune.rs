use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::task::{implied_classes, LabeledExample};
use crate::error::{Error, Result};
use crate::fusion::{EncodedInput, Stage2Model};
use crate::nn::{argmax, AdamW, AdamWConfig, Bound, Graph, ParamId, ParamKind, Var};
use crate::pretrain::{cosine_lr, TrainingMeta};
use crate::rng::{normal_tensor, stream, Rng};
use crate::tokenizer::Vocabulary;
use crate::Scalar;

/// Parameter name of the classification head, `[hidden x classes]`.
pub const CLASSIFIER: &str = "cls.weight";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine decay.
    pub lr: f64,
    pub seed: u64,
    /// Class count; derived from the labels when absent.
    pub num_classes: Option<usize>,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            seed: 0,
            num_classes: None,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Invalid(format!(
                "learning rate {} is not a finite non-negative value",
                self.lr
            )));
        }
        if self.num_classes.is_some_and(|c| c < 2) {
            return Err(Error::Invalid("a classifier needs at least two classes".into()));
        }
        Ok(())
    }
}

/// Stage-2 model with a bias-free linear head on the final `[CLS]` vector.
#[derive(Debug, Clone)]
pub struct Classifier<T> {
    pub model: Stage2Model<T>,
    head: ParamId,
    num_classes: usize,
}

impl<T: Scalar> Classifier<T> {
    /// Adds a freshly initialized head, or reuses one of matching size.
    pub fn new(mut model: Stage2Model<T>, num_classes: usize, seed: u64) -> Result<Self> {
        let d = model.hidden_dim();
        let head = match model.store.id(CLASSIFIER) {
            Ok(id) => {
                let shape = model.store.get(id).shape().to_vec();
                if shape != [d, num_classes] {
                    return Err(Error::Invalid(format!(
                        "class-count mismatch: head has shape {shape:?}, task needs {num_classes} classes"
                    )));
                }
                id
            }
            Err(_) => {
                let w = normal_tensor(&[d, num_classes], 0.02, &mut stream(seed, "init/classifier"));
                model.store.insert(CLASSIFIER, ParamKind::Linear, w)?
            }
        };
        Ok(Classifier {
            model,
            head,
            num_classes,
        })
    }

    /// Restores a classifier saved with [`Classifier::save`].
    pub fn load(path: &Path) -> Result<(Self, TrainingMeta)> {
        let (model, meta) = Stage2Model::load(path)?;
        let head = model
            .store
            .id(CLASSIFIER)
            .map_err(|_| Error::Format(format!("{} has no classification head", path.display())))?;
        let num_classes = model.store.get(head).cols();
        Ok((
            Classifier {
                model,
                head,
                num_classes,
            },
            meta,
        ))
    }

    pub fn save(&self, path: &Path, meta: &TrainingMeta) -> Result<()> {
        self.model.save(path, meta)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[1 x classes]` logits for one encoded example.
    pub fn logits(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        input: &EncodedInput,
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let out = self.model.forward(g, bound, input, &input.tokens.ids, None, dropout)?;
        let cls = g.gather_rows(out.hidden, vec![0]);
        Ok(g.matmul(cls, bound.var(self.head)))
    }

    pub fn predict(&self, input: &EncodedInput) -> Result<usize> {
        let mut g = Graph::new();
        let bound = self.model.store.bind(&mut g);
        let logits = self.logits(&mut g, &bound, input, None)?;
        g.check_finite(0)?;
        Ok(argmax(g.value(logits).data()))
    }

    /// Fraction of examples predicted correctly; 0 for an empty set.
    pub fn accuracy(&self, examples: &[(EncodedInput, usize)]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for (input, label) in examples {
            if self.predict(input)? == *label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// One optimizer step of finetuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T> {
    /// Head and body from the epoch with the best dev accuracy.
    pub classifier: Classifier<T>,
    pub dev_accuracy: f64,
    /// 0 for the initial model, otherwise the 1-based epoch.
    pub best_epoch: usize,
    /// Dev accuracy after each epoch.
    pub epoch_accuracies: Vec<f64>,
    pub trace: Vec<FinetuneRow>,
}

/// Encodes labeled examples for `model`.
pub fn encode_examples<T: Scalar>(
    model: &Stage2Model<T>,
    vocab: &Vocabulary,
    examples: &[LabeledExample],
) -> Result<Vec<(EncodedInput, usize)>> {
    examples
        .iter()
        .map(|e| Ok((model.encode(vocab, &e.segments())?, e.label)))
        .collect()
}

fn check_labels(examples: &[LabeledExample], classes: usize) -> Result<()> {
    match examples.iter().find(|e| e.label >= classes) {
        Some(e) => Err(Error::Invalid(format!(
            "class-count mismatch: example {} has label {} but the task has {classes} classes",
            e.a.id, e.label
        ))),
        None => Ok(()),
    }
}

/// Trains a linear head and the whole body on `train`, evaluating on `dev`
/// after every epoch. Learning rate follows a cosine decay over all steps.
/// Agreements whose score is exactly zero are clamped first.
pub fn finetune<T: Scalar>(
    model: &Stage2Model<T>,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let classes = cfg
        .num_classes
        .unwrap_or_else(|| implied_classes(train.iter().chain(dev)));
    check_labels(train, classes)?;
    check_labels(dev, classes)?;
    let mut body = model.clone();
    body.clamp_zero_scores()?;
    let mut clf = Classifier::new(body, classes, cfg.seed)?;
    let train_enc = encode_examples(&clf.model, vocab, train)?;
    let dev_enc = encode_examples(&clf.model, vocab, dev)?;

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut shuffle = stream(cfg.seed, "finetune/shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (clf.accuracy(&dev_enc)?, 0, clf.clone());
    let mut epoch_accuracies = Vec::with_capacity(cfg.epochs);
    let mut trace = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.lr);
            let mut g = Graph::new();
            let bound = clf.model.store.bind(&mut g);
            let mut losses = Vec::with_capacity(batch.len());
            for (slot, &i) in batch.iter().enumerate() {
                let mut dropout = stream(cfg.seed, &format!("finetune/dropout/{step}/{slot}"));
                let (input, label) = &train_enc[i];
                let logits = clf.logits(&mut g, &bound, input, Some(&mut dropout))?;
                losses.push(g.cross_entropy(logits, vec![Some(*label)]));
            }
            let sum = g.add_all(&losses);
            let root = g.scale(sum, T::lit(1.0 / batch.len() as f64));
            g.check_finite(step)?;
            let loss = g.value(root).data()[0].as_f64();
            let mut grads = g.backward(root)?;
            let grads = clf.model.store.collect_grads(&bound, &mut grads);
            if grads.iter().flatten().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite {
                    step,
                    detail: "non-finite finetuning gradient".into(),
                });
            }
            opt.step(&mut clf.model.store, &grads, lr);
            trace.push(FinetuneRow { epoch, step, lr, loss });
            step += 1;
        }
        let acc = clf.accuracy(&dev_enc)?;
        epoch_accuracies.push(acc);
        if acc > best.0 {
            best = (acc, epoch, clf.clone());
        }
    }
    let (dev_accuracy, best_epoch, classifier) = best;
    Ok(FinetuneOutcome {
        classifier,
        dev_accuracy,
        best_epoch,
        epoch_accuracies,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Segment;
    use crate::nn::ModelShape;

    fn toy() -> (Vocabulary, Vec<LabeledExample>) {
        let v = Vocabulary::with_words(&["alpha", "beta", "gamma", "marker"]).unwrap();
        let ex = (0..200)
            .map(|i| {
                let text = if i % 2 == 0 {
                    "alpha beta marker"
                } else {
                    "alpha beta gamma"
                };
                LabeledExample {
                    a: Segment::unparsed(format!("{i}-a"), text),
                    b: None,
                    label: (i % 2 == 0) as usize,
                }
            })
            .collect();
        (v, ex)
    }

    fn plain(v: &Vocabulary) -> Stage2Model<f64> {
        let cfg = ModelShape::new(1, 8, 2).to_config(v.len(), 16);
        Stage2Model::new(&cfg, None, 3).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_head() {
        let (v, ex) = toy();
        let m = plain(&v);
        let cfg = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        let out = finetune(&m, &v, &ex, &ex, &cfg).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert!(out.trace.is_empty());
        let fresh = Classifier::new(m, 2, 0).unwrap();
        assert_eq!(out.classifier.model.store, fresh.model.store);
    }

    #[test]
    fn learns_marker_word() {
        let (v, ex) = toy();
        let cfg = FinetuneConfig {
            lr: 1e-2,
            ..FinetuneConfig::default()
        };
        let out = finetune(&plain(&v), &v, &ex, &ex, &cfg).unwrap();
        assert_eq!(out.dev_accuracy, 1.0, "{:?}", out.epoch_accuracies);
    }

    #[test]
    fn label_outside_class_count_is_an_error() {
        let (v, ex) = toy();
        let cfg = FinetuneConfig {
            num_classes: Some(2),
            ..FinetuneConfig::default()
        };
        let mut bad = ex.clone();
        bad[0].label = 2;
        let err = finetune(&plain(&v), &v, &bad, &ex, &cfg).unwrap_err();
        assert!(err.to_string().contains("class-count mismatch"), "{err}");
    }

    #[test]
    fn existing_head_of_other_size_is_rejected() {
        let (v, _) = toy();
        let clf = Classifier::new(plain(&v), 3, 0).unwrap();
        assert!(Classifier::new(clf.model, 2, 0).is_err());
    }

    #[test]
    fn seeded_runs_match() {
        let (v, ex) = toy();
        let cfg = FinetuneConfig {
            epochs: 2,
            lr: 1e-3,
            seed: 5,
            ..FinetuneConfig::default()
        };
        let a = finetune(&plain(&v), &v, &ex, &ex, &cfg).unwrap();
        let b = finetune(&plain(&v), &v, &ex, &ex, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.classifier.model.store, b.classifier.model.store);
    }
}
