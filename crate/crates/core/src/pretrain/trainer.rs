//! Optimizer-step loop shared by every MLM-style training run.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::schedule::triangular_lr;
use crate::error::{Error, Result};
use crate::nn::{argmax, AdamW, AdamWConfig, Bound, Graph, ParamStore, Tensor, Var};
use crate::rng::{stream, Rng};
use crate::Scalar;

/// Items per gradient shard. Shards are the unit of parallel work and are
/// reduced in a fixed order, so results do not depend on the thread count.
const SHARD: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub micro_batch: usize,
    pub accumulation_target: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub peak_fraction: f64,
    pub seed: u64,
    pub threads: usize,
    pub optimizer: AdamWConfig,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.accumulation_target == 0 {
            return Err(Error::Invalid(
                "micro_batch and accumulation_target must be positive".into(),
            ));
        }
        if !self.accumulation_target.is_multiple_of(self.micro_batch) {
            return Err(Error::Invalid(format!(
                "accumulation_target {} is not a multiple of micro_batch {}",
                self.accumulation_target, self.micro_batch
            )));
        }
        if !(self.peak_fraction > 0.0 && self.peak_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "peak_fraction {} outside (0, 1)",
                self.peak_fraction
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Invalid(format!(
                "peak_lr {} must be finite and non-negative",
                self.peak_lr
            )));
        }
        Ok(())
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

/// Writes `step,lr,loss,acc` rows.
pub fn write_trace<W: Write>(w: W, rows: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("trace", e))?;
    Ok(())
}

/// Loss node of one training item plus its masked-token tallies.
pub struct ItemOutput {
    /// Summed negative log-likelihood over the item's labeled positions.
    pub loss: Var,
    pub count: usize,
    pub correct: usize,
}

/// Cross-entropy over labeled rows of `logits`, with argmax hits.
pub fn mlm_item_output<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[Option<usize>]) -> ItemOutput {
    let value = g.value(logits);
    let mut count = 0;
    let mut correct = 0;
    for (r, l) in labels.iter().enumerate() {
        if let Some(l) = *l {
            count += 1;
            correct += usize::from(argmax(value.row(r)) == l);
        }
    }
    let loss = g.cross_entropy(logits, labels.to_vec());
    ItemOutput { loss, count, correct }
}

/// A dataset the loop can draw items from.
pub trait MlmTask<T: Scalar>: Sync {
    type Item: Send + Sync;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds the corrupted input for item `index`; `None` marks an item
    /// with nothing to predict, which is skipped.
    fn prepare(&self, index: usize, mask_rng: &mut Rng) -> Result<Option<Self::Item>>;

    fn forward(&self, g: &mut Graph<T>, bound: &Bound, item: &Self::Item, dropout: &mut Rng) -> Result<ItemOutput>;
}

/// Where and why training stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericFault {
    pub step: usize,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub trace: Vec<TraceRow>,
    pub skipped_items: usize,
    pub skipped_steps: usize,
    /// Set when a step produced NaN or Inf; the store then holds the
    /// parameters from before that step.
    pub fault: Option<NumericFault>,
}

struct ShardOut<T> {
    grads: Vec<Option<Tensor<T>>>,
    loss: f64,
    count: usize,
    correct: usize,
}

fn run_shard<T: Scalar, M: MlmTask<T>>(
    store: &ParamStore<T>,
    task: &M,
    items: &[(usize, M::Item)],
    step: usize,
    seed: u64,
) -> Result<ShardOut<T>> {
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let mut losses = Vec::with_capacity(items.len());
    let (mut count, mut correct) = (0, 0);
    for (slot, item) in items {
        let mut dropout = stream(seed, &format!("dropout/{step}/{slot}"));
        let out = task.forward(&mut g, &bound, item, &mut dropout)?;
        losses.push(out.loss);
        count += out.count;
        correct += out.correct;
    }
    let root = g.add_all(&losses);
    g.check_finite(step)?;
    let loss = g.value(root).data()[0].as_f64();
    let mut grads = g.backward(root)?;
    let grads = store.collect_grads(&bound, &mut grads);
    if grads.iter().flatten().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite {
            step,
            detail: "non-finite gradient".into(),
        });
    }
    Ok(ShardOut {
        grads,
        loss,
        count,
        correct,
    })
}

fn run_shards<T: Scalar, M: MlmTask<T>>(
    store: &ParamStore<T>,
    task: &M,
    shards: &[&[(usize, M::Item)]],
    step: usize,
    seed: u64,
    threads: usize,
) -> Vec<Result<ShardOut<T>>> {
    let threads = threads.max(1).min(shards.len());
    if threads <= 1 {
        return shards.iter().map(|s| run_shard(store, task, s, step, seed)).collect();
    }
    let mut slots: Vec<Option<Result<ShardOut<T>>>> = (0..shards.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                scope.spawn(move || {
                    (t..shards.len())
                        .step_by(threads)
                        .map(|i| (i, run_shard(store, task, shards[i], step, seed)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("training worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every shard ran")).collect()
}

fn accumulate<T: Scalar>(acc: &mut Vec<Option<Tensor<T>>>, grads: Vec<Option<Tensor<T>>>) {
    if acc.len() < grads.len() {
        acc.resize_with(grads.len(), || None);
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Runs `cfg.total_steps` optimizer steps. Each step draws
/// `accumulation_target` items from a per-epoch shuffled order, sums the
/// gradients over all masked tokens of the step and divides by their count.
pub fn run_mlm_loop<T: Scalar, M: MlmTask<T>>(
    store: &mut ParamStore<T>,
    task: &M,
    cfg: &LoopConfig,
) -> Result<LoopOutcome> {
    cfg.validate()?;
    if task.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut order_rng = stream(cfg.seed, "data/order");
    let mut mask_rng = stream(cfg.seed, "data/mask");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut outcome = LoopOutcome {
        trace: Vec::with_capacity(cfg.total_steps),
        skipped_items: 0,
        skipped_steps: 0,
        fault: None,
    };

    for step in 1..=cfg.total_steps {
        let mut prepared = Vec::with_capacity(cfg.accumulation_target);
        for slot in 0..cfg.accumulation_target {
            if cursor == order.len() {
                order = (0..task.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let index = order[cursor];
            cursor += 1;
            match task.prepare(index, &mut mask_rng)? {
                Some(item) => prepared.push((slot, item)),
                None => outcome.skipped_items += 1,
            }
        }
        if prepared.is_empty() {
            outcome.skipped_steps += 1;
            continue;
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        let (mut loss, mut count, mut correct) = (0.0, 0usize, 0usize);
        let mut fault = None;
        'micro: for micro in prepared.chunks(cfg.micro_batch) {
            let shards: Vec<_> = micro.chunks(SHARD).collect();
            for r in run_shards(store, task, &shards, step, cfg.seed, cfg.threads) {
                match r {
                    Ok(s) => {
                        accumulate(&mut grads, s.grads);
                        loss += s.loss;
                        count += s.count;
                        correct += s.correct;
                    }
                    Err(Error::NonFinite { step, detail }) => {
                        fault = Some(NumericFault { step, detail });
                        break 'micro;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if fault.is_none() && !loss.is_finite() {
            fault = Some(NumericFault {
                step,
                detail: "non-finite loss".into(),
            });
        }
        if let Some(f) = fault {
            outcome.fault = Some(f);
            break;
        }
        if count == 0 {
            outcome.skipped_steps += 1;
            continue;
        }
        let inv = T::lit(1.0 / count as f64);
        for g in grads.iter_mut().flatten() {
            g.scale_assign(inv);
        }
        let lr = triangular_lr(step, cfg.total_steps, cfg.peak_lr, cfg.peak_fraction);
        let last_good = store.clone();
        opt.step(store, &grads, lr);
        if store.entries().iter().any(|e| !e.value.is_finite()) {
            *store = last_good;
            outcome.fault = Some(NumericFault {
                step,
                detail: "update produced non-finite parameters".into(),
            });
            break;
        }
        outcome.trace.push(TraceRow {
            step,
            lr,
            loss: loss / count as f64,
            acc: correct as f64 / count as f64,
        });
    }
    Ok(outcome)
}
