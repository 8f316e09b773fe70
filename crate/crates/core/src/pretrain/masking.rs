use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::{is_special, MASK, NUM_RESERVED, UNK};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    /// Corrupted input ids.
    pub ids: Vec<usize>,
    /// Original id at every selected position.
    pub labels: Vec<Option<usize>>,
}

impl MaskedSequence {
    pub fn loss_mask(&self) -> Vec<bool> {
        self.labels.iter().map(Option::is_some).collect()
    }

    pub fn selected(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// BERT-style corruption: each non-special position is selected with
/// probability `mask_rate`; selected positions become `[MASK]` 80% of the
/// time, a random content id 10%, and stay unchanged 10%. With
/// `force_one`, a sequence that drew no position gets one chosen uniformly.
pub fn mask_tokens(
    ids: &[usize],
    vocab_size: usize,
    mask_rate: f64,
    force_one: bool,
    rng: &mut Rng,
) -> Result<MaskedSequence> {
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    if candidates.is_empty() {
        return Err(Error::Invalid("sequence has no maskable token".into()));
    }
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < mask_rate)
        .collect();
    if selected.is_empty() && force_one {
        selected.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let mut out = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for &pos in &selected {
        labels[pos] = Some(ids[pos]);
        let r: f64 = rng.random();
        if r < 0.8 {
            out[pos] = MASK;
        } else if r < 0.9 {
            out[pos] = if vocab_size > NUM_RESERVED {
                rng.random_range(NUM_RESERVED..vocab_size)
            } else {
                UNK
            };
        }
    }
    Ok(MaskedSequence { ids: out, labels })
}
