//! Dependency-agreement chunking.
//!
//! A chunk is anchored on a trigger token whose dependency label belongs to
//! one of four agreement types. It spans from the leftmost position of the
//! contiguous run of the trigger's own subtree that ends at the trigger, to
//! the trigger's head, normalized so that `start <= end`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conllu::{children_index, ChildMap, ParsedSentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgreementType {
    Sv,
    Dobj,
    Pobj,
    Comp,
}

impl AgreementType {
    pub const ALL: [AgreementType; 4] = [
        AgreementType::Sv,
        AgreementType::Dobj,
        AgreementType::Pobj,
        AgreementType::Comp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AgreementType::Sv => "sv",
            AgreementType::Dobj => "dobj",
            AgreementType::Pobj => "pobj",
            AgreementType::Comp => "comp",
        }
    }

    /// Dependency labels that trigger this agreement.
    pub fn trigger_set(self) -> &'static [&'static str] {
        match self {
            AgreementType::Sv => &["nsubj", "nsubjpass", "csubj", "csubjpass"],
            AgreementType::Dobj => &["dobj"],
            AgreementType::Pobj => &["pobj"],
            AgreementType::Comp => &["acomp", "xcomp", "ccomp", "pcomp", "attr"],
        }
    }

    pub fn triggers_on(self, deprel: &str) -> bool {
        self.trigger_set().contains(&deprel)
    }
}

impl fmt::Display for AgreementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgreementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sv" => Ok(AgreementType::Sv),
            "dobj" => Ok(AgreementType::Dobj),
            "pobj" => Ok(AgreementType::Pobj),
            "comp" => Ok(AgreementType::Comp),
            other => Err(Error::Invalid(format!("unknown agreement type {other:?}"))),
        }
    }
}

pub fn trigger_set(a: AgreementType) -> &'static [&'static str] {
    a.trigger_set()
}

/// Which dependents may extend a chunk leftward from its trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanMode {
    /// The trigger and all of its transitive dependents.
    #[default]
    Subtree,
    /// The trigger and its direct children only.
    DirectChildren,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementChunk {
    pub agreement: AgreementType,
    pub sentence_id: String,
    pub trigger_index: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl AgreementChunk {
    pub fn word_len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn covers(&self, index: usize) -> bool {
        (self.start..=self.end).contains(&index)
    }
}

fn belongs(sentence: &ParsedSentence, cm: &ChildMap, trigger: usize, node: usize, mode: SpanMode) -> bool {
    match mode {
        SpanMode::Subtree => cm.in_subtree(sentence, trigger, node),
        SpanMode::DirectChildren => node == trigger || sentence.token(node).head == trigger,
    }
}

/// Leftmost start of the run of trigger-owned positions ending at `trigger`.
pub fn left_extent(sentence: &ParsedSentence, cm: &ChildMap, trigger: usize, mode: SpanMode) -> usize {
    let mut left = trigger;
    while left > 1 && belongs(sentence, cm, trigger, left - 1, mode) {
        left -= 1;
    }
    left
}

/// Extracts the chunk anchored at `trigger` for agreement `a`.
///
/// Returns `Ok(None)` when the trigger attaches to the root, and an error
/// when the trigger's label is not in `a`'s trigger set.
pub fn extract_chunk(
    sentence: &ParsedSentence,
    cm: &ChildMap,
    trigger: usize,
    a: AgreementType,
    mode: SpanMode,
) -> Result<Option<AgreementChunk>> {
    if trigger == 0 || trigger > sentence.len() {
        return Err(Error::Invalid(format!(
            "trigger index {trigger} outside sentence {} of length {}",
            sentence.id,
            sentence.len()
        )));
    }
    let tok = sentence.token(trigger);
    if !a.triggers_on(&tok.deprel) {
        return Err(Error::Invalid(format!(
            "token {trigger} ({:?}) of sentence {} is not a {a} trigger",
            tok.deprel, sentence.id
        )));
    }
    if tok.head == 0 {
        return Ok(None);
    }
    let left = left_extent(sentence, cm, trigger, mode);
    let start = left.min(tok.head);
    let end = trigger.max(tok.head);
    let text = sentence.tokens[start - 1..end]
        .iter()
        .map(|t| t.form.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Some(AgreementChunk {
        agreement: a,
        sentence_id: sentence.id.clone(),
        trigger_index: trigger,
        start,
        end,
        text,
    }))
}

/// Per-sentence chunking result with the count of root-attached triggers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SentenceChunks {
    pub chunks: Vec<AgreementChunk>,
    pub root_triggers: usize,
}

pub fn chunk_sentence(sentence: &ParsedSentence, cm: &ChildMap, mode: SpanMode) -> SentenceChunks {
    let mut out = SentenceChunks::default();
    for a in AgreementType::ALL {
        for tok in &sentence.tokens {
            if !a.triggers_on(&tok.deprel) {
                continue;
            }
            match extract_chunk(sentence, cm, tok.index, a, mode) {
                Ok(Some(c)) => out.chunks.push(c),
                Ok(None) => out.root_triggers += 1,
                Err(_) => unreachable!("trigger label checked above"),
            }
        }
    }
    out
}

/// Convenience: chunks of a sentence under the default span mode.
pub fn chunks_of(sentence: &ParsedSentence) -> Vec<AgreementChunk> {
    chunk_sentence(sentence, &children_index(sentence), SpanMode::default()).chunks
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkDataset {
    pub agreement: AgreementType,
    chunks: Vec<AgreementChunk>,
}

impl ChunkDataset {
    pub fn new(agreement: AgreementType) -> Self {
        ChunkDataset {
            agreement,
            chunks: Vec::new(),
        }
    }

    pub fn push(&mut self, chunk: AgreementChunk) -> Result<()> {
        if chunk.agreement != self.agreement {
            return Err(Error::Invalid(format!(
                "{} chunk pushed into {} dataset",
                chunk.agreement, self.agreement
            )));
        }
        self.chunks.push(chunk);
        Ok(())
    }

    pub fn chunks(&self) -> &[AgreementChunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for c in &self.chunks {
            serde_json::to_writer(&mut w, c)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads JSON Lines chunks. Every record must match `agreement` when
    /// given; otherwise the first record fixes the dataset's type.
    pub fn read_jsonl<R: BufRead>(r: R, agreement: Option<AgreementType>) -> Result<Self> {
        let mut ds: Option<ChunkDataset> = agreement.map(ChunkDataset::new);
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let chunk: AgreementChunk = serde_json::from_str(&line).map_err(|e| Error::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
            let d = ds.get_or_insert_with(|| ChunkDataset::new(chunk.agreement));
            d.push(chunk).map_err(|e| Error::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        ds.ok_or_else(|| Error::Invalid("empty chunk file with no agreement given".into()))
    }
}

/// The four per-agreement datasets built from a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusChunks {
    pub datasets: [ChunkDataset; 4],
    pub root_triggers: usize,
}

impl CorpusChunks {
    pub fn get(&self, a: AgreementType) -> &ChunkDataset {
        &self.datasets[a.index()]
    }

    pub fn counts(&self) -> BTreeMap<AgreementType, usize> {
        self.datasets.iter().map(|d| (d.agreement, d.len())).collect()
    }
}

pub fn chunk_corpus<'a, I>(sentences: I, mode: SpanMode) -> CorpusChunks
where
    I: IntoIterator<Item = &'a ParsedSentence>,
{
    let mut datasets = AgreementType::ALL.map(ChunkDataset::new);
    let mut root_triggers = 0;
    for s in sentences {
        let out = chunk_sentence(s, &children_index(s), mode);
        root_triggers += out.root_triggers;
        for c in out.chunks {
            let idx = c.agreement.index();
            datasets[idx].chunks.push(c);
        }
    }
    CorpusChunks {
        datasets,
        root_triggers,
    }
}

/// Nearest-rank percentile of chunk word lengths: the smallest length `L`
/// such that at least `p`% of chunks are no longer than `L`.
pub fn length_stats(dataset: &ChunkDataset, p: f64) -> Result<usize> {
    let lengths: Vec<usize> = dataset.chunks.iter().map(AgreementChunk::word_len).collect();
    nearest_rank(&lengths, p)
}

pub fn nearest_rank(values: &[usize], p: f64) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Invalid("percentile of an empty dataset".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Invalid(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    // smallest k with 100 k >= p n, corrected for rounding in the division
    let target = p * sorted.len() as f64;
    let mut rank = (target / 100.0).ceil() as usize;
    while rank > 1 && ((rank - 1) as f64) * 100.0 >= target {
        rank -= 1;
    }
    while (rank as f64) * 100.0 < target {
        rank += 1;
    }
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// One row of the length table: `count` chunks have at most `length` words.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthStat {
    pub agreement: AgreementType,
    pub percentile: f64,
    pub length: usize,
    pub count: usize,
}

/// Length percentiles of every non-empty dataset of a corpus.
pub fn corpus_length_stats(chunks: &CorpusChunks, percentiles: &[f64]) -> Result<Vec<LengthStat>> {
    let mut out = Vec::new();
    for d in chunks.datasets.iter().filter(|d| !d.is_empty()) {
        for &p in percentiles {
            let length = length_stats(d, p)?;
            let count = d.chunks.iter().filter(|c| c.word_len() <= length).count();
            out.push(LengthStat {
                agreement: d.agreement,
                percentile: p,
                length,
                count,
            });
        }
    }
    Ok(out)
}

/// `agreement,percentile,length,count` CSV.
pub fn write_stats_csv<W: Write>(w: W, stats: &[LengthStat]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["agreement", "percentile", "length", "count"])?;
    for s in stats {
        out.write_record([
            s.agreement.name().to_string(),
            s.percentile.to_string(),
            s.length.to_string(),
            s.count.to_string(),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
