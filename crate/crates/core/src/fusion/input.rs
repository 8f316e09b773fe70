//! Tokenized inputs for the fused model and chunk-to-sentence alignment.

use crate::chunker::{chunk_sentence, AgreementChunk, AgreementType, SpanMode};
use crate::conllu::{children_index, ParsedSentence};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenIdSequence, Vocabulary, WordSpan, CLS, SEP};

/// Words of one text segment with the chunks extracted from its parse.
/// Chunk `start`/`end` are 1-based word indices into `words`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub words: Vec<String>,
    pub chunks: Vec<AgreementChunk>,
}

impl Segment {
    pub fn from_sentence(sentence: &ParsedSentence, mode: SpanMode) -> Self {
        let cm = children_index(sentence);
        Segment {
            id: sentence.id.clone(),
            words: sentence.forms(),
            chunks: chunk_sentence(sentence, &cm, mode).chunks,
        }
    }

    /// Plain text with no parse, hence no chunks.
    pub fn unparsed(id: impl Into<String>, text: &str) -> Self {
        Segment {
            id: id.into(),
            words: text.split_whitespace().map(str::to_string).collect(),
            chunks: Vec::new(),
        }
    }
}

/// One chunk ready for its submodel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkInput {
    pub agreement: AgreementType,
    /// Index of the chunk in the flattened chunk list of the input.
    pub chunk: usize,
    /// Chunk pieces with `[CLS]`/`[SEP]`, truncated to the submodel limit.
    pub ids: Vec<usize>,
    /// Sentence position receiving each chunk position's vector; `None`
    /// for specials and for pieces lost to truncation on either side.
    pub targets: Vec<Option<usize>>,
}

impl ChunkInput {
    pub fn aligned(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// Main-encoder ids plus the aligned chunks of every segment.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub id: String,
    pub tokens: TokenIdSequence,
    pub chunks: Vec<ChunkInput>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.tokens.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.ids.is_empty()
    }
}

/// `[CLS] a [SEP] (b [SEP])`, trimming pieces from the end of the longest
/// segment until the whole fits in `max_len`.
pub fn encode_segments(vocab: &Vocabulary, segments: &[&[String]], max_len: usize) -> Result<TokenIdSequence> {
    if segments.is_empty() {
        return Err(Error::Invalid("no segment to encode".into()));
    }
    if max_len < 1 + 2 * segments.len() {
        return Err(Error::Invalid(format!(
            "max length {max_len} too small for {} segment(s)",
            segments.len()
        )));
    }
    let pieces: Vec<Vec<Vec<usize>>> = segments
        .iter()
        .map(|words| words.iter().map(|w| vocab.word_pieces(&w.to_lowercase())).collect())
        .collect();
    let mut keep: Vec<usize> = pieces.iter().map(|s| s.iter().map(Vec::len).sum()).collect();
    let budget = max_len - 1 - segments.len();
    while keep.iter().sum::<usize>() > budget {
        let longest = (0..keep.len())
            .max_by_key(|&i| (keep[i], usize::MAX - i))
            .expect("non-empty");
        keep[longest] -= 1;
    }
    let mut ids = vec![CLS];
    let mut word_spans = Vec::new();
    for (seg, &limit) in pieces.iter().zip(&keep) {
        let mut used = 0;
        for word in seg {
            let take = word.len().min(limit - used);
            if take == 0 {
                word_spans.push(None);
                continue;
            }
            word_spans.push(Some(WordSpan {
                first: ids.len(),
                last: ids.len() + take - 1,
            }));
            ids.extend_from_slice(&word[..take]);
            used += take;
        }
        ids.push(SEP);
    }
    Ok(TokenIdSequence { ids, word_spans })
}

/// Encodes a chunk for its submodel and maps each chunk piece onto the
/// matching piece of the encoded sentence.
///
/// `word_offset` converts the chunk's 1-based word indices into indices of
/// `sentence.word_spans` (the number of words in earlier segments).
pub fn align_chunk(
    vocab: &Vocabulary,
    sentence_id: &str,
    words: &[String],
    chunk: &AgreementChunk,
    sentence: &TokenIdSequence,
    word_offset: usize,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
    let fail = |m: String| Error::InvalidSentence {
        id: sentence_id.to_string(),
        message: format!("chunk alignment failed: {m}"),
    };
    if chunk.start == 0 || chunk.start > chunk.end || chunk.end > words.len() {
        return Err(fail(format!(
            "span [{}, {}] outside {} words",
            chunk.start,
            chunk.end,
            words.len()
        )));
    }
    let chunk_words = &words[chunk.start - 1..chunk.end];
    let text = chunk_words.join(" ");
    if text != chunk.text {
        return Err(fail(format!(
            "chunk text {:?} does not match words {text:?}",
            chunk.text
        )));
    }
    let enc = vocab.encode_words(chunk_words, max_len, true);
    let mut targets = vec![None; enc.ids.len()];
    for (k, span) in enc.word_spans.iter().enumerate() {
        let Some(span) = span else { continue };
        let global = word_offset + chunk.start - 1 + k;
        let Some(sent_span) = sentence
            .word_spans
            .get(global)
            .ok_or_else(|| fail(format!("word {global} missing")))?
        else {
            continue;
        };
        for p in span.positions() {
            let q = sent_span.first + (p - span.first);
            if q > sent_span.last {
                break;
            }
            if sentence.ids[q] != enc.ids[p] {
                return Err(fail(format!(
                    "piece {} of chunk {:?} differs from sentence piece {}",
                    enc.ids[p], chunk.text, sentence.ids[q]
                )));
            }
            targets[p] = Some(q);
        }
    }
    Ok((enc.ids, targets))
}

/// Tokenizes segments for the main encoder and aligns every chunk whose
/// agreement has a submodel limit in `sub_max_len`.
pub fn encode_input(
    vocab: &Vocabulary,
    segments: &[Segment],
    max_len: usize,
    sub_max_len: Option<&[usize; 4]>,
) -> Result<EncodedInput> {
    let word_lists: Vec<&[String]> = segments.iter().map(|s| s.words.as_slice()).collect();
    let tokens = encode_segments(vocab, &word_lists, max_len)?;
    let id = segments.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+");
    let mut chunks = Vec::new();
    if let Some(limits) = sub_max_len {
        let mut offset = 0;
        let mut index = 0;
        for seg in segments {
            for c in &seg.chunks {
                let (ids, targets) = align_chunk(
                    vocab,
                    &seg.id,
                    &seg.words,
                    c,
                    &tokens,
                    offset,
                    limits[c.agreement.index()],
                )?;
                chunks.push(ChunkInput {
                    agreement: c.agreement,
                    chunk: index,
                    ids,
                    targets,
                });
                index += 1;
            }
            offset += seg.words.len();
        }
    }
    Ok(EncodedInput { id, tokens, chunks })
}
