use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::chunker::SpanMode;
use crate::conllu::{parse_conllu, ParsedSentence};
use crate::error::{Error, Result};
use crate::fusion::Segment;

/// One classification example: a sentence or sentence pair and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub a: Segment,
    pub b: Option<Segment>,
    pub label: usize,
}

impl LabeledExample {
    pub fn segments(&self) -> Vec<Segment> {
        let mut out = vec![self.a.clone()];
        out.extend(self.b.clone());
        out
    }
}

/// Number of classes implied by the largest label (at least two).
pub fn implied_classes<'a, I>(examples: I) -> usize
where
    I: IntoIterator<Item = &'a LabeledExample>,
{
    examples.into_iter().map(|e| e.label + 1).max().unwrap_or(0).max(2)
}

fn segment(
    row: usize,
    side: &str,
    text: &str,
    parses: &HashMap<&str, &ParsedSentence>,
    mode: SpanMode,
) -> Result<Segment> {
    let id = format!("{row}-{side}");
    let Some(parse) = parses.get(id.as_str()) else {
        return Ok(Segment::unparsed(id, text));
    };
    let seg = Segment::from_sentence(parse, mode);
    let words: Vec<&str> = text.split_whitespace().collect();
    if seg.words != words {
        return Err(Error::InvalidSentence {
            id,
            message: format!("parse forms {:?} do not match task text {text:?}", seg.words.join(" ")),
        });
    }
    Ok(seg)
}

/// Reads task rows from TSV with a header naming `text_a`, optionally
/// `text_b`, and `label` (a non-negative integer). Row `i` (0-based) takes
/// its chunks from the parses with sentence ids `i-a` and `i-b`; rows
/// without a parse get no chunks.
pub fn read_task_tsv<R: Read>(reader: R, parses: &[ParsedSentence], mode: SpanMode) -> Result<Vec<LabeledExample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let a_col = column("text_a").ok_or_else(|| Error::Record {
        line: 1,
        message: "header lacks a text_a column".into(),
    })?;
    let label_col = column("label").ok_or_else(|| Error::Record {
        line: 1,
        message: "header lacks a label column".into(),
    })?;
    let b_col = column("text_b");
    let by_id: HashMap<&str, &ParsedSentence> = parses.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let field = |c: usize| {
            record.get(c).ok_or_else(|| Error::Record {
                line,
                message: format!("missing column {}", c + 1),
            })
        };
        let label_text = field(label_col)?.trim();
        let label = label_text.parse::<usize>().map_err(|_| Error::Record {
            line,
            message: format!("label {label_text:?} is not a class id"),
        })?;
        let a = segment(row, "a", field(a_col)?, &by_id, mode)?;
        let b = b_col.map(|c| segment(row, "b", field(c)?, &by_id, mode)).transpose()?;
        if a.words.is_empty() {
            return Err(Error::Record {
                line,
                message: "empty text_a".into(),
            });
        }
        out.push(LabeledExample { a, b, label });
    }
    Ok(out)
}

/// Loads a task file plus optional CoNLL-U parses of its rows.
pub fn load_task(tsv: &Path, parses: Option<&Path>, mode: SpanMode) -> Result<Vec<LabeledExample>> {
    let sentences = match parses {
        Some(p) => {
            let f = File::open(p).map_err(|e| Error::io(p, e))?;
            parse_conllu(BufReader::new(f), true)?.sentences
        }
        None => Vec::new(),
    };
    let f = File::open(tsv).map_err(|e| Error::io(tsv, e))?;
    read_task_tsv(BufReader::new(f), &sentences, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_pairs_and_labels() {
        let tsv = "text_a\ttext_b\tlabel\nDavis ran\tMason sat\t1\nA b\tc\t0\n";
        let ex = read_task_tsv(tsv.as_bytes(), &[], SpanMode::Subtree).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].a.words, ["Davis", "ran"]);
        assert_eq!(ex[0].b.as_ref().unwrap().id, "0-b");
        assert_eq!(ex[1].label, 0);
        assert_eq!(implied_classes(&ex), 2);
    }

    #[test]
    fn parses_attach_chunks_by_row() {
        let p = ParsedSentence::from_triples("0-a", &[("Davis", 2, "nsubj"), ("ran", 0, "root")]).unwrap();
        let ex = read_task_tsv(
            "text_a\tlabel\nDavis ran\t1\nMason sat\t0\n".as_bytes(),
            &[p],
            SpanMode::Subtree,
        )
        .unwrap();
        assert_eq!(ex[0].a.chunks.len(), 1);
        assert!(ex[1].a.chunks.is_empty());
    }

    #[test]
    fn mismatched_parse_is_rejected() {
        let p = ParsedSentence::from_triples("0-a", &[("Davis", 2, "nsubj"), ("ran", 0, "root")]).unwrap();
        let err = read_task_tsv("text_a\tlabel\nDavis sat\t1\n".as_bytes(), &[p], SpanMode::Subtree).unwrap_err();
        assert!(err.to_string().contains("0-a"), "{err}");
    }

    #[test]
    fn bad_label_names_line() {
        let err = read_task_tsv("text_a\tlabel\nx\tyes\n".as_bytes(), &[], SpanMode::Subtree).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn missing_label_column() {
        assert!(read_task_tsv("text_a\tx\nx\t1\n".as_bytes(), &[], SpanMode::Subtree).is_err());
    }
}
