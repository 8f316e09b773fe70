//! WordPiece-style vocabulary and greedy longest-match-first encoding.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_RESERVED: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Inclusive range of piece positions produced by one word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordSpan {
    pub first: usize,
    pub last: usize,
}

impl WordSpan {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIdSequence {
    pub ids: Vec<usize>,
    /// One entry per input word; `None` when truncation removed the whole word.
    pub word_spans: Vec<Option<WordSpan>>,
}

pub fn is_special(id: usize) -> bool {
    matches!(id, PAD | CLS | SEP | MASK)
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    /// Builds a vocabulary of at most `max_size` entries (specials included).
    ///
    /// Character fallback units (each word-initial character and each
    /// `##`-prefixed non-initial character) are reserved first when they fit,
    /// so every corpus word stays encodable; the remaining budget goes to
    /// whole words by descending frequency, ties broken lexicographically.
    pub fn build<'a, I>(lines: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < NUM_RESERVED + 1 {
            return Err(Error::Invalid(format!(
                "vocabulary size {max_size} leaves no room beyond the {NUM_RESERVED} reserved tokens"
            )));
        }
        let mut word_freq: HashMap<String, usize> = HashMap::new();
        let mut unit_freq: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for word in split_words(line) {
                for (i, ch) in word.chars().enumerate() {
                    let unit = if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION}{ch}")
                    };
                    *unit_freq.entry(unit).or_default() += 1;
                }
                *word_freq.entry(word).or_default() += 1;
            }
        }
        let ranked = |freq: HashMap<String, usize>| {
            let mut v: Vec<(String, usize)> = freq.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            v.into_iter().map(|(s, _)| s).collect::<Vec<_>>()
        };
        let words = ranked(word_freq);
        let units = ranked(unit_freq);

        let budget = max_size - NUM_RESERVED;
        let unit_set: BTreeSet<&String> = units.iter().collect();
        let mut chosen_words = Vec::new();
        if unit_set.len() <= budget {
            let mut used = unit_set.len();
            for w in &words {
                if unit_set.contains(w) {
                    chosen_words.push(w.clone());
                } else if used < budget {
                    chosen_words.push(w.clone());
                    used += 1;
                }
            }
            let mut pieces: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
            let word_set: BTreeSet<&String> = chosen_words.iter().collect();
            let rest: Vec<String> = units.iter().filter(|u| !word_set.contains(u)).cloned().collect();
            pieces.extend(chosen_words.iter().cloned());
            pieces.extend(rest);
            Vocabulary::from_pieces(pieces)
        } else {
            let mut pieces: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
            pieces.extend(words.into_iter().take(budget));
            Vocabulary::from_pieces(pieces)
        }
    }

    /// Builds from an explicit piece list; reserved tokens must lead in order.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Invalid(format!("vocabulary id {i} must be {special}")));
            }
        }
        let mut ids = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if ids.insert(p.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary piece {p:?}")));
            }
        }
        Ok(Vocabulary { pieces, ids })
    }

    /// Specials followed by the given whole words, in order.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut pieces: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        pieces.extend(words.iter().map(|w| w.as_ref().to_lowercase()));
        Vocabulary::from_pieces(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    /// Greedy longest-match-first segmentation of one (lowercased) word.
    pub fn word_pieces(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            return vec![UNK];
        }
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while end > start {
                let body: String = chars[start..end].iter().collect();
                let candidate = if start == 0 {
                    body
                } else {
                    format!("{CONTINUATION}{body}")
                };
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![UNK],
            }
        }
        out
    }

    /// Encodes whitespace-separated text.
    pub fn encode(&self, text: &str, max_len: usize, add_specials: bool) -> TokenIdSequence {
        let words: Vec<String> = split_words(text).collect();
        self.encode_words(&words, max_len, add_specials)
    }

    /// Encodes pre-split words. Overflowing pieces are dropped from the end
    /// of the content, so `[CLS]` and `[SEP]` always survive.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S], max_len: usize, add_specials: bool) -> TokenIdSequence {
        let capacity = if add_specials {
            max_len.saturating_sub(2)
        } else {
            max_len
        };
        let offset = usize::from(add_specials);
        let mut ids = Vec::new();
        if add_specials {
            ids.push(CLS);
        }
        let mut word_spans = Vec::with_capacity(words.len());
        let mut content = 0;
        for w in words {
            let pieces = self.word_pieces(&w.as_ref().to_lowercase());
            let room = capacity - content;
            let take = pieces.len().min(room);
            if take == 0 {
                word_spans.push(None);
                continue;
            }
            word_spans.push(Some(WordSpan {
                first: offset + content,
                last: offset + content + take - 1,
            }));
            ids.extend_from_slice(&pieces[..take]);
            content += take;
        }
        if add_specials {
            ids.push(SEP);
        }
        TokenIdSequence { ids, word_spans }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let piece = self
                .piece(id)
                .ok_or_else(|| Error::Invalid(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if matches!(id, PAD | CLS | SEP) {
                continue;
            }
            match piece.strip_prefix(CONTINUATION) {
                Some(rest) if id >= NUM_RESERVED && !out.is_empty() => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(piece);
                }
            }
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.pieces {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut pieces = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Record {
                line: i + 1,
                message: e.to_string(),
            })?;
            pieces.push(line.trim_end_matches('\r').to_string());
        }
        while pieces.last().is_some_and(|p| p.is_empty()) {
            pieces.pop();
        }
        Vocabulary::from_pieces(pieces)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_corpus() {
        let v = Vocabulary::build(["a a b"], 8).unwrap();
        assert_eq!(&v.pieces()[NUM_RESERVED..], ["a", "b"]);
    }

    #[test]
    fn capacity_six_keeps_one_piece() {
        let v = Vocabulary::build(["the cat sat on the mat"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.piece(MASK), Some("[MASK]"));
        assert_eq!(v.piece(5), Some("the"));
        assert!(Vocabulary::build(["x"], 5).is_err());
    }

    #[test]
    fn empty_corpus() {
        let v = Vocabulary::build(std::iter::empty(), 100).unwrap();
        assert_eq!(v.len(), NUM_RESERVED);
    }

    #[test]
    fn fallback_units_make_every_word_encodable() {
        let corpus = ["the cat sat", "the catalog"];
        let v = Vocabulary::build(corpus, 40).unwrap();
        for w in ["catalog", "sat", "cat", "the", "tat"] {
            assert!(!v.word_pieces(w).contains(&UNK), "{w} fell back to [UNK]");
        }
        assert_eq!(v.word_pieces("dog"), vec![UNK]);
    }

    #[test]
    fn whole_words_outrank_fallback_in_id_order() {
        let v = Vocabulary::build(["zz zz zz y"], 20).unwrap();
        assert_eq!(v.piece(5), Some("zz"));
        assert_eq!(v.piece(6), Some("y"));
    }

    #[test]
    fn encode_empty_and_words() {
        let v = Vocabulary::with_words(&["davis", "had", "seen"]).unwrap();
        let e = v.encode("", 8, true);
        assert_eq!(e.ids, vec![CLS, SEP]);
        let e = v.encode("Davis had seen", 16, true);
        assert_eq!(e.ids.len(), 5);
        let spans: Vec<_> = e.word_spans.iter().map(|s| s.map(|s| (s.first, s.last))).collect();
        assert_eq!(spans, vec![Some((1, 1)), Some((2, 2)), Some((3, 3))]);
    }

    #[test]
    fn truncation_keeps_specials() {
        let v = Vocabulary::with_words(&["w"]).unwrap();
        let text = vec!["w"; 30].join(" ");
        let e = v.encode(&text, 10, true);
        assert_eq!(e.ids.len(), 10);
        assert_eq!(e.ids[0], CLS);
        assert_eq!(*e.ids.last().unwrap(), SEP);
        assert_eq!(e.word_spans.iter().filter(|s| s.is_some()).count(), 8);
    }

    #[test]
    fn continuation_pieces_and_decode() {
        let v = Vocabulary::from_pieces(
            SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(["play", "##ing", "##ed", "go"].map(String::from))
                .collect(),
        )
        .unwrap();
        let e = v.encode("Playing went played go", 32, true);
        assert_eq!(e.ids, vec![CLS, 5, 6, UNK, 5, 7, 8, SEP]);
        assert_eq!(e.word_spans[0], Some(WordSpan { first: 1, last: 2 }));
        assert_eq!(v.decode(&e.ids).unwrap(), "playing [UNK] played go");
        assert_eq!(v.decode(&[CLS, SEP]).unwrap(), "");
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build(["some text here"], 50).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);
        assert!(Vocabulary::read("[PAD]\n[CLS]\n".as_bytes()).is_err());
    }
}
