//! Synthetic parsed corpora for toy-scale runs and tests.
//!
//! Two sentence templates cover all four agreements, and every chunk holds
//! two content words so a masked one is recoverable from its partner:
//!
//! ```text
//! N1 had V N2 in the M P .      SV "N1 had V", DOBJ "V N2", POBJ "in the M P"
//! M1 N1 was R A at the M2 P .   SV "M1 N1 was", COMP "was R A", POBJ "at the M2 P"
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::chunker::{chunk_corpus, AgreementType, ChunkDataset, SpanMode};
use crate::conllu::{to_conllu, ParsedSentence};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

const FUNCTION_WORDS: [&str; 6] = ["had", "in", "the", "was", "at", "."];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// `N1 had V N2 in the M P .`
    Have,
    /// `M1 N1 was R A at the M2 P .`
    Be,
}

impl Template {
    /// Content slots to fill, left to right.
    pub fn slots(self) -> usize {
        match self {
            Template::Have => 5,
            Template::Be => 6,
        }
    }
}

/// Builds a template sentence. `subject_rel` labels the first word, so
/// `"dep"` yields a sentence with no SV chunk and otherwise identical chunks.
pub fn template_sentence(id: &str, template: Template, words: &[&str], subject_rel: &str) -> Result<ParsedSentence> {
    if words.len() != template.slots() {
        return Err(Error::Invalid(format!(
            "template {template:?} takes {} words, got {}",
            template.slots(),
            words.len()
        )));
    }
    match template {
        Template::Have => ParsedSentence::from_triples(
            id,
            &[
                (words[0], 3, subject_rel),
                ("had", 3, "aux"),
                (words[1], 0, "root"),
                (words[2], 3, "dobj"),
                ("in", 3, "prep"),
                ("the", 8, "det"),
                (words[3], 8, "amod"),
                (words[4], 5, "pobj"),
                (".", 3, "punct"),
            ],
        ),
        Template::Be => ParsedSentence::from_triples(
            id,
            &[
                (words[0], 2, "amod"),
                (words[1], 3, subject_rel),
                ("was", 0, "root"),
                (words[2], 5, "advmod"),
                (words[3], 3, "acomp"),
                ("at", 3, "prep"),
                ("the", 9, "det"),
                (words[4], 9, "amod"),
                (words[5], 6, "pobj"),
                (".", 3, "punct"),
            ],
        ),
    }
}

/// `n` distinct pronounceable pseudo-words, none equal to a template word.
pub fn pseudo_words(n: usize, rng: &mut Rng) -> Vec<String> {
    let mut seen: HashSet<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                let o = ONSETS[rng.random_range(0..ONSETS.len())];
                let v = VOWELS[rng.random_range(0..VOWELS.len())];
                format!("{o}{v}")
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn template_for(i: usize) -> Template {
    if i.is_multiple_of(2) {
        Template::Have
    } else {
        Template::Be
    }
}

/// `n` sentences alternating the two templates, every content word unique
/// to its sentence.
pub fn memorization_corpus(n: usize, seed: u64) -> Vec<ParsedSentence> {
    let mut rng = stream(seed, "synth/memorization");
    let words = pseudo_words(n * 6, &mut rng);
    let mut next = words.iter();
    (0..n)
        .map(|i| {
            let t = template_for(i);
            let w: Vec<&str> = next.by_ref().take(t.slots()).map(String::as_str).collect();
            template_sentence(&format!("toy-{i}"), t, &w, "nsubj").expect("template parse is valid")
        })
        .collect()
}

/// First `n` chunks of one agreement drawn from a memorization corpus.
pub fn chunk_toy_dataset(agreement: AgreementType, n: usize, seed: u64) -> ChunkDataset {
    let per_sentence = match agreement {
        AgreementType::Sv | AgreementType::Pobj => 1,
        AgreementType::Dobj | AgreementType::Comp => 2,
    };
    let corpus = memorization_corpus(n * per_sentence, seed);
    let all = chunk_corpus(corpus.iter(), SpanMode::Subtree);
    let mut out = ChunkDataset::new(agreement);
    for c in all.get(agreement).chunks().iter().take(n) {
        out.push(c.clone()).expect("agreement matches");
    }
    out
}

/// Corpus over a class-structured lexicon: each sentence draws every content
/// word from the same one of `classes` word classes, so a masked content
/// word is predictable from the other words of its chunk.
pub fn lexicon_corpus(n: usize, classes: usize, seed: u64) -> Vec<ParsedSentence> {
    const PER_SLOT: usize = 3;
    const SLOTS: usize = 6;
    let mut rng = stream(seed, "synth/lexicon");
    let words = pseudo_words(classes * SLOTS * PER_SLOT, &mut rng);
    (0..n)
        .map(|i| {
            let t = template_for(i);
            let class = rng.random_range(0..classes);
            let w: Vec<&str> = (0..t.slots())
                .map(|slot| words[(class * SLOTS + slot) * PER_SLOT + rng.random_range(0..PER_SLOT)].as_str())
                .collect();
            template_sentence(&format!("lex-{i}"), t, &w, "nsubj").expect("template parse is valid")
        })
        .collect()
}

/// One example of the subject-detection task.
#[derive(Debug, Clone, PartialEq)]
pub struct SvExample {
    pub sentence: ParsedSentence,
    pub label: usize,
}

/// Binary task whose label is whether the first word is parsed as the
/// subject. Both classes share the same surface distribution and the same
/// DOBJ, POBJ and COMP chunks; only the SV chunk tells them apart.
pub fn sv_task(n: usize, lexicon: &[String], seed: u64, tag: &str) -> Result<Vec<SvExample>> {
    if lexicon.is_empty() {
        return Err(Error::Invalid("empty lexicon".into()));
    }
    let mut rng = stream(seed, &format!("synth/sv-task/{tag}"));
    (0..n)
        .map(|i| {
            let t = template_for(rng.random_range(0..2));
            let w: Vec<&str> = (0..t.slots())
                .map(|_| lexicon[rng.random_range(0..lexicon.len())].as_str())
                .collect();
            let label = rng.random_range(0..2);
            let rel = if label == 1 { "nsubj" } else { "dep" };
            let sentence = template_sentence(&format!("{i}-a"), t, &w, rel)?;
            Ok(SvExample { sentence, label })
        })
        .collect()
}

/// Content words of a corpus, in first-seen order.
pub fn content_words(corpus: &[ParsedSentence]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in corpus {
        for t in &s.tokens {
            if !FUNCTION_WORDS.contains(&t.form.as_str()) && seen.insert(t.form.clone()) {
                out.push(t.form.clone());
            }
        }
    }
    out
}

/// Task rows as `text_a<TAB>label` TSV.
pub fn task_tsv(examples: &[SvExample]) -> String {
    let mut out = String::from("text_a\tlabel\n");
    for e in examples {
        out.push_str(&e.sentence.forms().join(" "));
        out.push('\t');
        out.push_str(&e.label.to_string());
        out.push('\n');
    }
    out
}

/// Sizes of the generated toy bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToySizes {
    pub corpus: usize,
    pub train: usize,
    pub dev: usize,
}

impl Default for ToySizes {
    fn default() -> Self {
        ToySizes {
            corpus: 32,
            train: 256,
            dev: 128,
        }
    }
}

/// Writes `corpus.conllu`, `lexicon.conllu`, and the subject-detection task
/// (`sv_{train,dev}.tsv` with matching `sv_{train,dev}.conllu` parses) into
/// `dir`. Returns the written paths.
pub fn write_toy_bundle(dir: &Path, sizes: ToySizes, seed: u64) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let corpus = memorization_corpus(sizes.corpus, seed);
    let lexicon = content_words(&corpus);
    let lex = lexicon_corpus(512, 8, seed);
    let train = sv_task(sizes.train, &lexicon, seed, "train")?;
    let dev = sv_task(sizes.dev, &lexicon, seed, "dev")?;
    let parses = |ex: &[SvExample]| to_conllu(&ex.iter().map(|e| e.sentence.clone()).collect::<Vec<_>>());
    let files = [
        ("corpus.conllu", to_conllu(&corpus)),
        ("lexicon.conllu", to_conllu(&lex)),
        ("sv_train.tsv", task_tsv(&train)),
        ("sv_train.conllu", parses(&train)),
        ("sv_dev.tsv", task_tsv(&dev)),
        ("sv_dev.conllu", parses(&dev)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::chunks_of;

    #[test]
    fn templates_yield_expected_chunks() {
        let have = template_sentence("h", Template::Have, &["bo", "ka", "mi", "re", "tu"], "nsubj").unwrap();
        let texts: Vec<String> = chunks_of(&have).into_iter().map(|c| c.text).collect();
        assert_eq!(texts, ["bo had ka", "ka mi", "in the re tu"]);
        let be = template_sentence("b", Template::Be, &["bo", "ka", "mi", "re", "su", "tu"], "nsubj").unwrap();
        let texts: Vec<String> = chunks_of(&be).into_iter().map(|c| c.text).collect();
        assert_eq!(texts, ["bo ka was", "at the su tu", "was mi re"]);
    }

    #[test]
    fn dep_subject_removes_only_sv() {
        let w = ["bo", "ka", "mi", "re", "su", "tu"];
        let with = template_sentence("x", Template::Be, &w, "nsubj").unwrap();
        let without = template_sentence("x", Template::Be, &w, "dep").unwrap();
        let a = chunks_of(&with);
        let b = chunks_of(&without);
        assert_eq!(a.len(), b.len() + 1);
        assert!(b.iter().all(|c| c.agreement != AgreementType::Sv));
        assert_eq!(&a[1..], &b[..]);
    }

    #[test]
    fn toy_datasets_have_requested_size() {
        for a in AgreementType::ALL {
            let d = chunk_toy_dataset(a, 32, 1);
            assert_eq!(d.len(), 32, "{a}");
        }
    }

    #[test]
    fn memorization_words_are_unique() {
        let corpus = memorization_corpus(40, 3);
        let words = content_words(&corpus);
        let slots: usize = (0..40).map(|i| template_for(i).slots()).sum();
        assert_eq!(words.len(), slots);
    }

    #[test]
    fn sv_task_is_balanced_enough() {
        let lex = content_words(&memorization_corpus(32, 0));
        let ex = sv_task(400, &lex, 0, "t").unwrap();
        let ones = ex.iter().filter(|e| e.label == 1).count();
        assert!((150..250).contains(&ones), "{ones}");
    }
}
