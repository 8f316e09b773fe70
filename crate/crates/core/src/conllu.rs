//! CoNLL-U ingestion into validated dependency parses.

use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedToken {
    /// 1-based word position.
    pub index: usize,
    pub form: String,
    /// Head word position, 0 for the root.
    pub head: usize,
    /// Lowercased dependency label.
    pub deprel: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSentence {
    pub id: String,
    pub tokens: Vec<ParsedToken>,
}

impl ParsedSentence {
    /// Builds a sentence from `(form, head, deprel)` triples, assigning indices 1..n.
    pub fn from_triples(id: impl Into<String>, triples: &[(&str, usize, &str)]) -> Result<Self> {
        let tokens = triples
            .iter()
            .enumerate()
            .map(|(i, (form, head, deprel))| ParsedToken {
                index: i + 1,
                form: (*form).to_string(),
                head: *head,
                deprel: deprel.to_lowercase(),
            })
            .collect();
        let sentence = ParsedSentence { id: id.into(), tokens };
        sentence.validate()?;
        Ok(sentence)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token at a 1-based position.
    pub fn token(&self, index: usize) -> &ParsedToken {
        &self.tokens[index - 1]
    }

    pub fn forms(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.form.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::InvalidSentence {
            id: self.id.clone(),
            message,
        };
        let n = self.tokens.len();
        if n == 0 {
            return Err(fail("sentence has no tokens".into()));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.index != i + 1 {
                return Err(fail(format!("expected token index {}, found {}", i + 1, t.index)));
            }
            if t.head > n {
                return Err(fail(format!("token {} has out-of-range head {}", t.index, t.head)));
            }
            if t.head == t.index {
                return Err(fail(format!("token {} is its own head", t.index)));
            }
            if t.deprel.is_empty() {
                return Err(fail(format!("token {} has an empty deprel", t.index)));
            }
        }
        if !self.tokens.iter().any(|t| t.head == 0) {
            return Err(fail("no token attaches to the root".into()));
        }
        for t in &self.tokens {
            let mut cur = t.index;
            let mut steps = 0;
            while cur != 0 {
                cur = self.tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err(fail(format!("head links from token {} form a cycle", t.index)));
                }
            }
        }
        Ok(())
    }
}

/// Direct dependents of every token, ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChildMap {
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
}

impl ChildMap {
    pub fn children(&self, index: usize) -> &[usize] {
        &self.children[index - 1]
    }

    pub fn roots(&self) -> &[usize] {
        &self.roots
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    /// Whether `node` is `ancestor` or a transitive dependent of it.
    pub fn in_subtree(&self, sentence: &ParsedSentence, ancestor: usize, node: usize) -> bool {
        let mut cur = node;
        for _ in 0..=sentence.len() {
            if cur == ancestor {
                return true;
            }
            if cur == 0 {
                return false;
            }
            cur = sentence.token(cur).head;
        }
        false
    }
}

pub fn children_index(sentence: &ParsedSentence) -> ChildMap {
    let n = sentence.len();
    let mut children = vec![Vec::new(); n];
    let mut roots = Vec::new();
    // tokens are visited in index order, so each list comes out sorted
    for t in &sentence.tokens {
        if t.head == 0 {
            roots.push(t.index);
        } else {
            children[t.head - 1].push(t.index);
        }
    }
    ChildMap { children, roots }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub line: usize,
    pub sentence_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub sentences: Vec<ParsedSentence>,
    pub rejected: Vec<Rejection>,
}

#[derive(Default)]
struct Block {
    id: Option<String>,
    start_line: usize,
    tokens: Vec<ParsedToken>,
    error: Option<(usize, String)>,
}

/// Reads CoNLL-U text. In strict mode the first bad record or sentence is an
/// error; otherwise bad sentences are skipped and reported in `rejected`.
pub fn parse_conllu<R: BufRead>(reader: R, strict: bool) -> Result<IngestOutcome> {
    let mut out = IngestOutcome::default();
    let mut block = Block::default();
    let mut counter = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Record {
            line: lineno,
            message: format!("unreadable line: {e}"),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);

        if line.trim().is_empty() {
            finish_block(&mut block, &mut out, &mut counter, strict)?;
            continue;
        }
        if block.tokens.is_empty() && block.error.is_none() && block.start_line == 0 {
            block.start_line = lineno;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(rest) = comment.trim_start().strip_prefix("sent_id") {
                let id = rest.trim_start().trim_start_matches('=').trim();
                if !id.is_empty() {
                    block.id = Some(id.to_string());
                }
            }
            continue;
        }
        if block.error.is_some() {
            continue;
        }
        match parse_token_line(line) {
            Ok(Some(token)) => block.tokens.push(token),
            Ok(None) => {}
            Err(message) => {
                if strict {
                    return Err(Error::Record { line: lineno, message });
                }
                block.error = Some((lineno, message));
            }
        }
    }
    finish_block(&mut block, &mut out, &mut counter, strict)?;
    Ok(out)
}

fn finish_block(block: &mut Block, out: &mut IngestOutcome, counter: &mut usize, strict: bool) -> Result<()> {
    let b = std::mem::take(block);
    if b.tokens.is_empty() && b.error.is_none() {
        return Ok(());
    }
    *counter += 1;
    let id = b.id.unwrap_or_else(|| counter.to_string());
    if let Some((line, message)) = b.error {
        out.rejected.push(Rejection {
            line,
            sentence_id: Some(id),
            message,
        });
        return Ok(());
    }
    let sentence = ParsedSentence { id, tokens: b.tokens };
    match sentence.validate() {
        Ok(()) => out.sentences.push(sentence),
        Err(e) if strict => return Err(e),
        Err(e) => out.rejected.push(Rejection {
            line: b.start_line,
            sentence_id: Some(sentence.id),
            message: e.to_string(),
        }),
    }
    Ok(())
}

fn parse_token_line(line: &str) -> std::result::Result<Option<ParsedToken>, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 10 {
        return Err(format!("expected 10 tab-separated columns, found {}", cols.len()));
    }
    let id = cols[0];
    // multiword ranges and empty nodes carry no head
    if id.contains('-') || id.contains('.') {
        return Ok(None);
    }
    let index: usize = id.parse().map_err(|_| format!("non-integer ID {id:?}"))?;
    if index == 0 {
        return Err("token ID must be at least 1".into());
    }
    let head: usize = cols[6].parse().map_err(|_| format!("non-integer HEAD {:?}", cols[6]))?;
    Ok(Some(ParsedToken {
        index,
        form: cols[1].to_string(),
        head,
        deprel: cols[7].to_lowercase(),
    }))
}

/// Writes sentences back as CoNLL-U; unused columns are `_`.
pub fn to_conllu(sentences: &[ParsedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        let _ = writeln!(out, "# sent_id = {}", s.id);
        for t in &s.tokens {
            let _ = writeln!(
                out,
                "{}\t{}\t_\t_\t_\t_\t{}\t{}\t_\t_",
                t.index, t.form, t.head, t.deprel
            );
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAVIS: &str = "# sent_id = ex1
# text = Davis had seen Mason in the bar .
1\tDavis\tDavis\tPROPN\tNNP\t_\t3\tnsubj\t_\t_
2\thad\thave\tAUX\tVBD\t_\t3\taux\t_\t_
3\tseen\tsee\tVERB\tVBN\t_\t0\tROOT\t_\t_
4\tMason\tMason\tPROPN\tNNP\t_\t3\tdobj\t_\t_
5\tin\tin\tADP\tIN\t_\t3\tprep\t_\t_
6\tthe\tthe\tDET\tDT\t_\t7\tdet\t_\t_
7\tbar\tbar\tNOUN\tNN\t_\t5\tpobj\t_\t_
8\t.\t.\tPUNCT\t.\t_\t3\tpunct\t_\t_
";

    #[test]
    fn empty_stream() {
        let out = parse_conllu("".as_bytes(), true).unwrap();
        assert!(out.sentences.is_empty());
        assert!(out.rejected.is_empty());
    }

    #[test]
    fn davis_round_trip() {
        let out = parse_conllu(DAVIS.as_bytes(), true).unwrap();
        assert_eq!(out.sentences.len(), 1);
        let s = &out.sentences[0];
        assert_eq!(s.id, "ex1");
        let triples: Vec<_> = s
            .tokens
            .iter()
            .map(|t| (t.form.as_str(), t.head, t.deprel.as_str()))
            .collect();
        assert_eq!(
            triples[..7],
            [
                ("Davis", 3, "nsubj"),
                ("had", 3, "aux"),
                ("seen", 0, "root"),
                ("Mason", 3, "dobj"),
                ("in", 3, "prep"),
                ("the", 7, "det"),
                ("bar", 5, "pobj"),
            ]
        );
        let again = parse_conllu(to_conllu(&out.sentences).as_bytes(), true).unwrap();
        assert_eq!(again.sentences, out.sentences);
    }

    #[test]
    fn crlf_comments_ranges_and_empty_nodes() {
        let text = "# sent_id = a\r\n1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\r\n1\tdo\t_\t_\t_\t_\t0\troot\t_\t_\r\n2\tn't\t_\t_\t_\t_\t1\tneg\t_\t_\r\n2.1\tx\t_\t_\t_\t_\t_\t_\t_\t_\r\n\r\n1\tyes\t_\t_\t_\t_\t0\tROOT\t_\t_\n";
        let out = parse_conllu(text.as_bytes(), true).unwrap();
        assert_eq!(out.sentences.len(), 2);
        assert_eq!(out.sentences[0].len(), 2);
        assert_eq!(out.sentences[1].id, "2");
        assert_eq!(out.sentences[1].tokens[0].deprel, "root");
    }

    #[test]
    fn bad_head_column() {
        let text =
            "1\ta\t_\t_\t_\t_\t0\troot\t_\t_\n2\tb\t_\t_\t_\t_\tx\tdep\t_\t_\n\n1\tok\t_\t_\t_\t_\t0\troot\t_\t_\n";
        match parse_conllu(text.as_bytes(), true) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected record error, got {other:?}"),
        }
        let lenient = parse_conllu(text.as_bytes(), false).unwrap();
        assert_eq!(lenient.sentences.len(), 1);
        assert_eq!(lenient.rejected.len(), 1);
        assert_eq!(lenient.rejected[0].line, 2);
    }

    #[test]
    fn wrong_column_count() {
        let text = "1\ta\t_\t0\troot\n";
        assert!(matches!(
            parse_conllu(text.as_bytes(), true),
            Err(Error::Record { line: 1, .. })
        ));
    }

    #[test]
    fn cycles_and_out_of_range_heads_rejected() {
        let cyc = "1\ta\t_\t_\t_\t_\t2\tdep\t_\t_\n2\tb\t_\t_\t_\t_\t1\tdep\t_\t_\n3\tc\t_\t_\t_\t_\t0\troot\t_\t_\n";
        assert!(matches!(
            parse_conllu(cyc.as_bytes(), true),
            Err(Error::InvalidSentence { .. })
        ));
        let far = "1\ta\t_\t_\t_\t_\t5\tdep\t_\t_\n2\tb\t_\t_\t_\t_\t0\troot\t_\t_\n";
        let out = parse_conllu(far.as_bytes(), false).unwrap();
        assert!(out.sentences.is_empty());
        assert_eq!(out.rejected.len(), 1);
    }

    #[test]
    fn children_of_davis() {
        let s = &parse_conllu(DAVIS.as_bytes(), true).unwrap().sentences[0];
        let cm = children_index(s);
        assert_eq!(cm.children(3), &[1, 2, 4, 5, 8]);
        assert_eq!(cm.children(7), &[6]);
        assert_eq!(cm.roots(), &[3]);
    }

    #[test]
    fn children_single_and_chain() {
        let single = ParsedSentence::from_triples("s", &[("a", 0, "root")]).unwrap();
        let cm = children_index(&single);
        assert_eq!(cm.len(), 1);
        assert!(cm.children(1).is_empty());

        let chain = ParsedSentence::from_triples("c", &[("a", 2, "dep"), ("b", 3, "dep"), ("c", 0, "root")]).unwrap();
        let cm = children_index(&chain);
        assert_eq!(cm.children(3), &[2]);
        assert_eq!(cm.children(2), &[1]);
        assert!(cm.children(1).is_empty());
    }
}
