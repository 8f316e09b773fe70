#![allow(dead_code)]

pub mod fd;

use std::collections::BTreeSet;

use dacbert::chunker::AgreementType;
use dacbert::ParsedSentence;
use proptest::prelude::*;

pub const DEPRELS: [&str; 16] = [
    "nsubj",
    "nsubjpass",
    "csubj",
    "dobj",
    "pobj",
    "acomp",
    "xcomp",
    "ccomp",
    "pcomp",
    "attr",
    "det",
    "amod",
    "prep",
    "aux",
    "advmod",
    "punct",
];

/// Random dependency tree: a random attachment order where every token but
/// the first attaches to a token placed before it.
pub fn tree(max_len: usize) -> impl Strategy<Value = ParsedSentence> {
    (1..=max_len)
        .prop_flat_map(|n| {
            (
                Just(n).prop_shuffle_indices(),
                proptest::collection::vec(any::<prop::sample::Index>(), n),
                proptest::collection::vec(0..DEPRELS.len(), n),
            )
        })
        .prop_map(|(order, picks, rels)| {
            let n = order.len();
            let mut heads = vec![0; n];
            for k in 1..n {
                heads[order[k]] = order[picks[k].index(k)] + 1;
            }
            let forms: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let triples: Vec<(&str, usize, &str)> = (0..n)
                .map(|i| {
                    let rel = if heads[i] == 0 { "root" } else { DEPRELS[rels[i]] };
                    (forms[i].as_str(), heads[i], rel)
                })
                .collect();
            ParsedSentence::from_triples("t", &triples).expect("generated tree is valid")
        })
}

trait ShuffleIndices {
    fn prop_shuffle_indices(self) -> BoxedStrategy<Vec<usize>>;
}

impl ShuffleIndices for Just<usize> {
    fn prop_shuffle_indices(self) -> BoxedStrategy<Vec<usize>> {
        Just((0..self.0).collect::<Vec<usize>>()).prop_shuffle().boxed()
    }
}

/// Positions dominated by `t` (itself included), by walking every head chain.
pub fn subtree(s: &ParsedSentence, t: usize) -> BTreeSet<usize> {
    (1..=s.len())
        .filter(|&j| {
            let mut cur = j;
            loop {
                if cur == t {
                    return true;
                }
                if cur == 0 {
                    return false;
                }
                cur = s.tokens[cur - 1].head;
            }
        })
        .collect()
}

/// Brute-force chunk of a trigger: the longest run of subtree positions
/// ending at `t`, widened to include the head.
pub fn oracle_span(s: &ParsedSentence, t: usize) -> Option<(usize, usize)> {
    let h = s.tokens[t - 1].head;
    if h == 0 {
        return None;
    }
    let sub = subtree(s, t);
    let left = (1..=t)
        .find(|&l| (l..=t).all(|p| sub.contains(&p)))
        .expect("t itself is in its subtree");
    Some((left.min(h), t.max(h)))
}

/// Every (agreement, trigger, start, end) the oracle expects, sorted.
pub fn oracle_chunks(s: &ParsedSentence) -> Vec<(AgreementType, usize, usize, usize)> {
    let mut out = Vec::new();
    for a in AgreementType::ALL {
        for t in &s.tokens {
            if a.trigger_set().contains(&t.deprel.as_str()) {
                if let Some((start, end)) = oracle_span(s, t.index) {
                    out.push((a, t.index, start, end));
                }
            }
        }
    }
    out.sort();
    out
}

pub fn table1_sentences() -> [ParsedSentence; 2] {
    [
        ParsedSentence::from_triples(
            "ex1",
            &[
                ("Davis", 3, "nsubj"),
                ("had", 3, "aux"),
                ("seen", 0, "root"),
                ("Mason", 3, "dobj"),
                ("in", 3, "prep"),
                ("the", 7, "det"),
                ("bar", 5, "pobj"),
            ],
        )
        .unwrap(),
        ParsedSentence::from_triples(
            "ex2",
            &[
                ("Davis", 2, "nsubj"),
                ("was", 0, "root"),
                ("very", 4, "advmod"),
                ("busy", 2, "acomp"),
                ("at", 2, "prep"),
                ("the", 7, "det"),
                ("office", 5, "pobj"),
            ],
        )
        .unwrap(),
    ]
}

/// Sort-and-index nearest-rank percentile.
pub fn brute_percentile(values: &[usize], p: f64) -> usize {
    let mut v = values.to_vec();
    v.sort();
    for (i, &x) in v.iter().enumerate() {
        if (i + 1) as f64 * 100.0 >= p * v.len() as f64 {
            return x;
        }
    }
    *v.last().unwrap()
}
