mod common;

use common::{brute_percentile, oracle_chunks, table1_sentences, tree};
use dacbert::chunker::{chunk_sentence, chunks_of, extract_chunk, nearest_rank, AgreementType, SpanMode};
use dacbert::conllu::{children_index, parse_conllu, to_conllu};
use proptest::prelude::*;

#[test]
fn table1_chunks() {
    let texts: Vec<String> = table1_sentences().iter().flat_map(chunks_of).map(|c| c.text).collect();
    assert_eq!(
        texts,
        [
            "Davis had seen",
            "seen Mason",
            "in the bar",
            "Davis was",
            "at the office",
            "was very busy"
        ]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn chunker_matches_oracle(s in tree(10)) {
        let cm = children_index(&s);
        let mut got: Vec<_> = chunk_sentence(&s, &cm, SpanMode::Subtree)
            .chunks
            .into_iter()
            .map(|c| (c.agreement, c.trigger_index, c.start, c.end))
            .collect();
        got.sort();
        prop_assert_eq!(got, oracle_chunks(&s));
    }

    #[test]
    fn chunk_spans_are_well_formed(s in tree(10)) {
        let cm = children_index(&s);
        for c in chunk_sentence(&s, &cm, SpanMode::Subtree).chunks {
            let head = s.token(c.trigger_index).head;
            prop_assert!(1 <= c.start && c.start <= c.end && c.end <= s.len());
            prop_assert!(c.covers(c.trigger_index) && c.covers(head));
            prop_assert_eq!(c.text.split(' ').count(), c.word_len());
        }
    }

    #[test]
    fn direct_children_spans_nest_in_subtree_spans(s in tree(10)) {
        let cm = children_index(&s);
        for t in &s.tokens {
            for a in AgreementType::ALL {
                if !a.triggers_on(&t.deprel) {
                    continue;
                }
                let wide = extract_chunk(&s, &cm, t.index, a, SpanMode::Subtree).unwrap();
                let narrow = extract_chunk(&s, &cm, t.index, a, SpanMode::DirectChildren).unwrap();
                if let (Some(w), Some(n)) = (wide, narrow) {
                    prop_assert!(w.start <= n.start && n.end <= w.end);
                }
            }
        }
    }

    #[test]
    fn child_map_inverts_heads(s in tree(12)) {
        let cm = children_index(&s);
        for t in &s.tokens {
            if t.head == 0 {
                prop_assert!(cm.roots().contains(&t.index));
            } else {
                prop_assert!(cm.children(t.head).contains(&t.index));
            }
        }
        let edges: usize = (1..=s.len()).map(|i| cm.children(i).len()).sum();
        prop_assert_eq!(edges + cm.roots().len(), s.len());
        for i in 1..=s.len() {
            for &c in cm.children(i) {
                prop_assert_eq!(s.token(c).head, i);
            }
        }
    }

    #[test]
    fn conllu_round_trip(sents in proptest::collection::vec(tree(8), 1..5)) {
        let sents: Vec<_> = sents
            .into_iter()
            .enumerate()
            .map(|(i, mut s)| { s.id = format!("s{i}"); s })
            .collect();
        let text = to_conllu(&sents);
        let back = parse_conllu(text.as_bytes(), true).unwrap();
        prop_assert!(back.rejected.is_empty());
        prop_assert_eq!(back.sentences, sents);
    }

    #[test]
    fn percentile_matches_brute_force(
        values in proptest::collection::vec(1usize..40, 1..500),
        p in prop_oneof![(1u32..=100).prop_map(f64::from), 0.001f64..=100.0],
    ) {
        prop_assert_eq!(nearest_rank(&values, p).unwrap(), brute_percentile(&values, p));
    }
}

#[test]
fn percentile_examples() {
    assert_eq!(nearest_rank(&[3, 3, 3], 50.0).unwrap(), 3);
    assert_eq!(nearest_rank(&[2, 2, 3, 10], 75.0).unwrap(), 3);
    assert_eq!(nearest_rank(&(1..=100).collect::<Vec<_>>(), 7.0).unwrap(), 7);
    assert!(nearest_rank(&[], 50.0).is_err());
    assert!(nearest_rank(&[1], 0.0).is_err());
}
