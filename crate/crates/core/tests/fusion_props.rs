mod common;

use common::tree;
use dacbert::chunker::{AgreementType, SpanMode};
use dacbert::fusion::{encode_input, FusionOptions, Segment, Stage2Model};
use dacbert::interpret::{max_normalize, raw_attribution};
use dacbert::nn::{sinusoidal_positions, ModelShape, Tensor};
use dacbert::pretrain::SubmodelCheckpoint;
use dacbert::tokenizer::is_special;
use dacbert::{ParsedSentence, Vocabulary};
use proptest::prelude::*;

const POOL: [&str; 8] = ["bat", "batter", "cab", "cabbage", "dab", "ad", "tab", "abba"];

/// Random tree whose forms are drawn from a pool of words that split into
/// several pieces under a small vocabulary.
fn sentence(id: &'static str) -> impl Strategy<Value = ParsedSentence> {
    (tree(9), proptest::collection::vec(0..POOL.len(), 9)).prop_map(move |(mut s, picks)| {
        for (t, p) in s.tokens.iter_mut().zip(picks) {
            t.form = POOL[p].to_string();
        }
        s.id = id.to_string();
        s
    })
}

fn pool_vocab() -> Vocabulary {
    Vocabulary::build(["bat ab cab ad"], 40).unwrap()
}

proptest! {
    #[test]
    fn chunk_pieces_land_on_identical_sentence_pieces(
        a in sentence("0-a"),
        b in proptest::option::of(sentence("0-b")),
        max_len in 5usize..40,
        sub_len in 3usize..12,
    ) {
        let v = pool_vocab();
        let mut segs = vec![Segment::from_sentence(&a, SpanMode::Subtree)];
        segs.extend(b.as_ref().map(|b| Segment::from_sentence(b, SpanMode::Subtree)));
        let enc = encode_input(&v, &segs, max_len, Some(&[sub_len; 4])).unwrap();
        prop_assert!(enc.len() <= max_len);
        let total_chunks: usize = segs.iter().map(|s| s.chunks.len()).sum();
        prop_assert_eq!(enc.chunks.len(), total_chunks);
        let flat: Vec<_> = segs.iter().flat_map(|s| s.chunks.iter()).collect();
        let mut word_offset = Vec::new();
        let mut o = 0;
        for s in &segs {
            word_offset.extend(std::iter::repeat_n(o, s.chunks.len()));
            o += s.words.len();
        }
        for (ci, ch) in enc.chunks.iter().enumerate() {
            prop_assert!(ch.ids.len() <= sub_len);
            let c = flat[ci];
            let mut last = None;
            for (p, t) in ch.targets.iter().enumerate() {
                match t {
                    None => continue,
                    Some(q) => {
                        prop_assert!(!is_special(ch.ids[p]));
                        prop_assert_eq!(ch.ids[p], enc.tokens.ids[*q]);
                        prop_assert!(last.is_none_or(|l| *q > l));
                        last = Some(*q);
                        let inside = (c.start..=c.end).any(|w| {
                            enc.tokens.word_spans[word_offset[ci] + w - 1]
                                .is_some_and(|span| span.positions().contains(q))
                        });
                        prop_assert!(inside);
                    }
                }
            }
        }
    }
}

fn fused(v: &Vocabulary, opts: FusionOptions) -> Stage2Model<f64> {
    let subs: Vec<SubmodelCheckpoint<f64>> = AgreementType::ALL
        .iter()
        .map(|&a| SubmodelCheckpoint::fresh(a, ModelShape::new(2, 8, 2).to_config(v.len(), 12), 5).unwrap())
        .collect();
    Stage2Model::new(
        &ModelShape::new(1, 8, 2).to_config(v.len(), 64),
        Some((subs.as_slice(), opts)),
        6,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attribution_ignores_chunk_order(s in sentence("s"), seed in any::<u64>()) {
        let v = pool_vocab();
        let m = fused(&v, FusionOptions::default());
        let seg = Segment::from_sentence(&s, SpanMode::Subtree);
        let mut shuffled = seg.chunks.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7919) % (i + 1));
        }
        let mut a = raw_attribution(&m, &v, &seg.words, &seg.chunks).unwrap();
        let mut b = raw_attribution(&m, &v, &seg.words, &shuffled).unwrap();
        max_normalize(&mut a);
        max_normalize(&mut b);
        for k in 0..4 {
            for (x, y) in a[k].iter().zip(&b[k]) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(x));
            }
            let covered: Vec<bool> = (1..=seg.words.len())
                .map(|w| seg.chunks.iter().any(|c| c.agreement.index() == k && c.covers(w)))
                .collect();
            for (x, c) in a[k].iter().zip(covered) {
                if !c {
                    prop_assert_eq!(*x, 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_scores_give_token_plus_position_plus_offset(s in sentence("s")) {
        let v = pool_vocab();
        let mut m = fused(&v, FusionOptions::default());
        let scores = m.fusion().unwrap().scores_id();
        m.store.get_mut(scores).data_mut().fill(0.0);
        let offset = m.fusion().unwrap().norm().offset;
        for (k, x) in m.store.get_mut(offset).data_mut().iter_mut().enumerate() {
            *x = 0.1 * k as f64 - 0.3;
        }
        let input = m.encode(&v, &[Segment::from_sentence(&s, SpanMode::Subtree)]).unwrap();
        let fused = m.fused_input(&input).unwrap();
        let tok = m.store.get(m.main().token_embedding());
        let cfg = m.main().config();
        let pos: Tensor<f64> = sinusoidal_positions(input.len(), cfg.hidden_dim, cfg.position_scale()).unwrap();
        let off = m.store.get(offset).data().to_vec();
        for (p, &id) in input.tokens.ids.iter().enumerate() {
            for (c, &o) in off.iter().enumerate() {
                let want = tok.get(id, c) + pos.get(p, c) + o;
                prop_assert_eq!(fused.vectors.get(p, c), want);
            }
        }
    }
}
