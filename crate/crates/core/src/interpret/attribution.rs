use std::fmt::Write as _;
use std::io::Write;

use crate::chunker::{AgreementChunk, AgreementType, SpanMode};
use crate::conllu::ParsedSentence;
use crate::error::{Error, Result};
use crate::fusion::{Segment, Stage2Model};
use crate::nn::Graph;
use crate::tokenizer::{is_special, Vocabulary};
use crate::Scalar;

/// How the scores in an [`AttributionReport`] are computed.
pub const ATTRIBUTION_LABEL: &str = "attention received, final submodel layer, head-averaged, max-normalized";

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionReport {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    /// Per agreement, one score in [0, 1] per token.
    pub scores: [Vec<f64>; 4],
    pub chunks: Vec<AgreementChunk>,
}

impl AttributionReport {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn row(&self, a: AgreementType) -> &[f64] {
        &self.scores[a.index()]
    }
}

/// Column sums of the head-averaged attention matrix, `heads x m x m`.
/// Every softmax row sums to one, so the result sums to `m`.
fn attention_received<T: Scalar>(heads: usize, probs: &[T], m: usize) -> Result<Vec<f64>> {
    let mut received = vec![0.0; m];
    for h in 0..heads {
        for i in 0..m {
            for (j, r) in received.iter_mut().enumerate() {
                *r += probs[(h * m + i) * m + j].as_f64();
            }
        }
    }
    for r in &mut received {
        *r /= heads as f64;
    }
    let total: f64 = received.iter().sum();
    if (total - m as f64).abs() > 1e-3 * m as f64 {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("attention columns sum to {total}, expected {m}"),
        });
    }
    Ok(received)
}

/// Raw (unnormalized) attribution of `chunks` over the words of one
/// sentence, accumulated per agreement.
pub fn raw_attribution<T: Scalar>(
    model: &Stage2Model<T>,
    vocab: &Vocabulary,
    words: &[String],
    chunks: &[AgreementChunk],
) -> Result<[Vec<f64>; 4]> {
    let fusion = model
        .fusion()
        .ok_or_else(|| Error::Invalid("attribution needs a model with submodels".into()))?;
    let limits = fusion.sub_max_len();
    let mut raw: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; words.len()]);
    for c in chunks {
        if c.start == 0 || c.end > words.len() || c.start > c.end {
            return Err(Error::InvalidSentence {
                id: c.sentence_id.clone(),
                message: format!("chunk [{}, {}] outside {} words", c.start, c.end, words.len()),
            });
        }
        let enc = vocab.encode_words(&words[c.start - 1..c.end], limits[c.agreement.index()], true);
        let mut g = Graph::new();
        let bound = model.store.bind(&mut g);
        let out = fusion
            .submodel(c.agreement)
            .forward(&mut g, &bound, &enc.ids, None, None, None)?;
        let last = *out
            .attention
            .last()
            .ok_or_else(|| Error::Invalid("submodel has no layers".into()))?;
        let (heads, probs) = g.attention_probs(last).expect("attention node");
        let m = enc.ids.len();
        let received = attention_received(heads, probs, m)?;
        let row = &mut raw[c.agreement.index()];
        for (k, span) in enc.word_spans.iter().enumerate() {
            let Some(span) = span else { continue };
            let mean: f64 = span
                .positions()
                .filter(|&p| !is_special(enc.ids[p]))
                .map(|p| received[p] / m as f64)
                .sum();
            row[c.start - 1 + k] += mean;
        }
    }
    Ok(raw)
}

/// Divides each agreement row by its maximum; all-zero rows stay zero.
pub fn max_normalize(raw: &mut [Vec<f64>; 4]) {
    for row in raw.iter_mut() {
        let max = row.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            for v in row.iter_mut() {
                *v /= max;
            }
        }
    }
}

/// Per-agreement token attribution of one parsed sentence.
pub fn attention_attribution<T: Scalar>(
    model: &Stage2Model<T>,
    sentence: &ParsedSentence,
    vocab: &Vocabulary,
) -> Result<AttributionReport> {
    let mode = model.fusion().map(|f| f.options.span_mode).unwrap_or(SpanMode::Subtree);
    let seg = Segment::from_sentence(sentence, mode);
    let mut scores = raw_attribution(model, vocab, &seg.words, &seg.chunks)?;
    max_normalize(&mut scores);
    Ok(AttributionReport {
        sentence_id: seg.id,
        tokens: seg.words,
        scores,
        chunks: seg.chunks,
    })
}

/// `token,agreement,score` rows, four per token of every report.
pub fn write_attribution_csv<W: Write>(w: W, reports: &[AttributionReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["token", "agreement", "score"])?;
    for r in reports {
        for a in AgreementType::ALL {
            for (tok, s) in r.tokens.iter().zip(r.row(a)) {
                out.write_record([tok.as_str(), a.name(), &s.to_string()])?;
            }
        }
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Static page shading each token by its score, one row per agreement.
pub fn render_html(reports: &[AttributionReport]) -> String {
    let mut html = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Agreement attribution</title>\n<style>\n\
         body { font-family: sans-serif; }\n\
         td.tok { padding: 2px 6px; }\n\
         th { text-align: left; padding-right: 12px; }\n\
         </style>\n</head>\n<body>\n",
    );
    let _ = writeln!(html, "<p>Score: {}.</p>", escape(ATTRIBUTION_LABEL));
    for r in reports {
        let _ = writeln!(html, "<h3>{}</h3>\n<table>", escape(&r.sentence_id));
        for a in AgreementType::ALL {
            let _ = write!(html, "<tr><th>{}</th>", a.name());
            for (tok, &s) in r.tokens.iter().zip(r.row(a)) {
                let alpha = if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.0 };
                let _ = write!(
                    html,
                    "<td class=\"tok\" title=\"{s:.4}\" style=\"background-color: rgba(200, 40, 40, {alpha:.4})\">{}</td>",
                    escape(tok)
                );
            }
            html.push_str("</tr>\n");
        }
        html.push_str("</table>\n");
    }
    html.push_str("</body>\n</html>\n");
    html
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionOptions;
    use crate::nn::ModelShape;
    use crate::pretrain::SubmodelCheckpoint;
    use crate::synth::{template_sentence, Template};

    fn setup() -> (Vocabulary, Stage2Model<f64>) {
        let v = Vocabulary::with_words(&["bo", "ka", "mi", "re", "tu", "had", "in", "the", "."]).unwrap();
        let subs: Vec<_> = AgreementType::ALL
            .iter()
            .map(|&a| SubmodelCheckpoint::fresh(a, ModelShape::new(2, 8, 2).to_config(v.len(), 12), 4).unwrap())
            .collect();
        let cfg = ModelShape::new(1, 8, 2).to_config(v.len(), 32);
        let m = Stage2Model::new(&cfg, Some((subs.as_slice(), FusionOptions::default())), 1).unwrap();
        (v, m)
    }

    #[test]
    fn scores_cover_chunks_only() {
        let (v, m) = setup();
        let s = template_sentence("s", Template::Have, &["bo", "ka", "mi", "re", "tu"], "nsubj").unwrap();
        let r = attention_attribution(&m, &s, &v).unwrap();
        assert_eq!(r.tokens.len(), 9);
        assert_eq!(r.row(AgreementType::Comp), &[0.0; 9]);
        let sv = r.row(AgreementType::Sv);
        assert!(sv[..3].iter().all(|&x| x > 0.0));
        assert!(sv[3..].iter().all(|&x| x == 0.0));
        for a in AgreementType::ALL {
            let max = r.row(a).iter().cloned().fold(0.0, f64::max);
            assert!(max == 0.0 || max == 1.0);
        }
    }

    #[test]
    fn single_token_chunk_scores_one() {
        let (v, m) = setup();
        let s = ParsedSentence::from_triples("x", &[("bo", 2, "nsubj"), ("ka", 0, "root")]).unwrap();
        let mut chunks = crate::chunker::chunks_of(&s);
        chunks[0].start = 1;
        chunks[0].end = 1;
        let mut raw = raw_attribution(&m, &v, &s.forms(), &chunks).unwrap();
        max_normalize(&mut raw);
        assert_eq!(raw[0], vec![1.0, 0.0]);
    }

    #[test]
    fn received_sums_to_rows() {
        let probs = [0.5, 0.5, 0.2, 0.8, 1.0, 0.0, 0.3, 0.7];
        let r = attention_received(2, &probs, 2).unwrap();
        assert!((r.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(attention_received(1, &[0.5, 0.5, 0.5, 0.0], 2).is_err());
    }

    #[test]
    fn csv_rows_and_empty_header() {
        let mut buf = Vec::new();
        write_attribution_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "token,agreement,score\n");
        let r = AttributionReport {
            sentence_id: "s".into(),
            tokens: vec!["a".into(), "b".into(), "c".into()],
            scores: std::array::from_fn(|_| vec![0.0, 0.5, 1.0]),
            chunks: vec![],
        };
        let mut buf = Vec::new();
        write_attribution_csv(&mut buf, &[r]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3 * 4);
    }

    #[test]
    fn html_clips_opacity() {
        let r = AttributionReport {
            sentence_id: "<s>".into(),
            tokens: vec!["a".into(), "b".into()],
            scores: std::array::from_fn(|_| vec![1.7, -0.2]),
            chunks: vec![],
        };
        let html = render_html(&[r]);
        assert!(html.contains("rgba(200, 40, 40, 1.0000)"));
        assert!(html.contains("rgba(200, 40, 40, 0.0000)"));
        assert!(html.contains("&lt;s&gt;"));
        assert!(html.contains(ATTRIBUTION_LABEL));
    }
}
