//! The fused model: agreement submodels feeding a main encoder.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::input::{encode_input, EncodedInput, Segment};
use crate::chunker::{AgreementType, SpanMode};
use crate::error::{Error, Result};
use crate::nn::{
    bind_norm, init_norm, read_checkpoint, write_checkpoint, Bound, Encoder, Graph, ModelConfig, NormIds, ParamId,
    ParamKind, ParamStore, Tensor, Var,
};
use crate::pretrain::{SubmodelCheckpoint, TrainingMeta};
use crate::rng::{stream, Rng};
use crate::tokenizer::Vocabulary;
use crate::Scalar;

pub const MAIN_PREFIX: &str = "main.";
pub const FUSION_LN: &str = "fusion.ln";
pub const FUSION_SCORES: &str = "fusion.scores";

pub fn sub_prefix(a: AgreementType) -> String {
    format!("sub.{}.", a.name())
}

/// How agreement scores weight the submodel outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Each output is multiplied by its own learnable scalar.
    #[default]
    Scalar,
    /// Scores pass through a softmax over the active agreements first.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionOptions {
    pub score_mode: ScoreMode,
    /// Agreements whose score is pinned to zero; their submodels are not run.
    pub clamped: Vec<AgreementType>,
    pub freeze_submodels: bool,
    /// Feed the main path's corrupted ids to the submodels as well.
    pub mask_chunk_inputs: bool,
    pub span_mode: SpanMode,
}

impl Default for FusionOptions {
    fn default() -> Self {
        FusionOptions {
            score_mode: ScoreMode::Scalar,
            clamped: Vec::new(),
            freeze_submodels: false,
            mask_chunk_inputs: false,
            span_mode: SpanMode::Subtree,
        }
    }
}

impl FusionOptions {
    pub fn is_clamped(&self, a: AgreementType) -> bool {
        self.clamped.contains(&a)
    }

    pub fn all_clamped(&self) -> bool {
        AgreementType::ALL.iter().all(|&a| self.is_clamped(a))
    }
}

#[derive(Debug, Clone)]
pub struct Fusion {
    subs: Vec<Encoder>,
    ln: NormIds,
    scores: ParamId,
    pub options: FusionOptions,
}

impl Fusion {
    pub fn submodel(&self, a: AgreementType) -> &Encoder {
        &self.subs[a.index()]
    }

    pub fn sub_max_len(&self) -> [usize; 4] {
        AgreementType::ALL.map(|a| self.subs[a.index()].config().max_seq_len)
    }

    pub fn scores_id(&self) -> ParamId {
        self.scores
    }

    pub fn norm(&self) -> NormIds {
        self.ln
    }
}

/// Graph nodes produced by one fused forward pass.
pub struct FusedForward {
    pub hidden: Var,
    /// Input to the first main block: token + position (+ agreement) embedding.
    pub input: Var,
    /// Summed score-scaled submodel outputs before the fusion LayerNorm.
    pub agreement_sum: Option<Var>,
    /// Agreement embedding after the fusion LayerNorm.
    pub agreement: Option<Var>,
    /// Per evaluated chunk: its index in `EncodedInput::chunks` and the
    /// attention node of every submodel layer.
    pub sub_attention: Vec<(usize, Vec<Var>)>,
    pub main_attention: Vec<Var>,
}

/// Stage-2 model. Without `fusion` it is a plain MLM encoder.
#[derive(Debug, Clone)]
pub struct Stage2Model<T> {
    pub store: ParamStore<T>,
    main: Encoder,
    fusion: Option<Fusion>,
}

impl<T: Scalar> Stage2Model<T> {
    /// Builds a model with a freshly initialized main encoder. The main
    /// weights depend only on `seed`, not on whether fusion is present.
    pub fn new(
        main_cfg: &ModelConfig,
        submodels: Option<(&[SubmodelCheckpoint<T>], FusionOptions)>,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let main = Encoder::init(&mut store, MAIN_PREFIX, main_cfg, &mut stream(seed, "init/main"))?;
        let fusion = match submodels {
            None => None,
            Some((subs, options)) => Some(attach_fusion(&mut store, main_cfg, subs, options)?),
        };
        let mut model = Stage2Model { store, main, fusion };
        model.apply_trainability();
        Ok(model)
    }

    pub fn main(&self) -> &Encoder {
        &self.main
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        self.fusion.as_ref()
    }

    pub fn hidden_dim(&self) -> usize {
        self.main.config().hidden_dim
    }

    /// Current score value per agreement.
    pub fn scores(&self) -> Option<[f64; 4]> {
        let f = self.fusion.as_ref()?;
        let t = self.store.get(f.scores);
        Some(AgreementType::ALL.map(|a| t.data()[a.index()].as_f64()))
    }

    /// Pins the listed agreements' scores to zero and freezes their
    /// submodels. Agreements not listed keep their current state.
    pub fn clamp(&mut self, agreements: &[AgreementType]) -> Result<()> {
        let f = self
            .fusion
            .as_mut()
            .ok_or_else(|| Error::Invalid("model has no fusion path to clamp".into()))?;
        for &a in agreements {
            if !f.options.clamped.contains(&a) {
                f.options.clamped.push(a);
            }
            self.store.get_mut(f.scores).data_mut()[a.index()] = T::zero();
        }
        f.options.clamped.sort();
        self.apply_trainability();
        Ok(())
    }

    /// Clamps every agreement whose scalar score is exactly zero, so its
    /// submodel leaves the graph. Returns the newly clamped agreements.
    pub fn clamp_zero_scores(&mut self) -> Result<Vec<AgreementType>> {
        let (Some(f), Some(scores)) = (&self.fusion, self.scores()) else {
            return Ok(Vec::new());
        };
        if f.options.score_mode != ScoreMode::Scalar {
            return Ok(Vec::new());
        }
        let zero: Vec<AgreementType> = AgreementType::ALL
            .into_iter()
            .filter(|&a| scores[a.index()] == 0.0 && !f.options.is_clamped(a))
            .collect();
        if !zero.is_empty() {
            self.clamp(&zero)?;
        }
        Ok(zero)
    }

    pub fn set_freeze_submodels(&mut self, freeze: bool) {
        if let Some(f) = self.fusion.as_mut() {
            f.options.freeze_submodels = freeze;
        }
        self.apply_trainability();
    }

    fn apply_trainability(&mut self) {
        let Some(f) = &self.fusion else { return };
        let opts = f.options.clone();
        let scores = f.scores;
        let ln = f.ln;
        for a in AgreementType::ALL {
            let frozen = opts.freeze_submodels || opts.is_clamped(a);
            self.store.set_trainable_prefix(&sub_prefix(a), !frozen);
        }
        // With every agreement clamped the fusion LayerNorm only sees zeros.
        let all = opts.all_clamped();
        self.store.set_trainable(ln.gain, !all);
        self.store.set_trainable(ln.offset, !all);
        self.store.set_trainable(scores, !all);
    }

    /// Tokenizes segments for this model.
    pub fn encode(&self, vocab: &Vocabulary, segments: &[Segment]) -> Result<EncodedInput> {
        if vocab.len() != self.main.config().vocab_size {
            return Err(Error::Invalid(format!(
                "vocabulary of {} does not match model vocabulary of {}",
                vocab.len(),
                self.main.config().vocab_size
            )));
        }
        let limits = self.fusion.as_ref().map(Fusion::sub_max_len);
        encode_input(vocab, segments, self.main.config().max_seq_len, limits.as_ref())
    }

    /// Runs the fused model. `main_ids` replaces the input's ids on the main
    /// path (masking); `chunk_ids`, when given, replaces each chunk's ids.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        input: &EncodedInput,
        main_ids: &[usize],
        chunk_ids: Option<&[Vec<usize>]>,
        mut dropout: Option<&mut Rng>,
    ) -> Result<FusedForward> {
        if main_ids.len() != input.len() {
            return Err(Error::Shape(format!(
                "{} main ids for an input of {}",
                main_ids.len(),
                input.len()
            )));
        }
        let n = main_ids.len();
        let d = self.hidden_dim();
        let mut sub_attention = Vec::new();
        let (agreement_sum, agreement) = match &self.fusion {
            None => (None, None),
            Some(f) => {
                let include: Vec<bool> = AgreementType::ALL.iter().map(|&a| !f.options.is_clamped(a)).collect();
                let scores = match f.options.score_mode {
                    ScoreMode::Scalar => bound.var(f.scores),
                    ScoreMode::Softmax => g.softmax(bound.var(f.scores), include.clone()),
                };
                let mut parts = Vec::new();
                for (ci, ch) in input.chunks.iter().enumerate() {
                    if !include[ch.agreement.index()] || ch.aligned() == 0 {
                        continue;
                    }
                    let ids = chunk_ids.map_or(ch.ids.as_slice(), |c| c[ci].as_slice());
                    let sub = &f.subs[ch.agreement.index()];
                    let out = sub.forward(g, bound, ids, None, None, dropout.as_deref_mut())?;
                    let s = g.gather_rows(scores, vec![ch.agreement.index()]);
                    let scaled = g.scale_by(out.hidden, s);
                    parts.push(g.scatter_rows(scaled, ch.targets.clone(), n));
                    sub_attention.push((ci, out.attention));
                }
                let sum = if parts.is_empty() {
                    g.constant(Tensor::zeros(&[n, d]))
                } else {
                    g.add_all(&parts)
                };
                let normed = g.layer_norm(sum, bound.var(f.ln.gain), bound.var(f.ln.offset));
                (Some(sum), Some(normed))
            }
        };
        let out = self.main.forward(g, bound, main_ids, None, agreement, dropout)?;
        Ok(FusedForward {
            hidden: out.hidden,
            input: out.input,
            agreement_sum,
            agreement,
            sub_attention,
            main_attention: out.attention,
        })
    }

    /// Tied MLM logits of the main encoder.
    pub fn mlm_logits(&self, g: &mut Graph<T>, bound: &Bound, hidden: Var) -> Var {
        self.main.mlm_logits(g, bound, hidden)
    }

    /// Evaluates the fused input for inspection, with the coverage map.
    pub fn fused_input(&self, input: &EncodedInput) -> Result<FusedInput<T>> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let out = self.forward(&mut g, &bound, input, &input.tokens.ids, None, None)?;
        g.check_finite(0)?;
        let n = input.len();
        let mut coverage = vec![Vec::new(); n];
        if let Some(f) = &self.fusion {
            for (ci, ch) in input.chunks.iter().enumerate() {
                if f.options.is_clamped(ch.agreement) {
                    continue;
                }
                for &t in ch.targets.iter().flatten() {
                    if !coverage[t].contains(&(ch.agreement, ci)) {
                        coverage[t].push((ch.agreement, ci));
                    }
                }
            }
        }
        Ok(FusedInput {
            vectors: g.value(out.input).clone(),
            agreement_sum: out.agreement_sum.map(|v| g.value(v).clone()),
            agreement: out.agreement.map(|v| g.value(v).clone()),
            coverage,
        })
    }

    pub fn save(&self, path: &Path, training: &TrainingMeta) -> Result<()> {
        let fusion = self.fusion.as_ref().map(|f| {
            let subs: serde_json::Map<String, Value> = AgreementType::ALL
                .iter()
                .map(|&a| (a.name().to_string(), json!(f.subs[a.index()].config())))
                .collect();
            json!({ "options": f.options, "submodels": subs })
        });
        let meta = json!({
            "kind": STAGE2_KIND,
            "main": self.main.config(),
            "fusion": fusion,
            "training": training,
        });
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(BufWriter::new(file), &meta, &self.store).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, TrainingMeta)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let (meta, store) = read_checkpoint::<T, _>(BufReader::new(file))?;
        if meta.get("kind").and_then(Value::as_str) != Some(STAGE2_KIND) {
            return Err(Error::Format(format!("{} is not a stage-2 checkpoint", path.display())));
        }
        let main_cfg: ModelConfig = serde_json::from_value(meta["main"].clone())?;
        let training: TrainingMeta = serde_json::from_value(meta["training"].clone())?;
        let main = Encoder::bind(&store, MAIN_PREFIX, &main_cfg)?;
        let fusion = if meta["fusion"].is_null() {
            None
        } else {
            let options: FusionOptions = serde_json::from_value(meta["fusion"]["options"].clone())?;
            let mut subs = Vec::with_capacity(4);
            for a in AgreementType::ALL {
                let cfg: ModelConfig = serde_json::from_value(meta["fusion"]["submodels"][a.name()].clone())?;
                subs.push(Encoder::bind(&store, &sub_prefix(a), &cfg)?);
            }
            let d = main_cfg.hidden_dim;
            Some(Fusion {
                subs,
                ln: bind_norm(&store, FUSION_LN, d)?,
                scores: store.expect(FUSION_SCORES, &[4])?,
                options,
            })
        };
        let mut model = Stage2Model { store, main, fusion };
        model.apply_trainability();
        Ok((model, training))
    }
}

const STAGE2_KIND: &str = "stage2";

fn attach_fusion<T: Scalar>(
    store: &mut ParamStore<T>,
    main_cfg: &ModelConfig,
    submodels: &[SubmodelCheckpoint<T>],
    options: FusionOptions,
) -> Result<Fusion> {
    let mut subs = Vec::with_capacity(4);
    for a in AgreementType::ALL {
        let found: Vec<_> = submodels.iter().filter(|s| s.agreement == a).collect();
        let ckpt = match found.as_slice() {
            [one] => *one,
            [] => return Err(Error::Invalid(format!("missing {a} submodel"))),
            _ => return Err(Error::Invalid(format!("more than one {a} submodel"))),
        };
        if ckpt.config.hidden_dim != main_cfg.hidden_dim {
            return Err(Error::Invalid(format!(
                "{a} submodel width {} differs from main width {}",
                ckpt.config.hidden_dim, main_cfg.hidden_dim
            )));
        }
        if ckpt.config.vocab_size != main_cfg.vocab_size {
            return Err(Error::Invalid(format!(
                "{a} submodel vocabulary {} differs from main vocabulary {}",
                ckpt.config.vocab_size, main_cfg.vocab_size
            )));
        }
        let prefix = sub_prefix(a);
        store.absorb(&prefix, ckpt.store.clone())?;
        subs.push(Encoder::bind(store, &prefix, &ckpt.config)?);
    }
    let ln = init_norm(store, FUSION_LN, main_cfg.hidden_dim)?;
    let mut scores = Tensor::full(&[4], T::one());
    for &a in &options.clamped {
        scores.data_mut()[a.index()] = T::zero();
    }
    let scores = store.insert(FUSION_SCORES, ParamKind::AgreementScore, scores)?;
    Ok(Fusion {
        subs,
        ln,
        scores,
        options,
    })
}

/// Main-encoder input of one example with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput<T> {
    /// Token + position (+ agreement) embedding per position.
    pub vectors: Tensor<T>,
    pub agreement_sum: Option<Tensor<T>>,
    pub agreement: Option<Tensor<T>>,
    /// Per position, the (agreement, chunk index) pairs that contributed.
    pub coverage: Vec<Vec<(AgreementType, usize)>>,
}
